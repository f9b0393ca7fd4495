"""EHR visit sequences: loading, synthetic generation and next-visit samples."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CohortParseError, ConfigError, UnknownCodeError
from .ontology import CONCEPT_TYPES, ConceptId, Ontology, OntologySet

logger = logging.getLogger(__name__)

_TYPE_RANK = {t: i for i, t in enumerate(CONCEPT_TYPES)}


def _code_key(c: ConceptId):
    return (_TYPE_RANK[c.type_tag], c.code)


@dataclass(frozen=True)
class Visit:
    """Deduplicated leaf codes of one encounter, kept in canonical (type, code) order."""

    codes: tuple[ConceptId, ...]

    @classmethod
    def of(cls, codes: Iterable[ConceptId]) -> "Visit":
        return cls(tuple(sorted(set(codes), key=_code_key)))

    def __len__(self):
        return len(self.codes)

    def __iter__(self):
        return iter(self.codes)

    def of_type(self, tag: str) -> list[ConceptId]:
        return [c for c in self.codes if c.type_tag == tag]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    @property
    def n_visits(self) -> int:
        return len(self.visits)


@dataclass(frozen=True)
class Sample:
    patient_id: str
    t: int  # number of visits in the input prefix
    input_visits: tuple[Visit, ...]
    target: np.ndarray = field(compare=False)  # multi-hot over dx leaves


# -- file format ----------------------------------------------------------------

def parse_cohort_line(line: str, ontologies: OntologySet, lineno=None) -> PatientRecord:
    try:
        pid, body = line.rstrip("\n").split("\t", 1)
    except ValueError:
        raise CohortParseError(f"line {lineno}: expected 'patient_id<TAB>visits'") from None
    pid = pid.strip()
    if not pid:
        raise CohortParseError(f"line {lineno}: empty patient id")
    visits = []
    for chunk in body.split(";"):
        chunk = chunk.strip()
        codes = []
        for item in filter(None, (s.strip() for s in chunk.split(","))):
            code, sep, tag = item.rpartition(":")
            if not sep or not code:
                raise CohortParseError(f"line {lineno}: malformed code entry {item!r}")
            if tag not in ontologies:
                raise CohortParseError(f"line {lineno}: unknown concept type {tag!r} in {item!r}")
            ont = ontologies[tag]
            if not ont.has_leaf(code):
                raise UnknownCodeError(f"{code}:{tag}", lineno)
            codes.append(ont.get(code))
        visits.append(Visit.of(codes))
    if not visits or (len(visits) == 1 and not visits[0].codes and not body.strip()):
        raise CohortParseError(f"line {lineno}: patient {pid!r} has no visits")
    return PatientRecord(pid, tuple(visits))


def load_cohort(path, ontologies: OntologySet, strict: bool = True) -> list[PatientRecord]:
    """Read a cohort file; with ``strict=False`` bad lines are skipped with a diagnostic."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse_cohort_line(line, ontologies, lineno))
            except (CohortParseError, UnknownCodeError) as exc:
                if strict:
                    raise
                logger.warning("rejected line %d: %s", lineno, exc)
    if not records:
        logger.warning("cohort %s is empty", path)
    return records


def format_record(rec: PatientRecord) -> str:
    visits = ";".join(",".join(f"{c.code}:{c.type_tag}" for c in v.codes) for v in rec.visits)
    return f"{rec.patient_id}\t{visits}"


def write_cohort(records: Sequence[PatientRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(format_record(rec) + "\n")


# -- samples and splits ------------------------------------------------------------

def make_samples(records: Sequence[PatientRecord], dx_ontology: Ontology) -> list[Sample]:
    """One sample per (patient, t), predicting the dx leaves of visit t+1 from visits 1..t."""
    pos = {c: i for i, c in enumerate(dx_ontology.leaves)}
    n = len(pos)
    samples = []
    for rec in records:
        for t in range(1, rec.n_visits):
            target = np.zeros(n, dtype=np.float64)
            for c in rec.visits[t].of_type("dx"):
                target[pos[c]] = 1.0
            if not target.any():
                logger.warning("patient %s visit %d has no diagnosis codes; sample skipped", rec.patient_id, t + 1)
                continue
            samples.append(Sample(rec.patient_id, t, rec.visits[:t], target))
    return samples


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_patients(patient_ids: Sequence[str], fold_count: int, seed: int) -> list[tuple[list, list, list]]:
    """Patient-level k-fold assignment: per fold ``(train_ids, val_ids, test_ids)``.

    Test is fold k, validation is fold k+1 (for two folds, half of the remainder).
    """
    if fold_count < 2:
        raise ConfigError("fold_count must be >= 2")
    ids = list(dict.fromkeys(patient_ids))
    if len(ids) < fold_count:
        raise ConfigError(f"{len(ids)} patients cannot fill {fold_count} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = [[ids[i] for i in part] for part in np.array_split(order, fold_count)]
    out = []
    for k in range(fold_count):
        test = chunks[k]
        if fold_count >= 3:
            val = chunks[(k + 1) % fold_count]
            train = [p for j, c in enumerate(chunks) if j not in (k, (k + 1) % fold_count) for p in c]
        else:
            rest = chunks[(k + 1) % fold_count]
            half = max(1, len(rest) // 2)
            val, train = rest[:half], rest[half:]
        out.append((train, val, test))
    return out


def split(samples: Sequence[Sample], fold_count: int, seed: int) -> list[Fold]:
    folds = split_patients([s.patient_id for s in samples], fold_count, seed)
    pid = np.array([s.patient_id for s in samples], dtype=object)
    out = []
    for train, val, test in folds:
        out.append(
            Fold(
                np.flatnonzero(np.isin(pid, train)),
                np.flatnonzero(np.isin(pid, val)),
                np.flatnonzero(np.isin(pid, test)),
            )
        )
    return out


# -- synthetic cohorts ------------------------------------------------------------

@dataclass
class SynthConfig:
    """Parameters of the planted-cluster cohort generator.

    Each latent condition cluster owns a slice of the dx, rx and px leaves;
    ``cross_strength`` is the probability that a drug or procedure code is
    drawn from an active cluster rather than from the global marginal, and
    ``hierarchy_alignment`` the probability that a leaf is filed under a
    parent group of its own cluster.
    """

    n_patients: int = 750
    mean_extra_visits: float = 1.0
    max_visits: int = 8
    n_leaves: dict = field(default_factory=lambda: {"dx": 200, "rx": 60, "px": 60})
    n_groups: dict = field(default_factory=lambda: {"dx": 40, "rx": 12, "px": 12})
    n_chapters: dict = field(default_factory=lambda: {"dx": 8, "rx": 4, "px": 4})
    codes_per_visit: dict = field(default_factory=lambda: {"dx": 12.0, "rx": 7.0, "px": 2.0})
    n_clusters: int = 20
    max_clusters_per_patient: int = 3
    cluster_activation: float = 0.85
    cross_strength: float = 0.8
    hierarchy_alignment: float = 0.9
    dx_background: float = 0.15
    zipf_exponent: float = 1.0

    def validate(self):
        for tag in CONCEPT_TYPES:
            leaves, groups, chapters = self.n_leaves[tag], self.n_groups[tag], self.n_chapters[tag]
            if not leaves >= groups >= chapters >= 1:
                raise ConfigError(f"{tag}: need leaves >= groups >= chapters >= 1")
            if self.codes_per_visit[tag] > leaves:
                raise ConfigError(f"{tag}: {self.codes_per_visit[tag]} codes per visit exceeds {leaves} leaves")
            if leaves < self.n_clusters:
                raise ConfigError(f"{tag}: fewer leaves than clusters")
        if not 0.0 <= self.cross_strength <= 1.0:
            raise ConfigError("cross_strength must be in [0, 1]")
        if not 0.0 <= self.hierarchy_alignment <= 1.0:
            raise ConfigError("hierarchy_alignment must be in [0, 1]")
        if self.n_patients < 1 or self.n_clusters < 1:
            raise ConfigError("n_patients and n_clusters must be positive")


_PREFIX = {"dx": "D", "rx": "R", "px": "P"}
_NOUN = {"dx": "disorder", "rx": "agent", "px": "procedure"}
_SYLLABLES = ["ka", "vo", "ri", "mel", "to", "san", "de", "lu", "pra", "ne", "cor", "fi", "gam", "ost", "ur", "bel"]


def _theme_words(rng, n):
    words = []
    seen = set()
    while len(words) < n:
        w = "".join(rng.choice(_SYLLABLES, size=3))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _assign_balanced(rng, n_items, n_bins):
    """Random assignment of items to bins with every bin nonempty."""
    base = np.arange(n_items) % n_bins
    return base[rng.permutation(n_items)]


def _build_ontology(rng, tag, cfg: SynthConfig, themes):
    n_leaf, n_grp, n_ch = cfg.n_leaves[tag], cfg.n_groups[tag], cfg.n_chapters[tag]
    nc = cfg.n_clusters
    leaf_cluster = _assign_balanced(rng, n_leaf, nc)
    group_cluster = np.arange(n_grp) % nc
    cluster_chapter = np.arange(nc) % n_ch

    group_chapter = np.empty(n_grp, dtype=np.int64)
    for g in range(n_grp):
        if rng.random() < cfg.hierarchy_alignment:
            group_chapter[g] = cluster_chapter[group_cluster[g]]
        else:
            group_chapter[g] = rng.integers(n_ch)
    group_chapter[:n_ch] = np.arange(n_ch)  # every chapter populated

    leaf_group = np.empty(n_leaf, dtype=np.int64)
    for i in range(n_leaf):
        own = np.flatnonzero(group_cluster == leaf_cluster[i])
        if len(own) and rng.random() < cfg.hierarchy_alignment:
            leaf_group[i] = rng.choice(own)
        else:
            leaf_group[i] = rng.integers(n_grp)
    for g in range(n_grp):
        if not np.any(leaf_group == g):
            counts = np.bincount(leaf_group, minlength=n_grp)
            donor = int(np.argmax(counts))
            victims = np.flatnonzero(leaf_group == donor)
            leaf_group[victims[rng.integers(len(victims))]] = g

    p = _PREFIX[tag]
    rows = []
    for ch in range(n_ch):
        th = themes[int(np.flatnonzero(cluster_chapter == ch)[0])] if np.any(cluster_chapter == ch) else "general"
        rows.append((f"{p}C{ch:02d}", 1, "", f"{th} {_NOUN[tag]} chapter"))
    for g in range(n_grp):
        rows.append((f"{p}G{g:03d}", 2, f"{p}C{group_chapter[g]:02d}", f"{themes[group_cluster[g]]} {_NOUN[tag]} group"))
    within = np.zeros(n_grp, dtype=np.int64)
    leaf_codes = []
    for i in range(n_leaf):
        g = leaf_group[i]
        code = f"{p}{g:03d}.{within[g]}"
        within[g] += 1
        leaf_codes.append(code)
        rows.append((code, 3, f"{p}G{g:03d}", f"{themes[leaf_cluster[i]]} {_NOUN[tag]} variant {within[g]}"))
    ont = Ontology.from_rows(tag, rows)
    leaves = [ont.get(c) for c in leaf_codes]
    return ont, leaves, leaf_cluster


def _zipf(n, s):
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _draw_unique(rng, n, pools):
    """Draw up to ``n`` distinct items; ``pools`` is a callable returning one draw."""
    out = []
    seen = set()
    attempts = 0
    while len(out) < n and attempts < 20 * n + 20:
        item = pools()
        attempts += 1
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def generate_synthetic(cfg: SynthConfig | None = None, seed: int = 0):
    """Seeded cohort with latent condition clusters spanning dx, rx and px codes.

    Returns ``(records, ontologies)`` where ``ontologies`` is ``[dx, rx, px]``.
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    themes = _theme_words(rng, cfg.n_clusters)

    onts, leaves, members, member_w, global_w = {}, {}, {}, {}, {}
    for tag in CONCEPT_TYPES:
        ont, lv, lc = _build_ontology(rng, tag, cfg, themes)
        onts[tag], leaves[tag] = ont, lv
        members[tag] = [np.flatnonzero(lc == k) for k in range(cfg.n_clusters)]
        member_w[tag] = []
        pop = np.zeros(len(lv))
        for k in range(cfg.n_clusters):
            idx = members[tag][k]
            w = _zipf(len(idx), cfg.zipf_exponent)
            perm = rng.permutation(len(idx))
            member_w[tag].append(w[perm])
            pop[idx] += w[perm]
        global_w[tag] = pop / pop.sum()

    prevalence = _zipf(cfg.n_clusters, 0.5)[rng.permutation(cfg.n_clusters)]
    n_choice = np.arange(1, cfg.max_clusters_per_patient + 1)
    n_prob = 0.5 ** n_choice
    n_prob /= n_prob.sum()

    records = []
    width = len(str(cfg.n_patients - 1))
    for j in range(cfg.n_patients):
        k = min(int(rng.choice(n_choice, p=n_prob)), cfg.n_clusters)
        clusters = rng.choice(cfg.n_clusters, size=k, replace=False, p=prevalence)
        n_visits = min(cfg.max_visits, 2 + int(rng.poisson(cfg.mean_extra_visits)))
        visits = []
        for _ in range(n_visits):
            active = clusters[rng.random(k) < cfg.cluster_activation]
            if len(active) == 0:
                active = clusters[[rng.integers(k)]]
            codes = []
            for tag in CONCEPT_TYPES:
                mean = cfg.codes_per_visit[tag]
                n = int(rng.poisson(mean))
                if tag == "dx":
                    n = max(n, 1)
                mix = cfg.dx_background if tag == "dx" else 1.0 - cfg.cross_strength
                n_leaf = len(leaves[tag])

                def draw(tag=tag, mix=mix, n_leaf=n_leaf):
                    if rng.random() < mix:
                        return int(rng.choice(n_leaf, p=global_w[tag]))
                    c = active[rng.integers(len(active))]
                    return int(members[tag][c][rng.choice(len(members[tag][c]), p=member_w[tag][c])])

                codes.extend(leaves[tag][i] for i in _draw_unique(rng, n, draw))
            visits.append(Visit.of(codes))
        records.append(PatientRecord(f"P{j:0{width}d}", tuple(visits)))
    return records, [onts[t] for t in CONCEPT_TYPES]
