"""Meta-KG construction.

Horizontal graphs come from visit co-occurrence (counted at the leaf level,
aggregated up the hierarchy, normalised per row and thresholded). Vertical
graphs connect each level to its parent level within one ontology. The leaf
hypergraph has one hyperedge per visit.

Adjacency convention: ``A[p, q] == 1`` puts ``q`` in the attention
neighbourhood of ``p`` (information flows q -> p). Vertical adjacencies are
stored over the stacked node set ``[parents; children]`` with
``A[parent, child] == 1`` for every child -> parent edge.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .cohort import PatientRecord
from .errors import MissingArtifactError
from .ontology import ConceptId, OntologySet

logger = logging.getLogger(__name__)

DENSE_LIMIT = 512
DEFAULT_TAU = 0.01


class UnifiedIndex:
    """Per-level node tables spanning all ontologies (dx, then rx, then px; file order within)."""

    def __init__(self, ontologies: OntologySet):
        if not isinstance(ontologies, OntologySet):
            ontologies = OntologySet(ontologies)
        self.ontologies = ontologies
        self.depth = ontologies.depth
        self.levels: list[list[ConceptId]] = []
        self.offsets: list[dict[str, int]] = []
        for level in range(1, self.depth + 1):
            nodes, offs = [], {}
            for ont in ontologies:
                offs[ont.type_tag] = len(nodes)
                nodes.extend(ont.levels[level - 1])
            self.levels.append(nodes)
            self.offsets.append(offs)
        self._pos = [{c: i for i, c in enumerate(nodes)} for nodes in self.levels]
        # leaf_ancestor[l-1][i]: unified level-l index of leaf i's ancestor
        self.leaf_ancestor = []
        for level in range(1, self.depth + 1):
            parts = [ont.ancestor_index[level - 1] + self.offsets[level - 1][ont.type_tag] for ont in ontologies]
            self.leaf_ancestor.append(np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64))
        # parent_index[l-1][i]: unified level-l index of the parent of level-(l+1) node i
        self.parent_index = []
        for level in range(1, self.depth):
            idx = np.empty(len(self.levels[level]), dtype=np.int64)
            for i, c in enumerate(self.levels[level]):
                ont = ontologies[c.type_tag]
                idx[i] = self._pos[level - 1][ont.parent_of[c]]
            self.parent_index.append(idx)

    def size(self, level: int) -> int:
        return len(self.levels[level - 1])

    @property
    def n_leaves(self) -> int:
        return len(self.levels[-1])

    def position(self, c: ConceptId) -> int:
        return self._pos[c.level - 1][c]

    def leaf_position(self, c: ConceptId) -> int:
        return self._pos[-1][c]

    def type_slice(self, level: int, tag: str) -> slice:
        start = self.offsets[level - 1][tag]
        return slice(start, start + self.ontologies[tag].size(level))

    def membership(self, level: int) -> sp.csr_matrix:
        """Sparse N_leaf x N_level 0/1 matrix: leaf i under node p."""
        n = self.n_leaves
        anc = self.leaf_ancestor[level - 1]
        return sp.csr_matrix((np.ones(n), (np.arange(n), anc)), shape=(n, self.size(level)))


@dataclass
class CountMatrix:
    level: int
    values: np.ndarray | sp.spmatrix

    def toarray(self) -> np.ndarray:
        return self.values.toarray() if sp.issparse(self.values) else np.asarray(self.values)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ProbMatrix:
    level: int
    values: np.ndarray | sp.spmatrix

    def toarray(self) -> np.ndarray:
        return self.values.toarray() if sp.issparse(self.values) else np.asarray(self.values)


def _visit_csr(records: Sequence[PatientRecord], index: UnifiedIndex):
    indptr = [0]
    indices = []
    for rec in records:
        for visit in rec.visits:
            indices.extend(index.leaf_position(c) for c in visit.codes)
            indptr.append(len(indices))
    return np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64)


def count_leaf_cooccurrence(records: Sequence[PatientRecord], index: UnifiedIndex) -> CountMatrix:
    """Q[i, j] = number of visits containing both leaf i and leaf j (Q[i, i] = occurrences of i)."""
    n = index.n_leaves
    indptr, indices = _visit_csr(records, index)
    if n < DENSE_LIMIT:
        return CountMatrix(index.depth, _kernels.cooccurrence(indptr, indices, n))
    b = sp.csr_matrix((np.ones(len(indices), dtype=np.int64), indices, indptr), shape=(len(indptr) - 1, n))
    return CountMatrix(index.depth, (b.T @ b).tocsr())


def aggregate_counts(q_leaf: CountMatrix, index: UnifiedIndex, level: int) -> CountMatrix:
    """Lift leaf counts to ``level``: Q_pq = sum over leaves i under p and j under q of Q_ij."""
    if not 1 <= level <= index.depth:
        raise ValueError(f"level {level} out of range")
    if level == index.depth:
        return q_leaf
    c = index.membership(level).astype(np.int64)
    if sp.issparse(q_leaf.values):
        return CountMatrix(level, (c.T @ q_leaf.values @ c).tocsr())
    left = c.T @ q_leaf.values  # C^T Q
    agg = (c.T @ left.T).T  # C^T Q C, keeping the sparse operand on the left
    return CountMatrix(level, np.ascontiguousarray(agg))


def to_probability(q: CountMatrix) -> ProbMatrix:
    """Row-normalise counts; rows with no counts stay all-zero."""
    if sp.issparse(q.values):
        m = q.values.tocsr().astype(np.float64)
        rows = np.asarray(m.sum(axis=1)).ravel()
        inv = np.divide(1.0, rows, out=np.zeros_like(rows), where=rows > 0)
        return ProbMatrix(q.level, (sp.diags(inv) @ m).tocsr())
    m = np.asarray(q.values, dtype=np.float64)
    rows = m.sum(axis=1, keepdims=True)
    out = np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)
    return ProbMatrix(q.level, out)


def binarize(p: ProbMatrix, tau: float):
    """0/1 adjacency ``P >= tau`` with self-loops forced on."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    n = p.values.shape[0]
    if sp.issparse(p.values):
        m = p.values.tocsr()
        keep = m.copy()
        keep.data = (keep.data >= tau).astype(np.int8)
        keep.eliminate_zeros()
        return ((keep + sp.identity(n, dtype=np.int8, format="csr")) > 0).astype(np.int8).tocsr()
    a = (p.values >= tau).astype(np.int8)
    np.fill_diagonal(a, 1)
    return a


def vertical_adjacency(index: UnifiedIndex, level: int):
    """Adjacency over ``[level nodes; level+1 nodes]``: child -> parent edges plus self-loops."""
    if not 1 <= level < index.depth:
        raise ValueError(f"vertical level {level} out of range [1, {index.depth - 1}]")
    n_par, n_ch = index.size(level), index.size(level + 1)
    n = n_par + n_ch
    parents = index.parent_index[level - 1]
    rows = np.concatenate([parents, np.arange(n)])
    cols = np.concatenate([n_par + np.arange(n_ch), np.arange(n)])
    a = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    return a.toarray() if n < DENSE_LIMIT else a


def hypergraph_incidence(records: Sequence[PatientRecord], index: UnifiedIndex) -> sp.csr_matrix:
    """N_leaf x M incidence, one column per visit (H[i, j] = 1 iff leaf i in visit j)."""
    indptr, indices = _visit_csr(records, index)
    m = len(indptr) - 1
    cols = np.repeat(np.arange(m), np.diff(indptr))
    return sp.csr_matrix((np.ones(len(indices), dtype=np.int8), (indices, cols)), shape=(index.n_leaves, m))


@dataclass
class MetaKG:
    index: UnifiedIndex
    taus: list[float]
    counts: list[CountMatrix]
    probs: list[ProbMatrix]
    horizontal: list  # per level 1..L
    vertical: list  # per level 1..L-1
    incidence: sp.csr_matrix
    meta: dict = field(default_factory=dict)

    @property
    def depth(self):
        return self.index.depth

    def horizontal_edges(self, level: int) -> int:
        a = self.horizontal[level - 1]
        return int(a.nnz if sp.issparse(a) else np.count_nonzero(a))


def resolve_taus(taus, depth) -> list[float]:
    if taus is None:
        return [DEFAULT_TAU] * depth
    if np.isscalar(taus):
        return [float(taus)] * depth
    taus = [float(t) for t in taus]
    if len(taus) != depth:
        raise ValueError(f"need {depth} thresholds, got {len(taus)}")
    return taus


def build_metakg(records: Sequence[PatientRecord], ontologies: OntologySet, taus=None) -> MetaKG:
    index = UnifiedIndex(ontologies)
    taus = resolve_taus(taus, index.depth)
    q_leaf = count_leaf_cooccurrence(records, index)
    counts, probs, horizontal = [], [], []
    for level in range(1, index.depth + 1):
        q = aggregate_counts(q_leaf, index, level)
        p = to_probability(q)
        counts.append(q)
        probs.append(p)
        horizontal.append(binarize(p, taus[level - 1]))
    vertical = [vertical_adjacency(index, level) for level in range(1, index.depth)]
    incidence = hypergraph_incidence(records, index)
    mkg = MetaKG(index, taus, counts, probs, horizontal, vertical, incidence)
    mkg.meta = {
        "n_records": len(records),
        "n_visits": int(incidence.shape[1]),
        "nodes_per_level": [index.size(level) for level in range(1, index.depth + 1)],
        "taus": taus,
    }
    for level in range(1, index.depth + 1):
        logger.info("level %d: %d nodes, %d horizontal edges", level, index.size(level), mkg.horizontal_edges(level))
    return mkg


# -- coordinate-list export -----------------------------------------------------

def write_coo(matrix, path) -> None:
    m = sp.coo_matrix(matrix)
    order = np.lexsort((m.col, m.row))
    is_int = np.issubdtype(m.dtype, np.integer)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {m.shape[0]} {m.shape[1]} {m.nnz} {'int' if is_int else 'float'}\n")
        for r, c, v in zip(m.row[order], m.col[order], m.data[order]):
            fh.write(f"{r} {c} {int(v) if is_int else repr(float(v))}\n")


def read_coo(path, dense_limit=DENSE_LIMIT):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if not header or header[0] != "#":
            raise MissingArtifactError(f"{path}: missing coordinate-list header")
        n_rows, n_cols, nnz, kind = int(header[1]), int(header[2]), int(header[3]), header[4]
        dtype = np.int64 if kind == "int" else np.float64
        body = np.loadtxt(fh, dtype=np.float64, ndmin=2) if nnz else np.zeros((0, 3))
    m = sp.csr_matrix(
        (body[:, 2].astype(dtype), (body[:, 0].astype(np.int64), body[:, 1].astype(np.int64))),
        shape=(n_rows, n_cols),
    )
    return m


def export_metakg(mkg: MetaKG, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for level in range(1, mkg.depth + 1):
        for stem, mat in (
            (f"counts_l{level}", mkg.counts[level - 1].values),
            (f"probs_l{level}", mkg.probs[level - 1].values),
            (f"horizontal_l{level}", mkg.horizontal[level - 1]),
        ):
            path = out_dir / f"{stem}.coo"
            write_coo(mat, path)
            written.append(path)
    for level in range(1, mkg.depth):
        path = out_dir / f"vertical_l{level}.coo"
        write_coo(mkg.vertical[level - 1], path)
        written.append(path)
    path = out_dir / "incidence.coo"
    write_coo(mkg.incidence, path)
    written.append(path)
    nodes = {
        f"level_{level}": [f"{c.type_tag}:{c.code}" for c in mkg.index.levels[level - 1]]
        for level in range(1, mkg.depth + 1)
    }
    (out_dir / "metakg.json").write_text(json.dumps({"meta": mkg.meta, "nodes": nodes}, indent=1), encoding="utf-8")
    written.append(out_dir / "metakg.json")
    return written


def load_metakg(in_dir, ontologies: OntologySet) -> MetaKG:
    in_dir = Path(in_dir)
    info_path = in_dir / "metakg.json"
    if not info_path.exists():
        raise MissingArtifactError(f"no Meta-KG at {in_dir}")
    info = json.loads(info_path.read_text(encoding="utf-8"))
    index = UnifiedIndex(ontologies)
    for level in range(1, index.depth + 1):
        expect = [f"{c.type_tag}:{c.code}" for c in index.levels[level - 1]]
        if info["nodes"][f"level_{level}"] != expect:
            raise MissingArtifactError(f"Meta-KG node table at level {level} does not match the ontologies")

    def maybe_dense(m, n):
        return m.toarray() if n < DENSE_LIMIT else m

    counts, probs, horizontal = [], [], []
    for level in range(1, index.depth + 1):
        n = index.size(level)
        counts.append(CountMatrix(level, maybe_dense(read_coo(in_dir / f"counts_l{level}.coo"), n)))
        probs.append(ProbMatrix(level, maybe_dense(read_coo(in_dir / f"probs_l{level}.coo"), n)))
        h = read_coo(in_dir / f"horizontal_l{level}.coo").astype(np.int8)
        horizontal.append(maybe_dense(h, n))
    vertical = []
    for level in range(1, index.depth):
        v = read_coo(in_dir / f"vertical_l{level}.coo").astype(np.int8)
        vertical.append(maybe_dense(v, v.shape[0]))
    incidence = read_coo(in_dir / "incidence.coo").astype(np.int8).tocsr()
    return MetaKG(index, list(info["meta"]["taus"]), counts, probs, horizontal, vertical, incidence, info["meta"])
