"""Hierarchical medical ontologies (one tree per concept type).

Levels are numbered from 1 (most general) to ``depth`` (leaf codes as they
appear in visits). Leaves that sit above the deepest level are padded down
by repeating the node, so every ontology has uniform depth.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateCodeError,
    OntologyParseError,
    OntologyStructureError,
    UnknownConceptError,
)

logger = logging.getLogger(__name__)

CONCEPT_TYPES = ("dx", "rx", "px")
HEADER = ["code", "level", "parent_code", "description"]

SYSTEM_NAMES = {
    "dx": "ICD-9 Diagnosis",
    "rx": "ATC Drug",
    "px": "ICD-9 Procedure",
}


@dataclass(frozen=True, order=True)
class ConceptId:
    type_tag: str
    code: str
    level: int

    def __str__(self):
        return f"{self.type_tag}:{self.code}@{self.level}"


@dataclass
class Ontology:
    type_tag: str
    depth: int
    levels: list[list[ConceptId]]
    descriptions: dict[ConceptId, str]
    parent_of: dict[ConceptId, ConceptId]
    warnings: list[str] = field(default_factory=list)
    file_order: dict = field(default_factory=dict)  # node -> row number in the source file

    def __post_init__(self):
        self.children: dict[ConceptId, list[ConceptId]] = {c: [] for lvl in self.levels for c in lvl}
        for child, parent in self.parent_of.items():
            self.children[parent].append(child)
        self._position = {c: i for lvl in self.levels for i, c in enumerate(lvl)}
        self._by_code = {(c.code, c.level): c for lvl in self.levels for c in lvl}
        # ancestor_index[l-1][i]: level-l position of the ancestor of leaf i
        leaves = self.levels[-1]
        self.ancestor_index = []
        for level in range(1, self.depth + 1):
            idx = np.empty(len(leaves), dtype=np.int64)
            for i, leaf in enumerate(leaves):
                idx[i] = self._position[self._ancestor(leaf, level)]
            self.ancestor_index.append(idx)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_rows(cls, type_tag: str, rows: Iterable[Sequence]) -> "Ontology":
        """Build and validate an ontology from ``(code, level, parent_code, description)`` rows."""
        if type_tag not in CONCEPT_TYPES:
            raise ValueError(f"unknown concept type {type_tag!r}")
        records = []
        seen: dict[tuple[str, int], tuple[int, str]] = {}
        for order, (code, level, parent_code, description) in enumerate(rows):
            code = str(code).strip()
            parent_code = (parent_code or "").strip()
            if not code:
                raise OntologyParseError(f"row {order + 1}: empty code")
            key = (code, int(level))
            if key in seen:
                if seen[key][1] != parent_code:
                    raise OntologyStructureError(
                        f"code {code!r} at level {level} lists multiple parents: "
                        f"{seen[key][1]!r} and {parent_code!r}"
                    )
                raise DuplicateCodeError(f"duplicate code {code!r} at level {level}")
            seen[key] = (order, parent_code)
            records.append((order, code, int(level), parent_code, description or ""))

        if not records:
            raise OntologyStructureError("ontology has no nodes")
        depth = max(r[2] for r in records)
        present_levels = {r[2] for r in records}
        for level in range(1, depth + 1):
            if level not in present_levels:
                raise OntologyStructureError(f"level gap: no nodes at level {level}")

        nodes = {}
        for order, code, level, parent_code, desc in records:
            if level < 1:
                raise OntologyParseError(f"code {code!r}: level must be >= 1, got {level}")
            nodes[(code, level)] = ConceptId(type_tag, code, level)

        parent_of = {}
        descriptions = {}
        warnings = []
        order_key = {}
        for order, code, level, parent_code, desc in records:
            node = nodes[(code, level)]
            descriptions[node] = desc
            order_key[node] = order
            if not desc:
                warnings.append(f"{node}: empty description")
            if level == 1:
                if parent_code:
                    raise OntologyStructureError(f"root {code!r} must not have a parent")
                continue
            if not parent_code:
                raise OntologyStructureError(f"orphan node {code!r} at level {level}")
            parent = nodes.get((parent_code, level - 1))
            if parent is None:
                other = [lv for (c, lv) in nodes if c == parent_code]
                if other:
                    raise OntologyStructureError(
                        f"level gap: {code!r} at level {level} has parent {parent_code!r} "
                        f"at level {other[0]}"
                    )
                raise OntologyStructureError(f"orphan node {code!r}: parent {parent_code!r} not found")
            parent_of[node] = parent

        # pad shallow leaves down to the full depth
        has_child = set(parent_of.values())
        for node in list(nodes.values()):
            if node.level < depth and node not in has_child:
                prev = node
                for level in range(node.level + 1, depth + 1):
                    pad = ConceptId(type_tag, node.code, level)
                    if (pad.code, level) in nodes:
                        raise DuplicateCodeError(
                            f"cannot pad {node.code!r}: code already present at level {level}"
                        )
                    nodes[(pad.code, level)] = pad
                    parent_of[pad] = prev
                    descriptions[pad] = descriptions[node]
                    order_key[pad] = order_key[node]
                    prev = pad

        levels = [[] for _ in range(depth)]
        for node in sorted(nodes.values(), key=lambda n: order_key[n]):
            levels[node.level - 1].append(node)
        for msg in warnings:
            logger.warning(msg)
        return cls(type_tag, depth, levels, descriptions, parent_of, warnings, order_key)

    # -- queries ----------------------------------------------------------

    @property
    def leaves(self) -> list[ConceptId]:
        return self.levels[-1]

    def size(self, level: int) -> int:
        return len(self.levels[level - 1])

    def __contains__(self, c) -> bool:
        return c in self._position

    def position(self, c: ConceptId) -> int:
        try:
            return self._position[c]
        except KeyError:
            raise UnknownConceptError(f"{c} not in {self.type_tag} ontology") from None

    def get(self, code: str, level: int | None = None) -> ConceptId:
        level = self.depth if level is None else level
        try:
            return self._by_code[(code, level)]
        except KeyError:
            raise UnknownConceptError(f"{self.type_tag} code {code!r} not found at level {level}") from None

    def has_leaf(self, code: str) -> bool:
        return (code, self.depth) in self._by_code

    def description(self, c: ConceptId) -> str:
        self.position(c)
        return self.descriptions[c]

    def _ancestor(self, c: ConceptId, level: int) -> ConceptId:
        while c.level > level:
            c = self.parent_of[c]
        return c

    def map_level(self, c: ConceptId, k: int) -> set[ConceptId]:
        """Map ``c`` to its ancestor (k < level), descendants (k > level) or itself."""
        self.position(c)
        if not 1 <= k <= self.depth:
            raise ValueError(f"level {k} out of range [1, {self.depth}]")
        if k <= c.level:
            return {self._ancestor(c, k)}
        frontier = [c]
        for _ in range(k - c.level):
            frontier = [ch for node in frontier for ch in self.children[node]]
        return set(frontier)

    def ancestor_chain(self, leaf: ConceptId) -> list[ConceptId]:
        """Ancestors of a leaf, nearest first: ``[P^(L-1)(leaf), ..., P^(1)(leaf)]``."""
        self.position(leaf)
        if leaf.level != self.depth:
            raise ValueError(f"{leaf} is not a leaf (depth {self.depth})")
        chain = []
        node = leaf
        while node.level > 1:
            node = self.parent_of[node]
            chain.append(node)
        return chain

    def chain_of(self, c: ConceptId) -> list[ConceptId]:
        """Ancestors of any node, nearest first."""
        self.position(c)
        chain = []
        while c.level > 1:
            c = self.parent_of[c]
            chain.append(c)
        return chain

    def rows(self) -> list[tuple[str, int, str, str]]:
        """Source rows in file order (padding copies are regenerated on load)."""
        nodes = [c for level in self.levels for c in level]
        if self.file_order:
            nodes.sort(key=lambda c: (self.file_order[c], c.level))
        out = []
        for c in nodes:
            parent = self.parent_of.get(c)
            if parent is not None and parent.code == c.code:
                continue
            out.append((c.code, c.level, parent.code if parent else "", self.descriptions[c]))
        return out


def parse_ontology(text: str, type_tag: str) -> Ontology:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise OntologyParseError("empty ontology file") from None
    if [h.strip() for h in header] != HEADER:
        raise OntologyParseError(f"bad header {header!r}, expected {','.join(HEADER)}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 4:
            raise OntologyParseError(f"line {lineno}: expected 4 fields, got {len(row)}")
        code, level, parent, desc = row
        try:
            level = int(level)
        except ValueError:
            raise OntologyParseError(f"line {lineno}: level {level!r} is not an integer") from None
        rows.append((code, level, parent, desc))
    return Ontology.from_rows(type_tag, rows)


def load_ontology(path, type_tag: str) -> Ontology:
    path = Path(path)
    return parse_ontology(path.read_text(encoding="utf-8"), type_tag)


def write_ontology(ont: Ontology, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for row in ont.rows():
            writer.writerow(row)


def bundled_ontology_path(name: str = "icd9_dx_sample.csv") -> Path:
    return Path(__file__).parent / "data" / name


class OntologySet:
    """The loaded ontologies in canonical type order (dx, rx, px)."""

    def __init__(self, ontologies: Iterable[Ontology]):
        by_tag = {}
        for ont in ontologies:
            if ont.type_tag in by_tag:
                raise ValueError(f"two ontologies for type {ont.type_tag!r}")
            by_tag[ont.type_tag] = ont
        self.ontologies = [by_tag[t] for t in CONCEPT_TYPES if t in by_tag]
        depths = {o.depth for o in self.ontologies}
        if len(depths) > 1:
            raise OntologyStructureError(f"ontologies disagree on depth: {sorted(depths)}")
        self.depth = depths.pop() if depths else 0

    def __iter__(self):
        return iter(self.ontologies)

    def __len__(self):
        return len(self.ontologies)

    def __getitem__(self, tag: str) -> Ontology:
        for ont in self.ontologies:
            if ont.type_tag == tag:
                return ont
        raise KeyError(tag)

    def __contains__(self, tag):
        return any(o.type_tag == tag for o in self.ontologies)

    @property
    def tags(self):
        return [o.type_tag for o in self.ontologies]
