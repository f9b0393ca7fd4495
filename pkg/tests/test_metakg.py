import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from linko.cohort import PatientRecord, Visit, generate_synthetic
from linko.errors import MissingArtifactError
from linko.metakg import (
    CountMatrix,
    ProbMatrix,
    UnifiedIndex,
    aggregate_counts,
    binarize,
    build_metakg,
    count_leaf_cooccurrence,
    export_metakg,
    hypergraph_incidence,
    load_metakg,
    read_coo,
    to_probability,
    vertical_adjacency,
    write_coo,
)
from linko.ontology import ConceptId, Ontology, OntologySet, parse_ontology

from .conftest import HEART, tiny_synth
from .oracles import aggregate_oracle, binarize_oracle, cooccurrence_oracle, probability_oracle

RX = "code,level,parent_code,description\nN,1,,Nervous system\nN02,2,N,Analgesics\nN02BE01,3,N02,Paracetamol\nN02BA01,3,N02,Aspirin\n"


@pytest.fixture
def onts(heart):
    return OntologySet([heart, parse_ontology(RX, "rx")])


def dx(*codes):
    return [ConceptId("dx", c, 3) for c in codes]


def rx(*codes):
    return [ConceptId("rx", c, 3) for c in codes]


def test_unified_index_order(onts):
    idx = UnifiedIndex(onts)
    assert [c.code for c in idx.levels[2]] == ["428.0", "428.1", "N02BE01", "N02BA01"]
    assert idx.offsets[2] == {"dx": 0, "rx": 2}
    assert idx.type_slice(3, "rx") == slice(2, 4)
    assert idx.leaf_ancestor[0].tolist() == [0, 0, 1, 1]


def test_single_visit_counts(onts):
    idx = UnifiedIndex(onts)
    rec = PatientRecord("p", (Visit.of(dx("428.0") + rx("N02BE01")),))
    q = count_leaf_cooccurrence([rec], idx).toarray()
    expect = np.zeros((4, 4), dtype=int)
    expect[np.ix_([0, 2], [0, 2])] = 1
    np.testing.assert_array_equal(q, expect)
    assert not count_leaf_cooccurrence([], idx).toarray().any()


def test_aggregate_identity_and_restriction():
    # two parents with one child each: the parent level is the 2x2 restriction
    text = "code,level,parent_code,description\nA,1,,a\nB,1,,b\nA1,2,A,a1\nB1,2,B,b1\n"
    idx = UnifiedIndex(OntologySet([parse_ontology(text, "dx")]))
    q = CountMatrix(2, np.array([[3, 1], [1, 2]]))
    assert aggregate_counts(q, idx, 2) is q
    np.testing.assert_array_equal(aggregate_counts(q, idx, 1).toarray(), q.values)
    with pytest.raises(ValueError):
        aggregate_counts(q, idx, 3)


def test_aggregate_matches_four_loop_oracle_on_random_counts(rng):
    rows = [("R1", 1, "", "r1"), ("R2", 1, "", "r2"), ("R3", 1, "", "r3")]
    rows += [(f"L{i}", 2, f"R{1 + i % 3}", f"leaf {i}") for i in range(8)]
    idx = UnifiedIndex(OntologySet([Ontology.from_rows("dx", rows)]))
    q = rng.integers(0, 9, size=(8, 8))
    got = aggregate_counts(CountMatrix(2, q), idx, 1).toarray()
    np.testing.assert_array_equal(got, aggregate_oracle(q, idx, 1))


def test_probability_examples():
    p = to_probability(CountMatrix(1, np.array([[2, 2, 0], [0, 0, 0], [1, 3, 4]]))).toarray()
    np.testing.assert_allclose(p[0], [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(p[1], [0, 0, 0])
    # unequal marginals make P asymmetric
    assert p[2, 0] != p[0, 2]


def test_binarize_examples():
    p = ProbMatrix(1, np.array([[0.7, 0.3], [0.2, 0.8]]))
    np.testing.assert_array_equal(binarize(p, 0.5), np.eye(2))
    tiny = ProbMatrix(1, np.array([[0.0, 1e-9], [0.0, 0.0]]))
    np.testing.assert_array_equal(binarize(tiny, 1e-12), [[1, 1], [0, 1]])
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            binarize(p, bad)


def test_vertical_examples(onts):
    idx = UnifiedIndex(onts)
    a = np.asarray(vertical_adjacency(idx, 2))
    n_par = idx.size(2)
    # parents 428 and N02; children 428.0, 428.1 (dx) and N02BE01, N02BA01 (rx)
    off = a - np.eye(len(a), dtype=a.dtype)
    assert off.sum() == idx.n_leaves
    assert off[0, n_par:].tolist() == [1, 1, 0, 0]
    assert off[1, n_par:].tolist() == [0, 0, 1, 1]
    assert not off[n_par:].any()  # only parent rows receive edges
    with pytest.raises(ValueError):
        vertical_adjacency(idx, 3)


def test_two_leaves_under_one_parent_vertical(heart):
    idx = UnifiedIndex(OntologySet([heart]))
    a = np.asarray(vertical_adjacency(idx, 2))
    assert a.sum() == 2 + 3


def test_incidence_examples(onts):
    idx = UnifiedIndex(onts)
    rec = PatientRecord("p", (Visit.of(dx("428.0", "428.1")), Visit.of(rx("N02BA01"))))
    h = hypergraph_incidence([rec], idx).toarray()
    assert h[:, 0].tolist() == [1, 1, 0, 0]
    assert h[:, 1].tolist() == [0, 0, 0, 1]


@st.composite
def toy_cohorts(draw):
    seed = draw(st.integers(0, 10_000))
    n_dx = draw(st.integers(4, 12))
    cfg = tiny_synth(
        n_patients=draw(st.integers(3, 12)),
        n_leaves={"dx": n_dx, "rx": 4, "px": 3},
        n_groups={"dx": draw(st.integers(2, 4)), "rx": 2, "px": 1},
        n_chapters={"dx": 2, "rx": 1, "px": 1},
        codes_per_visit={"dx": 2.0, "rx": 1.5, "px": 1.0},
        n_clusters=2,
    )
    records, onts = generate_synthetic(cfg, seed)
    return records, OntologySet(onts)


@settings(max_examples=25, deadline=None)
@given(toy_cohorts(), st.sampled_from([0.01, 0.1, 0.3]))
def test_pipeline_matches_oracles(cohort, tau):
    records, onts = cohort
    idx = UnifiedIndex(onts)
    q_leaf = count_leaf_cooccurrence(records, idx)
    oracle = cooccurrence_oracle(records, idx)
    np.testing.assert_array_equal(q_leaf.toarray(), oracle)
    for level in range(1, idx.depth + 1):
        q = aggregate_counts(q_leaf, idx, level)
        np.testing.assert_array_equal(q.toarray(), aggregate_oracle(oracle, idx, level))
        assert q.toarray().sum() == oracle.sum()  # mass conservation
        p = to_probability(q)
        np.testing.assert_allclose(p.toarray(), probability_oracle(q.toarray()), rtol=0, atol=1e-15)
        rows = p.toarray().sum(axis=1)
        nonzero = q.toarray().sum(axis=1) > 0
        np.testing.assert_allclose(rows[nonzero], 1.0, atol=1e-9)
        np.testing.assert_array_equal(np.asarray(binarize(p, tau)), binarize_oracle(p.toarray(), tau))
    h = hypergraph_incidence(records, idx).toarray()
    assert h.sum(axis=0).tolist() == [len(v) for r in records for v in r.visits]
    np.testing.assert_array_equal(h.sum(axis=1), np.diag(oracle))


@settings(max_examples=20, deadline=None)
@given(toy_cohorts(), st.integers(1, 10))
def test_counts_are_additive_over_cohorts(cohort, cut):
    records, onts = cohort
    idx = UnifiedIndex(onts)
    cut = min(cut, len(records))
    whole = count_leaf_cooccurrence(records, idx)
    a = count_leaf_cooccurrence(records[:cut], idx)
    b = count_leaf_cooccurrence(records[cut:], idx)
    for level in range(1, idx.depth + 1):
        np.testing.assert_array_equal(
            aggregate_counts(whole, idx, level).toarray(),
            aggregate_counts(a, idx, level).toarray() + aggregate_counts(b, idx, level).toarray(),
        )


@settings(max_examples=20, deadline=None)
@given(toy_cohorts(), st.floats(0.001, 1.0), st.floats(0.001, 1.0))
def test_threshold_monotonicity(cohort, t1, t2):
    records, onts = cohort
    t1, t2 = sorted((t1, t2))
    idx = UnifiedIndex(onts)
    p = to_probability(count_leaf_cooccurrence(records, idx))
    loose, strict = np.asarray(binarize(p, t1)), np.asarray(binarize(p, t2))
    assert np.all(strict <= loose)


def test_vertical_edges_stay_within_ontologies(toy_cohort):
    _, onts = toy_cohort
    idx = UnifiedIndex(onts)
    for level in range(1, idx.depth):
        a = sp.coo_matrix(vertical_adjacency(idx, level))
        n_par = idx.size(level)
        nodes = idx.levels[level - 1] + idx.levels[level]
        off = [(r, c) for r, c in zip(a.row, a.col) if r != c]
        assert len(off) == idx.size(level + 1)
        for r, c in off:
            assert r < n_par <= c  # parent row, child column
            assert nodes[r].type_tag == nodes[c].type_tag


def test_sparse_path_matches_dense(toy_cohort, monkeypatch):
    import linko.metakg as mk

    records, onts = toy_cohort
    dense = build_metakg(records, onts)
    monkeypatch.setattr(mk, "DENSE_LIMIT", 0)
    sparse = mk.build_metakg(records, onts)
    for level in range(dense.depth):
        np.testing.assert_array_equal(dense.counts[level].toarray(), sparse.counts[level].toarray())
        np.testing.assert_allclose(dense.probs[level].toarray(), sparse.probs[level].toarray(), atol=1e-15)
        np.testing.assert_array_equal(np.asarray(dense.horizontal[level]), sparse.horizontal[level].toarray())


def test_export_and_reload(tmp_path, toy_cohort):
    records, onts = toy_cohort
    mkg = build_metakg(records, onts, taus=[0.02, 0.05, 0.1])
    export_metakg(mkg, tmp_path)
    back = load_metakg(tmp_path, onts)
    assert back.taus == [0.02, 0.05, 0.1]
    for level in range(mkg.depth):
        np.testing.assert_array_equal(np.asarray(back.horizontal[level]), np.asarray(mkg.horizontal[level]))
        np.testing.assert_allclose(back.probs[level].toarray(), mkg.probs[level].toarray(), rtol=1e-15)
    np.testing.assert_array_equal(back.incidence.toarray(), mkg.incidence.toarray())
    with pytest.raises(MissingArtifactError):
        load_metakg(tmp_path / "missing", onts)


def test_coo_text_format(tmp_path):
    m = np.array([[0, 2], [5, 0]])
    write_coo(m, tmp_path / "m.coo")
    lines = (tmp_path / "m.coo").read_text().splitlines()
    assert lines == ["# 2 2 2 int", "0 1 2", "1 0 5"]
    np.testing.assert_array_equal(read_coo(tmp_path / "m.coo").toarray(), m)


def test_taus_per_level_and_validation(toy_cohort):
    records, onts = toy_cohort
    with pytest.raises(ValueError):
        build_metakg(records, onts, taus=[0.1, 0.2])
    a = build_metakg(records, onts, taus=0.2)
    assert a.taus == [0.2, 0.2, 0.2]
