import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linko.errors import (
    DuplicateCodeError,
    OntologyParseError,
    OntologyStructureError,
    UnknownConceptError,
)
from linko.ontology import (
    SYSTEM_NAMES,
    ConceptId,
    Ontology,
    OntologySet,
    bundled_ontology_path,
    load_ontology,
    parse_ontology,
    write_ontology,
)

from .conftest import HEART


def test_three_level_file_gives_expected_level_sizes(heart):
    assert heart.depth == 3
    assert [heart.size(level) for level in (1, 2, 3)] == [1, 1, 2]
    assert [c.code for c in heart.leaves] == ["428.0", "428.1"]
    assert heart.description(heart.get("428.0")) == "Congestive heart failure, unspecified"


def test_leaf_with_two_parents_is_structural_error():
    text = HEART + "427,2,420-429,Arrhythmia\n428.0,3,427,dup\n"
    with pytest.raises(OntologyStructureError, match="multiple parents"):
        parse_ontology(text, "dx")


def test_exact_duplicate_row_is_duplicate_error():
    with pytest.raises(DuplicateCodeError):
        parse_ontology(HEART + "428.1,3,428,Left heart failure\n", "dx")


@pytest.mark.parametrize(
    "extra, exc, match",
    [
        ("999.9,3,999,orphan\n", OntologyStructureError, "orphan"),
        ("500.1,3,,no parent\n", OntologyStructureError, "orphan"),
        ("428.9,3,420-429,skips a level\n", OntologyStructureError, "level gap"),
        ("430,1,420-429,root with parent\n", OntologyStructureError, "root"),
        ("428.5,three,428,bad level\n", OntologyParseError, "not an integer"),
        ("428.5,3,428\n", OntologyParseError, "4 fields"),
    ],
)
def test_malformed_rows_are_rejected(extra, exc, match):
    with pytest.raises(exc, match=match):
        parse_ontology(HEART + extra, "dx")


def test_missing_level_is_a_gap():
    text = "code,level,parent_code,description\nA,1,,root\nA.1,3,A,leaf\n"
    with pytest.raises(OntologyStructureError, match="level gap"):
        parse_ontology(text, "dx")


def test_bad_header_and_empty_file():
    with pytest.raises(OntologyParseError, match="header"):
        parse_ontology("a,b,c,d\n", "dx")
    with pytest.raises(OntologyParseError, match="empty"):
        parse_ontology("", "dx")


def test_empty_description_is_flagged_not_fatal():
    ont = parse_ontology(HEART + "428.9,3,428,\n", "dx")
    assert any("empty description" in w for w in ont.warnings)


def test_bundled_sample_has_three_levels():
    ont = load_ontology(bundled_ontology_path(), "dx")
    assert ont.depth == 3
    assert ont.has_leaf("428.0")
    assert ont.has_leaf("250.70")


def test_map_level_examples(heart):
    leaf = heart.get("428.0")
    parent = heart.get("428", 2)
    assert heart.map_level(leaf, 2) == {parent}
    assert heart.map_level(parent, 3) == {heart.get("428.0"), heart.get("428.1")}
    assert heart.map_level(leaf, 3) == {leaf}
    with pytest.raises(ValueError):
        heart.map_level(leaf, 4)
    with pytest.raises(UnknownConceptError):
        heart.map_level(ConceptId("dx", "nope", 3), 1)


def test_ancestor_chain_is_nearest_first(heart):
    chain = heart.ancestor_chain(heart.get("428.0"))
    assert [c.code for c in chain] == ["428", "420-429"]
    with pytest.raises(ValueError):
        heart.ancestor_chain(heart.get("428", 2))


def test_single_level_ontology_has_empty_chain():
    ont = parse_ontology("code,level,parent_code,description\nA,1,,alpha\nB,1,,beta\n", "rx")
    assert ont.depth == 1
    assert ont.ancestor_chain(ont.get("A")) == []


def test_worked_prompt_chain_for_250_7():
    from pathlib import Path

    ont = load_ontology(Path(__file__).parent / "data" / "icd9_dx_4level.csv", "dx")
    chain = ont.ancestor_chain(ont.get("250.7"))
    assert [c.code for c in chain] == ["250", "249-259", "240-279"]
    assert ont.description(chain[0]) == "Diabetes mellitus"


def test_shallow_leaf_is_padded_to_full_depth():
    text = HEART + "425,2,420-429,Cardiomyopathy\n"
    ont = parse_ontology(text, "dx")
    pad = ont.get("425", 3)
    assert ont.parent_of[pad] == ont.get("425", 2)
    assert ont.description(pad) == "Cardiomyopathy"
    # file order is kept: the padded leaf comes after the leaves listed before it
    assert [c.code for c in ont.leaves] == ["428.0", "428.1", "425"]


def test_write_then_load_round_trips(tmp_path, heart):
    text = HEART + "425,2,420-429,Cardiomyopathy\n"
    ont = parse_ontology(text, "dx")
    path = tmp_path / "o.csv"
    write_ontology(ont, path)
    back = load_ontology(path, "dx")
    assert back.levels == ont.levels
    assert back.parent_of == ont.parent_of


def test_ontology_set_orders_types_and_checks_depth(heart):
    rx = parse_ontology("code,level,parent_code,description\nN,1,,nervous\nN02,2,N,analgesics\nN02B,3,N02,other\n", "rx")
    s = OntologySet([rx, heart])
    assert list(s.tags) == ["dx", "rx"]
    assert s["rx"] is rx
    shallow = parse_ontology("code,level,parent_code,description\nP,1,,procs\n", "px")
    with pytest.raises(OntologyStructureError):
        OntologySet([heart, shallow])
    assert SYSTEM_NAMES["dx"] == "ICD-9 Diagnosis"


# -- properties over random trees -------------------------------------------------

@st.composite
def random_tree(draw):
    depth = draw(st.integers(1, 4))
    rows = []
    prev = [f"R{i}" for i in range(draw(st.integers(1, 3)))]
    rows += [(c, 1, "", f"root {c}") for c in prev]
    for level in range(2, depth + 1):
        cur = []
        for p in prev:
            for j in range(draw(st.integers(0, 3))):
                code = f"{p}.{j}"
                cur.append(code)
                rows.append((code, level, p, f"node {code}"))
        if not cur:
            break
        prev = cur
    return Ontology.from_rows("dx", rows)


@settings(max_examples=60, deadline=None)
@given(random_tree())
def test_tree_properties(ont):
    L = ont.depth
    for leaf in ont.leaves:
        chain = ont.ancestor_chain(leaf)
        assert len(chain) == L - 1
        assert [c.level for c in chain] == list(range(L - 1, 0, -1))
    for level in range(1, L + 1):
        # descendant sets of one level partition the leaves
        covered = [leaf for c in ont.levels[level - 1] for leaf in ont.map_level(c, L)]
        assert sorted(covered) == sorted(ont.leaves)
        for c in ont.levels[level - 1]:
            for k in range(1, level):
                for a in ont.map_level(c, k):
                    assert c in ont.map_level(a, level)
    for root in ont.levels[0]:
        assert ont.map_level(root, L)
