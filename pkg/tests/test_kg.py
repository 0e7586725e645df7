import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkgx.errors import GraphFormatError, UnknownEntityError
from pkgx.kg import KnowledgeGraph, load_triples, neighbors, node_surprisal


def test_counts(toy_kg):
    assert (toy_kg.num_entities, toy_kg.num_relations, toy_kg.num_triples) == (4, 1, 4)
    assert toy_kg.entities == ("a", "b", "c", "d")


def test_duplicates_collapse():
    kg = load_triples(["a\tr\tb", "a\tr\tc", "a\tr\tb", "b\tr\tc", "c\tr\td"])
    assert kg.num_triples == 4


def test_malformed_line_reports_line_number():
    with pytest.raises(GraphFormatError, match="line 2"):
        load_triples(["a\tr\tb", "a\tr", "b\tr\tc"])


def test_empty_input_is_an_error():
    with pytest.raises(GraphFormatError, match="empty"):
        load_triples(["# only a comment", ""])


def test_comments_and_paths(tmp_path):
    f = tmp_path / "g.tsv"
    f.write_text("# header\nCompound::DB01039\ttreats\tDisease::DOID:3393\n\n", encoding="utf-8")
    kg = load_triples(str(f))
    assert kg.entities == ("Compound::DB01039", "Disease::DOID:3393")


def test_neighbors(toy_kg):
    assert neighbors(toy_kg, "a") == [("r", "b"), ("r", "c")]
    assert neighbors(toy_kg, "d") == []
    with pytest.raises(UnknownEntityError):
        neighbors(toy_kg, "zzz")


def test_neighbors_sorted_by_relation_then_object():
    kg = load_triples(["x\ts\tz", "x\tr\tz", "x\ts\ty", "x\tr\ty"])
    # relation ids: s=0, r=1; entity ids: x=0, z=1, y=2
    assert neighbors(kg, "x") == [("s", "z"), ("s", "y"), ("r", "z"), ("r", "y")]


def test_surprisal_hand_values(toy_kg):
    # 2|F| = 8; freq d=1, b=2, c=3
    assert node_surprisal(toy_kg, "d") == pytest.approx(1.0, abs=1e-15)
    assert node_surprisal(toy_kg, "c") == pytest.approx(math.log(8 / 3) / math.log(8), abs=1e-12)
    assert node_surprisal(toy_kg, "c") == pytest.approx(0.4717, abs=5e-5)
    assert node_surprisal(toy_kg, "b") == pytest.approx(2 / 3, abs=1e-12)
    with pytest.raises(UnknownEntityError):
        node_surprisal(toy_kg, "q")


def test_graph_is_immutable(toy_kg):
    with pytest.raises(ValueError):
        toy_kg.node_frequency[0] = 5
    with pytest.raises(ValueError):
        toy_kg.triples[0, 0] = 1


triples_strategy = st.lists(
    st.tuples(st.integers(0, 12), st.integers(0, 3), st.integers(0, 12)), min_size=1, max_size=60
)


def _kg_from(rows):
    return load_triples([f"e{s}\tr{r}\te{o}" for s, r, o in rows])


@settings(max_examples=60, deadline=None)
@given(triples_strategy)
def test_frequencies_sum_to_twice_triples(rows):
    kg = _kg_from(rows)
    assert int(kg.node_frequency.sum()) == 2 * kg.num_triples
    covered = sorted((s, r, o) for s in range(kg.num_entities) for r, o in zip(*kg.out_edges(s)))
    assert covered == sorted(map(tuple, kg.triples.tolist()))


@settings(max_examples=60, deadline=None)
@given(triples_strategy)
def test_surprisal_monotone_in_frequency(rows):
    kg = _kg_from(rows)
    s = kg.surprisal_array()
    f = kg.node_frequency
    assert np.all((s > 0) | (f == 2 * kg.num_triples)) and np.all(s <= 1.0 + 1e-12)
    order = np.argsort(f)
    assert np.all(np.diff(s[order]) <= 1e-12)


@settings(max_examples=40, deadline=None)
@given(triples_strategy)
def test_cache_round_trip(rows):
    kg = _kg_from(rows)
    back = KnowledgeGraph.from_bytes(kg.to_bytes())
    assert back == kg
    for e in kg.entities:
        assert neighbors(back, e) == neighbors(kg, e)


def test_cache_rejects_foreign_header():
    with pytest.raises(GraphFormatError, match="PKGX-KG"):
        KnowledgeGraph.from_bytes(b"PKGX-KG v0\n{}")
