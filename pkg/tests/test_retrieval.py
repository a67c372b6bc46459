import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from darn import retrieval
from darn.errors import BuildError, ContractError, DimensionError
from darn.features import FeatureVector
from darn.retrieval import (
    Gallery, batch_query, build, load_gallery, query, save_gallery, write_results_csv,
)
from darn.schema import Domain


def _brute(ids, matrix, q, k):
    """Full sort on (distance, id) with Python tuples."""
    rows = sorted((float(np.sqrt(np.sum((m - q) ** 2))), i) for i, m in zip(ids, matrix))
    return [(i, d) for d, i in rows[:k]]


def test_build_shape():
    feats = [FeatureVector(f"id{i}", Domain.ONLINE, np.arange(4.0) + i) for i in range(3)]
    g = build(feats)
    assert len(g) == 3 and g.dim == 4


def test_duplicate_id():
    with pytest.raises(BuildError, match="'x'"):
        Gallery(["x", "y", "x"], np.zeros((3, 2)))


def test_dim_mismatch():
    feats = [FeatureVector("a", Domain.ONLINE, np.zeros(3)), FeatureVector("b", Domain.ONLINE, np.zeros(4))]
    with pytest.raises(BuildError, match="'b'"):
        build(feats)
    g = Gallery(["a"], np.zeros((1, 3)))
    with pytest.raises(DimensionError):
        query(g, np.zeros(4), 1)


def test_empty_gallery():
    g = build([])
    assert len(g) == 0
    assert query(g, np.zeros(0), 5).entries == []


def test_reference_example():
    g = Gallery(["id1", "id2", "id3"], np.array([[0.0, 0], [1, 0], [3, 0]]))
    r = query(g, [0.9, 0.0], 2)
    assert r.ids == ["id2", "id1"]
    np.testing.assert_allclose(r.distances, [0.1, 0.9], atol=1e-15)
    r = query(g, [3.0, 0.0], 1)
    assert r.entries == [("id3", 0.0)]


def test_ties_break_by_id():
    g = Gallery(["c", "a", "b"], np.array([[1.0, 0], [-1, 0], [0, 1]]))
    assert query(g, [0.0, 0.0], 3).ids == ["a", "b", "c"]


def test_k_bounds():
    g = Gallery(["a", "b"], np.eye(2))
    assert len(query(g, [0, 0], 10).entries) == 2
    with pytest.raises(ContractError):
        query(g, [0, 0], 0)


@pytest.mark.parametrize("seed", [0, 1])
def test_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    # coarse grid values so exact distance ties actually occur
    m = rng.integers(-3, 4, size=(1000, 3)).astype(float)
    ids = [f"g{i:04d}" for i in rng.permutation(1000)]
    g = Gallery(ids, m)
    for q in rng.integers(-3, 4, size=(50, 3)).astype(float):
        got = query(g, q, 1000)
        ref = _brute(ids, m, q, 1000)
        assert got.ids == [i for i, _ in ref]
        np.testing.assert_allclose(got.distances, [d for _, d in ref], rtol=0, atol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(1, 15))
def test_row_permutation_and_prefix(seed, k):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 3, size=(15, 2)).astype(float)
    ids = [f"x{i}" for i in range(15)]
    q = rng.normal(size=2)
    base = query(Gallery(ids, m), q, k)
    perm = rng.permutation(15)
    assert query(Gallery([ids[i] for i in perm], m[perm]), q, k).entries == base.entries
    assert query(Gallery(ids, m), q, min(k + 1, 15)).entries[:k] == base.entries


def test_batch_query_equivalence(rng):
    g = Gallery([str(i) for i in range(40)], rng.normal(size=(40, 5)))
    qs = rng.normal(size=(6, 5))
    single = [query(g, q, 4, f"q{i}") for i, q in enumerate(qs)]
    assert batch_query(g, qs[:1], 4, ["q0"])[0].entries == single[0].entries
    perm = [3, 0, 5, 1, 4, 2]
    permuted = batch_query(g, qs[perm], 4, [f"q{i}" for i in perm], workers=3)
    assert [r.entries for r in permuted] == [single[i].entries for i in perm]
    with pytest.raises(ContractError):
        batch_query(g, qs, 4, ["only-one"])


def test_timing_log(rng, caplog, monkeypatch):
    monkeypatch.setattr(retrieval, "TIMING_EVERY", 5)
    g = Gallery(["a", "b"], np.eye(2))
    with caplog.at_level(logging.INFO, logger="darn.retrieval"):
        batch_query(g, rng.normal(size=(10, 2)), 1)
    assert sum("queries in" in r.message for r in caplog.records) == 2


def test_gallery_is_immutable(rng):
    g = Gallery(["a", "b"], rng.normal(size=(2, 2)))
    with pytest.raises(ValueError):
        g.matrix[0, 0] = 1.0


def test_persistence_and_csv(rng, tmp_path):
    g = Gallery(["a", "b", "c"], rng.normal(size=(3, 4)), {"a": [0, -1], "b": [1, 2], "c": [2, 0]})
    save_gallery(tmp_path / "gal", g)
    back = load_gallery(tmp_path / "gal")
    assert back.ids == g.ids and back.matrix.tobytes() == g.matrix.tobytes()
    assert {k: v.tolist() for k, v in back.attributes.items()} == {"a": [0, -1], "b": [1, 2], "c": [2, 0]}
    write_results_csv(tmp_path / "r.csv", [query(g, g.matrix[1], 2, "q")])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "query_id,rank,gallery_id,distance"
    assert lines[1] == "q,1,b,0.0"
