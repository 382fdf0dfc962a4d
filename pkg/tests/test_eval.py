import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaitfuse import eval as ev
from gaitfuse.errors import FormatError


def random_instance(rng, n_probe=None, n_gallery=None, n_labels=None, int_dist=False):
    n_probe = n_probe or int(rng.integers(1, 21))
    n_gallery = n_gallery or int(rng.integers(5, 51))
    n_labels = n_labels or int(rng.integers(2, 8))
    dist = rng.integers(0, 6, (n_probe, n_gallery)).astype(float) if int_dist else rng.random((n_probe, n_gallery))
    return dist, rng.integers(0, n_labels, n_probe), rng.integers(0, n_labels, n_gallery)


def quiet(fn, *a, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fn(*a, **kw)


def test_pairwise_distance_examples(rng):
    assert ev.pairwise_distances([[0.0]], [[3.0]])[0, 0] == 3.0
    x = rng.standard_normal((4, 5))
    d = ev.pairwise_distances(x, x)
    assert np.all(np.diag(d) == 0) and np.array_equal(d, d.T)
    y = rng.standard_normal((6, 5))
    assert np.max(np.abs(ev.pairwise_distances(x, y) - ev.naive_pairwise_distances(x, y))) <= 1e-10
    with pytest.raises(ValueError):
        ev.pairwise_distances(x, rng.standard_normal((2, 4)))


def test_hand_ranked_case():
    # probe 0 (label 1): order g2 (0.1), g0 (0.5), g1 (0.9); labels g = [1, 0, 1]
    # probe 1 (label 0): order g0 (0.2), g1 (0.3), g2 (0.3); tie broken by index
    dist = np.array([[0.5, 0.9, 0.1], [0.2, 0.3, 0.3]])
    pl, gl = [1, 0], [1, 0, 1]
    assert ev.rank_k(dist, pl, gl, 1) == 0.5
    assert ev.rank_k(dist, pl, gl, 2) == 1.0
    assert ev.mean_ap(dist, pl, gl) == pytest.approx((1.0 + 0.5) / 2)
    assert ev.mean_inp(dist, pl, gl) == pytest.approx((2 / 2 + 1 / 2) / 2)


def test_duplicate_with_other_id_counts():
    dist = np.array([[0.0, 1.0]])
    assert ev.rank_k(dist, [3], [3, 4], 1, ["p"], ["q", "r"]) == 1.0


def test_self_match_excluded():
    dist = np.array([[0.0, 1.0, 2.0]])
    assert ev.rank_k(dist, [3], [3, 4, 3], 1, ["a"], ["a", "b", "c"]) == 0.0
    assert ev.rank_k(dist, [3], [3, 4, 3], 2, ["a"], ["a", "b", "c"]) == 1.0
    with pytest.raises(ValueError, match="empty"):
        ev.rank_k(np.zeros((1, 1)), [0], [0], 1, ["a"], ["a"])


def test_k_equal_gallery_size():
    rng = np.random.default_rng(3)
    dist = rng.random((5, 6))
    gl = [0, 1, 2, 0, 1, 2]
    assert ev.rank_k(dist, [0, 1, 2, 2, 0], gl, 6) == 1.0
    with pytest.raises(ValueError):
        ev.rank_k(dist, [0] * 5, gl, 7)


def test_perfect_and_last_single_match():
    assert ev.mean_ap(np.array([[0.1, 0.2, 0.9]]), [1], [1, 1, 0]) == 1.0
    assert ev.mean_inp(np.array([[0.1, 0.2, 0.9]]), [1], [1, 1, 0]) == 1.0
    assert ev.mean_ap(np.array([[0.1, 0.2]]), [1], [0, 1]) == 0.5
    assert ev.mean_inp(np.array([[0.1, 0.2]]), [1], [0, 1]) == 0.5


def test_probe_without_match_is_excluded_with_warning():
    dist = np.array([[0.1, 0.2], [0.3, 0.1]])
    with pytest.warns(RuntimeWarning, match="1 probe"):
        value, skipped = ev.mean_ap(dist, [5, 1], [0, 1], return_skipped=True)
    assert skipped == 1 and value == 1.0
    assert ev.rank_k(dist, [5, 1], [0, 1], 1) == 0.5


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_metrics_match_naive_reference(seed, ties):
    rng = np.random.default_rng(seed)
    dist, pl, gl = random_instance(rng, int_dist=ties)
    ref = quiet(ev.naive_metrics, dist, pl, gl)
    assert ev.rank_k(dist, pl, gl, 1) == ref["rank1"]
    assert ev.rank_k(dist, pl, gl, 5) == ref["rank5"]
    if np.isnan(ref["mAP"]):
        with pytest.raises(ValueError):
            quiet(ev.mean_ap, dist, pl, gl)
        return
    assert abs(quiet(ev.mean_ap, dist, pl, gl) - ref["mAP"]) <= 1e-10
    assert abs(quiet(ev.mean_inp, dist, pl, gl) - ref["mINP"]) <= 1e-10


@given(st.integers(0, 2**31 - 1))
def test_metric_ranges_and_monotone_k(seed):
    rng = np.random.default_rng(seed)
    dist, pl, gl = random_instance(rng)
    ranks = [ev.rank_k(dist, pl, gl, k) for k in range(1, dist.shape[1] + 1)]
    assert all(0 <= r <= 1 for r in ranks)
    assert all(b >= a for a, b in zip(ranks, ranks[1:]))
    if any(l in gl for l in pl):
        assert 0 <= quiet(ev.mean_ap, dist, pl, gl) <= 1
        assert 0 <= quiet(ev.mean_inp, dist, pl, gl) <= 1


@given(st.integers(0, 2**31 - 1))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    dist, pl, gl = random_instance(rng)
    moved = dist ** 2 + 1
    for k in (1, 3):
        assert ev.rank_k(dist, pl, gl, k) == ev.rank_k(moved, pl, gl, k)
    if any(l in gl for l in pl):
        assert quiet(ev.mean_ap, dist, pl, gl) == quiet(ev.mean_ap, moved, pl, gl)
        assert quiet(ev.mean_inp, dist, pl, gl) == quiet(ev.mean_inp, moved, pl, gl)


def records(rng, n_ids=3, per_id=3, dim=4):
    out = []
    for i in range(n_ids):
        centre = rng.standard_normal(dim) * 10
        for s in range(per_id):
            out.append(ev.EmbeddingRecord(f"id{i}_s{s}", i, centre + rng.standard_normal(dim) * 0.01))
    return out


def test_gallery_probe_split(rng):
    gallery, probes = ev.gallery_probe_split(records(rng))
    assert [r.id for r in gallery] == ["id0_s0", "id1_s0", "id2_s0"]
    assert len(probes) == 6


def test_evaluate_report(rng):
    rep = ev.evaluate(records(rng))
    assert rep["rank1"] == rep["rank5"] == rep["mAP"] == rep["mINP"] == 1.0
    assert rep["probes"] == 6 and rep["gallery"] == 3 and rep["probes_without_match"] == 0
    assert "hardest" in rep["mINP_definition"]
    with pytest.raises(ValueError, match="no probes"):
        ev.evaluate(records(rng, per_id=1))


def test_embedding_file_round_trip(tmp_path, rng):
    recs = records(rng)
    path = tmp_path / "e.jsonl"
    ev.write_embeddings(recs, path)
    back = ev.read_embeddings(path)
    assert [r.id for r in back] == [r.id for r in recs]
    for a, b in zip(back, recs):
        np.testing.assert_array_equal(a.embedding, b.embedding)
    ev.write_report(ev.evaluate(back), tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["rank1"] == 1.0


@pytest.mark.parametrize("lines,match", [
    (['{"id": "a", "label": 0, "embedding": [1, 2]}', '{"id": "b", "label": 0, "embedding": [1]}'],
     ":2: dimension 1 differs from 2"),
    (['{"id": "a", "label": 0, "embedding": [NaN]}'], ":1: embedding must be a finite vector"),
    (['{"id": "a", "label": 0}'], ":1: bad embedding record"),
    (["not json"], ":1: bad embedding record"),
])
def test_embedding_file_errors(tmp_path, lines, match):
    path = tmp_path / "e.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match=match):
        ev.read_embeddings(path)
