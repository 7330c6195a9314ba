import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upl import kernels


def brute_force_fps(coords, k):
    """Independent greedy max-min oracle: plain loops, squared distances,
    lowest index on ties."""
    n = len(coords)
    k = min(k, n)
    centroid = coords.mean(axis=0)
    best_seed, best_dist = 0, -1.0
    for i in range(n):
        d = float(np.sum((coords[i] - centroid) ** 2))
        if d > best_dist:
            best_seed, best_dist = i, d
    chosen = [best_seed]
    while len(chosen) < k:
        best_i, best_d = -1, -1.0
        for i in range(n):
            if i in chosen:
                continue
            d = min(float(np.sum((coords[i] - coords[j]) ** 2)) for j in chosen)
            if d > best_d:
                best_i, best_d = i, d
        chosen.append(best_i)
    return np.asarray(chosen)


def test_single_point():
    assert kernels.farthest_point_sampling(np.zeros((1, 3)), 1).tolist() == [0]


def test_collinear_endpoints():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0]])
    assert set(kernels.farthest_point_sampling(pts, 2).tolist()) == {0, 2}


def test_k_equals_n_returns_all_once():
    pts = np.random.default_rng(3).normal(size=(17, 3))
    out = kernels.farthest_point_sampling(pts, 17)
    assert sorted(out.tolist()) == list(range(17))


def test_k_larger_than_n_returns_all():
    pts = np.random.default_rng(4).normal(size=(5, 3))
    assert len(kernels.farthest_point_sampling(pts, 50)) == 5


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        kernels.farthest_point_sampling(np.zeros((0, 3)), 1)
    with pytest.raises(ValueError):
        kernels.farthest_point_sampling(np.zeros((4, 3)), 0)


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 24), st.integers(1, 24))
def test_fps_matches_bruteforce_oracle(seed, n, k):
    coords = np.random.default_rng(seed).normal(size=(n, 3))
    got = kernels.farthest_point_sampling(coords, k)
    assert np.array_equal(got, brute_force_fps(coords, k))


def test_fps_deterministic():
    pts = np.random.default_rng(9).normal(size=(40, 3))
    a = kernels.farthest_point_sampling(pts, 12)
    b = kernels.farthest_point_sampling(pts, 12)
    assert np.array_equal(a, b)


def test_knn_against_argsort_oracle():
    rng = np.random.default_rng(21)
    for _ in range(30):
        n = int(rng.integers(1, 40))
        pts = rng.normal(size=(n, 3))
        k = int(rng.integers(1, n + 1))
        got = kernels.knn_indices(pts, k)
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        want = np.argsort(d2, axis=1, kind="stable")[:, :k]
        assert np.array_equal(got, want)


def test_knn_self_is_first():
    pts = np.random.default_rng(5).normal(size=(10, 3))
    idx = kernels.knn_indices(pts, 3)
    assert np.array_equal(idx[:, 0], np.arange(10))


def test_knn_k_clamped():
    pts = np.random.default_rng(6).normal(size=(4, 3))
    assert kernels.knn_indices(pts, 11).shape == (4, 4)


@pytest.mark.skipif(not kernels.COMPILED, reason="compiled kernels not built")
def test_backends_agree_bitwise():
    rng = np.random.default_rng(31)
    for _ in range(60):
        n = int(rng.integers(1, 64))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 50)
        k = int(rng.integers(1, n + 1))
        assert np.array_equal(
            kernels.farthest_point_sampling(pts, k, backend="reference"),
            kernels.farthest_point_sampling(pts, k, backend="compiled"),
        )
        assert np.array_equal(
            kernels.knn_indices(pts, min(k, 9), backend="reference"),
            kernels.knn_indices(pts, min(k, 9), backend="compiled"),
        )
