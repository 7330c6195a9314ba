import numpy as np
import pytest

from upl import autodiff as ad
from upl import kernels
from upl.data import PointCloud
from upl.encoder import PointEncoder, TokenSet, build_merged_tokens, build_tokens, standardize_points
from upl.gradcheck import finite_difference_check
from upl.rng import substream


def cloud_from(points, labels=None):
    points = np.asarray(points, dtype=np.float64)
    if labels is None:
        labels = np.zeros(len(points), dtype=np.int64)
    return PointCloud(points, labels, scene_id="t")


def random_cloud(n=20, seed=0, d=3):
    pts = np.random.default_rng(seed).normal(size=(n, d)) * 2.0
    return cloud_from(pts)


def encoder(seed=0, d_in=3, d_f=6, hidden=5, k=4):
    return PointEncoder(d_in, d_f, substream(seed, "init"), hidden=hidden, k_neighbors=k)


class TestEncodePoints:
    def test_output_shape(self):
        enc = encoder()
        for n in (1, 2, 9, 33):
            fmap = enc(random_cloud(n=n, seed=n))
            assert fmap.features.shape == (n, 6)

    def test_identical_points_identical_rows(self):
        enc = encoder()
        pts = np.tile(np.array([[0.4, -1.0, 2.0]]), (5, 1))
        fmap = enc(cloud_from(pts))
        assert np.ptp(fmap.features.data, axis=0).max() < 1e-12

    def test_permutation_equivariance(self):
        enc = encoder(seed=3)
        cloud = random_cloud(n=24, seed=5)
        base = enc(cloud).features.data
        perm = np.random.default_rng(6).permutation(24)
        permuted = enc(cloud_from(cloud.points[perm])).features.data
        assert np.abs(permuted - base[perm]).max() < 1e-9

    def test_differentiable_end_to_end(self):
        enc = encoder(seed=7, d_f=4, hidden=4, k=3)
        cloud = random_cloud(n=7, seed=8)
        w = np.random.default_rng(9).normal(size=(7, 4))
        params = {name: t for name, t in enc.parameters().items()}
        report = finite_difference_check(lambda: ad.tsum(enc(cloud).features * w), params)
        assert report.passed, str(report)

    def test_standardize_centers_and_scales(self):
        pts = np.random.default_rng(1).normal(size=(50, 3)) * 9 + 100
        out = standardize_points(pts)
        assert np.abs(out.mean(axis=0)).max() < 1e-12
        assert np.isclose(np.sqrt(np.mean(out[:, :3] ** 2)), 1.0)
        single = standardize_points(np.array([[5.0, 5.0, 5.0]]))
        assert np.array_equal(single, np.zeros((1, 3)))


class TestBuildTokens:
    def fmap(self, enc, cloud):
        return enc(cloud)

    def test_n_tok_equals_n_is_permutation_of_rows(self):
        enc = encoder(seed=1)
        cloud = random_cloud(n=10, seed=2)
        fmap = enc(cloud)
        tokens = build_tokens(fmap, cloud.coords, 10)
        assert tokens.tokens.shape == (6, 10)
        got = {tuple(col) for col in tokens.tokens.data.T}
        want = {tuple(row) for row in fmap.features.data}
        assert got == want

    def test_padding_with_zero_columns(self):
        enc = encoder(seed=2)
        cloud = random_cloud(n=4, seed=3)
        tokens = build_tokens(enc(cloud), cloud.coords, 7)
        assert tokens.tokens.shape == (6, 7)
        assert np.array_equal(tokens.tokens.data[:, 4:], np.zeros((6, 3)))
        assert np.abs(tokens.tokens.data[:, :4]).sum() > 0

    def test_single_token_is_fps_seed(self):
        enc = encoder(seed=4)
        cloud = random_cloud(n=12, seed=5)
        fmap = enc(cloud)
        tokens = build_tokens(fmap, cloud.coords, 1)
        seed_idx = kernels.farthest_point_sampling(cloud.coords, 1)[0]
        assert np.array_equal(tokens.tokens.data[:, 0], fmap.features.data[seed_idx])

    def test_deterministic(self):
        enc = encoder(seed=6)
        cloud = random_cloud(n=15, seed=7)
        a = build_tokens(enc(cloud), cloud.coords, 8).tokens.data
        b = build_tokens(enc(cloud), cloud.coords, 8).tokens.data
        assert np.array_equal(a, b)

    def test_invalid_n_tok(self):
        enc = encoder()
        cloud = random_cloud(n=5, seed=1)
        with pytest.raises(ValueError):
            build_tokens(enc(cloud), cloud.coords, 0)

    def test_merged_tokens_cover_union(self):
        enc = encoder(seed=8)
        clouds = [random_cloud(n=6, seed=s) for s in (10, 11)]
        fmaps = [enc(c) for c in clouds]
        merged = build_merged_tokens(fmaps, [c.coords for c in clouds], 12)
        assert isinstance(merged, TokenSet)
        got = {tuple(col) for col in merged.tokens.data.T}
        want = {tuple(row) for f in fmaps for row in f.features.data}
        assert got == want
