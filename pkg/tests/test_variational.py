import numpy as np
import pytest
from scipy.integrate import quad

from upl import autodiff as ad
from upl.autodiff import Tensor
from upl.gradcheck import finite_difference_check
from upl.prototypes import PrototypeSet
from upl.refinement import FusionGate
from upl.rng import substream
from upl.variational import GaussianHead, GaussianPrototype, fuse_beta, kl_divergence, reparameterize


def protos(rows, stage="fused1", valid=None):
    rows = np.asarray(rows, dtype=np.float64)
    if valid is None:
        valid = np.ones(rows.shape[0], dtype=bool)
    return PrototypeSet(Tensor(rows), stage, list(range(rows.shape[0])), np.asarray(valid))


def gaussian(mu, sigma, source="prior", valid=None):
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if valid is None:
        valid = np.ones(mu.shape[0], dtype=bool)
    return GaussianPrototype(Tensor(mu), Tensor(sigma), source, np.asarray(valid))


def kl_quadrature(mu_q, sig_q, mu_p, sig_p):
    """Numerical-integration oracle of KL(q || p) for 1-D Gaussians."""

    def integrand(x):
        q = np.exp(-((x - mu_q) ** 2) / (2 * sig_q**2)) / (sig_q * np.sqrt(2 * np.pi))
        logq = -((x - mu_q) ** 2) / (2 * sig_q**2) - np.log(sig_q * np.sqrt(2 * np.pi))
        logp = -((x - mu_p) ** 2) / (2 * sig_p**2) - np.log(sig_p * np.sqrt(2 * np.pi))
        return q * (logq - logp)

    lo = min(mu_q - 12 * sig_q, mu_p - 12 * sig_p)
    hi = max(mu_q + 12 * sig_q, mu_p + 12 * sig_p)
    value, _ = quad(integrand, lo, hi, limit=200)
    return value


class TestGaussianHead:
    def test_zero_weights_give_standard_normal(self):
        head = GaussianHead(3, substream(0, "h"), "prior")
        for layer in (head.l1, head.l2):
            layer.w.data = np.zeros_like(layer.w.data)
            layer.b.data = np.zeros_like(layer.b.data)
        g = head(protos(np.random.default_rng(1).normal(size=(2, 3))))
        assert np.array_equal(g.mu.data, np.zeros((2, 3)))
        assert np.array_equal(g.sigma.data, np.ones((2, 3)))

    def test_clamp_saturates_exactly(self):
        head = GaussianHead(2, substream(1, "h"), "prior")
        head.l1.w.data = np.zeros_like(head.l1.w.data)
        head.l1.b.data = np.zeros_like(head.l1.b.data)
        head.l2.w.data = np.zeros_like(head.l2.w.data)
        head.l2.b.data = np.array([0.0, 0.0, -99.0, 99.0])
        g = head(protos(np.zeros((1, 2))))
        assert g.sigma.data[0, 0] == np.exp(-5.0)
        assert g.sigma.data[0, 1] == np.exp(2.0)

    def test_stage_checks(self):
        head = GaussianHead(2, substream(2, "h"), "prior")
        with pytest.raises(ValueError):
            head(protos(np.zeros((1, 2)), stage="raw"))
        post = GaussianHead(2, substream(3, "h"), "posterior")
        with pytest.raises(ValueError):
            post(protos(np.zeros((1, 2)), stage="fused1"))

    def test_gradients_with_frozen_epsilon(self):
        head = GaussianHead(3, substream(4, "h"), "prior")
        x = np.random.default_rng(5).normal(size=(2, 3))
        eps = np.random.default_rng(6).standard_normal((2, 3))
        w = np.random.default_rng(7).normal(size=(2, 3))

        def fn():
            g = head(protos(x))
            z = reparameterize(g, epsilon=eps)
            return ad.tsum(ad.tanh(z.z) * w) + ad.tsum(g.sigma * 0.3)

        report = finite_difference_check(fn, head.parameters())
        assert report.passed, str(report)


class TestReparameterize:
    def test_zero_epsilon_returns_mu(self):
        g = gaussian([[1.0, -2.0]], [[0.5, 3.0]])
        z = reparameterize(g, epsilon=np.zeros((1, 2)))
        assert np.array_equal(z.z.data, g.mu.data)

    def test_reconstruction_identity_bitwise(self):
        rng = np.random.default_rng(8)
        g = gaussian(rng.normal(size=(3, 4)), np.abs(rng.normal(size=(3, 4))) + 0.1)
        z = reparameterize(g, rng=np.random.default_rng(9), sample_index=5)
        assert np.array_equal(z.z.data, g.mu.data + g.sigma.data * z.epsilon)
        assert z.sample_index == 5

    def test_sigma_floor_keeps_z_near_mu(self):
        g = gaussian([[0.0]], [[np.exp(-5.0)]])
        eps = np.array([[2.5]])
        z = reparameterize(g, epsilon=eps)
        assert abs(z.z.data[0, 0]) <= np.exp(-5.0) * 2.5 + 1e-15

    def test_monte_carlo_mean_close_to_mu(self):
        g = gaussian([[0.7, -1.2]], [[0.9, 0.4]])
        rng = np.random.default_rng(10)
        n = 100_000
        acc = np.zeros((1, 2))
        for _ in range(n):
            acc += reparameterize(g, rng=rng).z.data
        err = np.abs(acc / n - g.mu.data)
        bound = 4.0 * g.sigma.data / np.sqrt(n)
        assert (err <= bound).all()

    def test_shape_mismatch_rejected(self):
        g = gaussian([[0.0, 0.0]], [[1.0, 1.0]])
        with pytest.raises(ValueError):
            reparameterize(g, epsilon=np.zeros((2, 2)))
        with pytest.raises(ValueError):
            reparameterize(g)

    def test_no_gradient_to_epsilon(self):
        mu = Tensor(np.zeros((1, 2)), requires_grad=True)
        g = GaussianPrototype(mu, Tensor(np.ones((1, 2))), "prior", np.array([True]))
        z = reparameterize(g, epsilon=np.ones((1, 2)))
        ad.tsum(z.z).backward()
        assert np.array_equal(mu.grad, np.ones((1, 2)))


class TestKlDivergence:
    def test_equal_distributions_zero(self):
        rng = np.random.default_rng(11)
        mu, sig = rng.normal(size=(3, 4)), np.abs(rng.normal(size=(3, 4))) + 0.2
        q = gaussian(mu, sig, "posterior")
        p = gaussian(mu.copy(), sig.copy(), "prior")
        assert abs(kl_divergence(q, p).item()) <= 1e-9

    def test_unit_mean_shift_is_half(self):
        q = gaussian([[1.0]], [[1.0]], "posterior")
        p = gaussian([[0.0]], [[1.0]], "prior")
        assert np.isclose(kl_divergence(q, p).item(), 0.5, atol=1e-12)

    def test_sigma_two_vs_one(self):
        q = gaussian([[0.0]], [[2.0]], "posterior")
        p = gaussian([[0.0]], [[1.0]], "prior")
        want = np.log(1.0 / 2.0) + 4.0 / 2.0 - 0.5
        got = kl_divergence(q, p).item()
        assert np.isclose(got, want, atol=1e-12)
        assert np.isclose(got, 0.8069, atol=1e-4)

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            mu_q, mu_p = rng.normal(size=2) * 2
            sig_q, sig_p = np.exp(rng.uniform(-1.5, 1.5, size=2))
            got = kl_divergence(
                gaussian([[mu_q]], [[sig_q]], "posterior"), gaussian([[mu_p]], [[sig_p]], "prior")
            ).item()
            want = kl_quadrature(mu_q, sig_q, mu_p, sig_p)
            assert abs(got - want) <= 1e-4 * max(1.0, abs(want))

    def test_nonnegative_everywhere(self):
        rng = np.random.default_rng(13)
        for _ in range(10_000):
            mu = rng.normal(size=(1, 2))
            mu2 = rng.normal(size=(1, 2))
            s1 = np.exp(rng.uniform(-2, 2, size=(1, 2)))
            s2 = np.exp(rng.uniform(-2, 2, size=(1, 2)))
            kl = kl_divergence(gaussian(mu, s1, "posterior"), gaussian(mu2, s2, "prior")).item()
            assert kl >= -1e-12

    def test_invalid_classes_excluded(self):
        q = gaussian([[5.0], [0.0]], [[1.0], [1.0]], "posterior", valid=[True, False])
        p = gaussian([[0.0], [9.0]], [[1.0], [1.0]], "prior", valid=[True, True])
        assert np.isclose(kl_divergence(q, p).item(), 12.5)

    def test_source_checks(self):
        a = gaussian([[0.0]], [[1.0]], "prior")
        b = gaussian([[0.0]], [[1.0]], "posterior")
        with pytest.raises(ValueError):
            kl_divergence(a, b)
        with pytest.raises(ValueError):
            kl_divergence(b, gaussian([[0.0, 0.0]], [[1.0, 1.0]], "prior"))


class TestFuseBeta:
    def test_zero_gate_midpoint(self):
        gate = FusionGate(2, substream(14, "g"))
        gate.gate_proj.w.data = np.zeros_like(gate.gate_proj.w.data)
        gate.gate_proj.b.data = np.zeros_like(gate.gate_proj.b.data)
        p1 = protos([[2.0, 0.0]])
        z = reparameterize(gaussian([[4.0, 2.0]], [[1.0, 1.0]]), epsilon=np.zeros((1, 2)))
        out = fuse_beta(p1, z, gate)
        assert np.allclose(out.prototypes.data, [[3.0, 1.0]])
        assert out.stage == "fused2"

    def test_equal_inputs_identity(self):
        gate = FusionGate(3, substream(15, "g"))
        x = np.random.default_rng(16).normal(size=(2, 3))
        p1 = protos(x)
        z = reparameterize(gaussian(x.copy(), np.ones((2, 3))), epsilon=np.zeros((2, 3)))
        out = fuse_beta(p1, z, gate)
        assert np.allclose(out.prototypes.data, x, atol=1e-12)

    def test_output_between_inputs(self):
        gate = FusionGate(4, substream(17, "g"))
        rng = np.random.default_rng(18)
        for _ in range(20):
            a = rng.normal(size=(3, 4))
            g = gaussian(rng.normal(size=(3, 4)), np.abs(rng.normal(size=(3, 4))) + 0.1)
            z = reparameterize(g, rng=rng)
            out = fuse_beta(protos(a), z, gate).prototypes.data
            lo = np.minimum(a, z.z.data)
            hi = np.maximum(a, z.z.data)
            assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()

    def test_stage_and_shape_checks(self):
        gate = FusionGate(2, substream(19, "g"))
        z = reparameterize(gaussian([[0.0, 0.0]], [[1.0, 1.0]]), epsilon=np.zeros((1, 2)))
        with pytest.raises(ValueError):
            fuse_beta(protos([[0.0, 0.0]], stage="raw"), z, gate)
        with pytest.raises(ValueError):
            fuse_beta(protos([[0.0, 0.0], [1.0, 1.0]]), z, gate)

    def test_invalid_classes_stay_zero(self):
        gate = FusionGate(2, substream(20, "g"))
        p1 = protos([[1.0, 1.0], [0.0, 0.0]], valid=[True, False])
        z = reparameterize(gaussian(np.ones((2, 2)), np.ones((2, 2))), epsilon=np.ones((2, 2)))
        out = fuse_beta(p1, z, gate)
        assert np.array_equal(out.prototypes.data[1], [0.0, 0.0])


class TestSigmaInvariant:
    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            gaussian([[0.0]], [[0.0]])
        with pytest.raises(ValueError):
            gaussian([[0.0]], [[-1.0]])
