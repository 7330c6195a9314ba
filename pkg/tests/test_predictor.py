import numpy as np
import pytest

from upl.autodiff import Tensor
from upl.predictor import (
    PredictionOutput,
    mc_predict,
    prediction_from_logits,
    save_predictions,
    save_uncertainty_heatmap,
    similarity_logits,
    uncertainty_maps,
)
from upl.prototypes import PrototypeSet
from upl.refinement import FusionGate
from upl.rng import substream
from upl.variational import GaussianPrototype


def protos(rows, stage="fused2", valid=None):
    rows = np.asarray(rows, dtype=np.float64)
    if valid is None:
        valid = np.ones(rows.shape[0], dtype=bool)
    return PrototypeSet(Tensor(rows), stage, list(range(rows.shape[0])), np.asarray(valid))


class TestSimilarityLogits:
    def test_identical_vector_gets_max_logit(self):
        p = protos([[1.0, 0.0], [0.0, 1.0]])
        logits = similarity_logits(Tensor(np.array([[2.0, 0.0]])), p, temperature=0.1).data
        assert np.isclose(logits[0, 0], 10.0)
        assert logits[0, 0] > logits[0, 1]

    def test_orthogonal_gives_zero(self):
        p = protos([[1.0, 0.0]])
        logits = similarity_logits(Tensor(np.array([[0.0, 3.0]])), p, temperature=0.5).data
        assert np.isclose(logits[0, 0], 0.0)

    def test_feature_scale_invariance(self):
        p = protos(np.random.default_rng(0).normal(size=(3, 4)))
        f = np.random.default_rng(1).normal(size=(5, 4))
        a = similarity_logits(Tensor(f), p).data
        b = similarity_logits(Tensor(5.0 * f), p).data
        assert np.allclose(a, b, atol=1e-12)

    def test_zero_prototype_zero_logit(self):
        p = protos([[1.0, 0.0], [0.0, 0.0]], valid=[True, False])
        logits = similarity_logits(Tensor(np.ones((2, 2))), p).data
        assert np.array_equal(logits[:, 1], np.zeros(2))

    def test_temperature_must_be_positive(self):
        p = protos([[1.0, 0.0]])
        with pytest.raises(ValueError):
            similarity_logits(Tensor(np.ones((1, 2))), p, temperature=0.0)


def degenerate_prior(mu, sigma_value=1e-9):
    mu = np.asarray(mu, dtype=np.float64)
    return GaussianPrototype(Tensor(mu), Tensor(np.full(mu.shape, sigma_value)), "prior", np.ones(mu.shape[0], bool))


def zero_gate(d, granularity="vector"):
    gate = FusionGate(d, substream(0, "g"), granularity)
    gate.gate_proj.w.data = np.zeros_like(gate.gate_proj.w.data)
    gate.gate_proj.b.data = np.zeros_like(gate.gate_proj.b.data)
    return gate


class TestMcPredict:
    def test_single_sample_equals_softmax_of_logits(self):
        rng = np.random.default_rng(2)
        feats = Tensor(rng.normal(size=(6, 3)))
        p1 = protos(rng.normal(size=(2, 3)), stage="fused1")
        prior = degenerate_prior(rng.normal(size=(2, 3)))
        out = mc_predict(feats, prior, p1, zero_gate(3), T=1, rng=np.random.default_rng(3))
        assert out.per_sample_logits.shape == (1, 6, 2)
        e = np.exp(out.per_sample_logits[0] - out.per_sample_logits[0].max(axis=1, keepdims=True))
        assert np.allclose(out.probs, e / e.sum(axis=1, keepdims=True), atol=1e-12)

    def test_degenerate_prior_gives_zero_variance(self):
        rng = np.random.default_rng(4)
        feats = Tensor(rng.normal(size=(5, 3)))
        p1 = protos(rng.normal(size=(2, 3)), stage="fused1")
        prior = degenerate_prior(rng.normal(size=(2, 3)), sigma_value=1e-12)
        out = mc_predict(feats, prior, p1, zero_gate(3), T=6, rng=np.random.default_rng(5))
        assert out.variance_map.max() < 1e-18
        assert (out.fused_uncertainty >= 0).all() and (out.fused_uncertainty <= 1).all()

    def test_bit_stable_under_fixed_seed(self):
        rng = np.random.default_rng(6)
        feats = Tensor(rng.normal(size=(4, 3)))
        p1 = protos(rng.normal(size=(2, 3)), stage="fused1")
        prior = GaussianPrototype(Tensor(rng.normal(size=(2, 3))), Tensor(np.full((2, 3), 0.5)), "prior", np.ones(2, bool))
        a = mc_predict(feats, prior, p1, zero_gate(3), T=4, rng=np.random.default_rng(42))
        b = mc_predict(feats, prior, p1, zero_gate(3), T=4, rng=np.random.default_rng(42))
        assert np.array_equal(a.probs, b.probs)
        assert np.array_equal(a.per_sample_logits, b.per_sample_logits)

    def test_T_must_be_positive(self):
        p1 = protos(np.ones((1, 2)), stage="fused1")
        with pytest.raises(ValueError):
            mc_predict(Tensor(np.ones((1, 2))), degenerate_prior(np.ones((1, 2))), p1, zero_gate(2), T=0, rng=None)


class TestProbabilityAveraging:
    def test_opposite_onehots_average_to_half(self):
        # two samples with per-point probs (1,0) and (0,1) -> (0.5, 0.5)
        big = 800.0
        logits = np.array(
            [
                [[big, 0.0]],
                [[0.0, big]],
            ]
        )
        out = prediction_from_logits(logits)
        assert np.allclose(out.probs, [[0.5, 0.5]], atol=1e-12)

    def test_three_point_hand_oracle(self):
        # T=2 samples, 2 classes, 3 points: probability averaging, not logit averaging
        l1 = np.array([[np.log(9.0), 0.0], [0.0, 0.0], [0.0, np.log(4.0)]])
        l2 = np.array([[0.0, 0.0], [np.log(3.0), 0.0], [0.0, np.log(4.0)]])
        out = prediction_from_logits(np.stack([l1, l2]))
        p1 = np.array([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
        p2 = np.array([[0.5, 0.5], [0.75, 0.25], [0.2, 0.8]])
        assert np.allclose(out.probs, (p1 + p2) / 2, atol=1e-12)
        # logit averaging would disagree on point 0
        logit_avg = (l1 + l2) / 2
        e = np.exp(logit_avg)
        assert not np.allclose(out.probs, e / e.sum(axis=1, keepdims=True), atol=1e-3)

    def test_predicted_labels_argmax_of_mean(self):
        logits = np.log(np.array([[[0.6, 0.4]], [[0.1, 0.9]]]))
        out = prediction_from_logits(logits)
        assert out.predicted_labels.tolist() == [1]


class TestUncertaintyMaps:
    def test_identical_samples_zero_variance(self):
        l = np.random.default_rng(7).normal(size=(1, 5, 3))
        out = prediction_from_logits(np.repeat(l, 4, axis=0))
        assert np.array_equal(out.variance_map, np.zeros(5))

    def test_uniform_two_class_entropy_ln2(self):
        out = prediction_from_logits(np.zeros((1, 3, 2)))
        assert np.allclose(out.entropy_map, np.log(2.0))

    def test_entropy_bounds(self):
        rng = np.random.default_rng(8)
        out = prediction_from_logits(rng.normal(size=(5, 20, 4)) * 3)
        assert (out.entropy_map >= 0).all()
        assert (out.entropy_map <= np.log(4) + 1e-12).all()

    def test_hand_built_two_sample_two_class_three_point(self):
        p1 = np.array([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
        p2 = np.array([[0.5, 0.5], [0.75, 0.25], [0.2, 0.8]])
        out = prediction_from_logits(np.log(np.stack([p1, p2])))
        mean = (p1 + p2) / 2
        # across-sample variance, averaged over classes
        var = (((p1 - mean) ** 2 + (p2 - mean) ** 2) / 2).mean(axis=1)
        ent = -(mean * np.log(mean)).sum(axis=1)
        assert np.allclose(out.variance_map, var, atol=1e-12)
        assert np.allclose(out.entropy_map, ent, atol=1e-12)
        vmin, vmax = var.min(), var.max()
        emin, emax = (ent / np.log(2)).min(), (ent / np.log(2)).max()
        fused = 0.5 * (var - vmin) / (vmax - vmin) + 0.5 * ((ent / np.log(2)) - emin) / (emax - emin)
        assert np.allclose(out.fused_uncertainty, fused, atol=1e-12)

    def test_constant_maps_normalize_to_zero(self):
        out = prediction_from_logits(np.zeros((2, 4, 3)))
        assert np.array_equal(out.fused_uncertainty, np.zeros(4))

    def test_argmax_invariant_to_post_averaging_temperature(self):
        rng = np.random.default_rng(9)
        out = prediction_from_logits(rng.normal(size=(3, 30, 4)))
        for temp in (0.1, 2.0, 7.0):
            scaled = out.probs / temp
            assert np.array_equal(scaled.argmax(axis=1), out.predicted_labels)


class TestExports:
    def build(self):
        logits = np.random.default_rng(10).normal(size=(2, 4, 3))
        return prediction_from_logits(logits)

    def test_prediction_csv_schema(self, tmp_path):
        out = self.build()
        path = tmp_path / "pred.csv"
        save_predictions(path, out, np.array([0, 1, 2, 0]))
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "point_index,pred_label,true_label,prob_0,prob_1,prob_2,variance,entropy,fused_uncertainty"
        assert len(lines) == 5
        row = lines[1].split(",")
        assert int(row[0]) == 0
        probs = np.array([float(v) for v in row[3:6]])
        assert np.allclose(probs, out.probs[0])

    def test_heatmap_csv_schema(self, tmp_path):
        out = self.build()
        coords = np.random.default_rng(11).normal(size=(4, 3))
        path = tmp_path / "heat.csv"
        save_uncertainty_heatmap(path, coords, out, np.array([0, 1, 2, 0]))
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "x,y,z,pred_label,true_label,fused_uncertainty"
        assert len(lines) == 5

    def test_length_mismatch_rejected(self, tmp_path):
        out = self.build()
        with pytest.raises(ValueError):
            save_predictions(tmp_path / "p.csv", out, np.zeros(7, dtype=int))
