import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from stconsist import losses
from stconsist.errors import DimensionError
from stconsist.losses import (MIX_WEIGHTS, combined_consistency, consistency_l1, edge_map,
                              pseudo_label_ce, supervised_ce, variant_weights, weight_label_prior,
                              weight_pixel_prior, weight_uniform)
from stconsist.tensor import tensor

from conftest import check_grad


def _loop_l1(warped, predicted, weights, valid):
    h, w, c = warped.shape
    s = 0.0
    for y in range(h):
        for x in range(w):
            if not valid[y, x]:
                continue
            for k in range(c):
                s += weights[y, x, k] * abs(warped[y, x, k] - predicted[y, x, k])
    return s


def _loop_ce(logits, labels, valid):
    h, w, c = logits.shape
    s, n = 0.0, 0
    for y in range(h):
        for x in range(w):
            if not valid[y, x]:
                continue
            row = [float(v) for v in logits[y, x]]
            m = max(row)
            lse = m + math.log(sum(math.exp(v - m) for v in row))
            s += lse - row[labels[y, x]]
            n += 1
    return s / n if n else 0.0


def _instance(seed, h=4, w=5, c=3):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(h, w, c)), rng.normal(size=(h, w, c)), rng.uniform(size=(h, w, 3)),
            rng.uniform(size=(h, w)) > 0.2, rng)


class TestWeights:
    def test_uniform_all_valid(self):
        np.testing.assert_array_equal(weight_uniform(2, 2, 2, np.ones((2, 2), bool)), 1 / 8)

    def test_uniform_one_invalid(self):
        v = np.ones((2, 2), bool)
        v[0, 1] = False
        w = weight_uniform(2, 2, 2, v)
        assert (w[0, 1] == 0).all()
        np.testing.assert_allclose(w[v], 1 / 6)

    def test_uniform_all_invalid(self):
        assert not weight_uniform(3, 3, 2, np.zeros((3, 3), bool)).any()

    def test_label_prior_single_pixel(self):
        w = weight_label_prior(np.array([[[0.1, 2.0, -1.0]]]), np.ones((1, 1), bool))
        np.testing.assert_array_equal(w[0, 0], [0, 1, 0])

    def test_label_prior_two_pixels(self):
        logits = np.array([[[5.0, 0.0, 0.0], [0.0, 1.0, 3.0]]])
        w = weight_label_prior(logits, np.ones((1, 2), bool))
        expected = np.zeros((1, 2, 3))
        expected[0, 0, 0] = expected[0, 1, 2] = 0.5
        np.testing.assert_array_equal(w, expected)

    def test_label_prior_tie(self):
        w = weight_label_prior(np.array([[[1.0, 1.0]]]), np.ones((1, 1), bool))
        np.testing.assert_array_equal(w[0, 0], [1, 0])

    def test_label_prior_accepts_tensor(self):
        logits = np.random.default_rng(0).normal(size=(3, 3, 4))
        np.testing.assert_array_equal(weight_label_prior(tensor(logits), np.ones((3, 3), bool)),
                                      weight_label_prior(logits, np.ones((3, 3), bool)))

    def test_pixel_prior_constant_image_falls_back(self):
        v = np.random.default_rng(1).uniform(size=(5, 5)) > 0.3
        np.testing.assert_array_equal(weight_pixel_prior(np.full((5, 5, 3), 0.4), 3, v),
                                      weight_uniform(5, 5, 3, v))

    def test_pixel_prior_one_edge_pixel(self, monkeypatch):
        edges = np.zeros((4, 4), np.uint8)
        edges[2, 1] = 1
        monkeypatch.setattr(losses, "edge_map", lambda img, thr=0.1: edges)
        w = weight_pixel_prior(np.zeros((4, 4, 3)), 2, np.ones((4, 4), bool))
        np.testing.assert_array_equal(w[2, 1], [0.5, 0.5])
        assert w.sum() == 1.0

    def test_pixel_prior_invalid_edge_excluded(self, monkeypatch):
        edges = np.zeros((4, 4), np.uint8)
        edges[0, 0] = edges[3, 3] = 1
        monkeypatch.setattr(losses, "edge_map", lambda img, thr=0.1: edges)
        v = np.ones((4, 4), bool)
        v[0, 0] = False
        w = weight_pixel_prior(np.zeros((4, 4, 3)), 2, v)
        assert not w[0, 0].any()
        np.testing.assert_array_equal(w[3, 3], [0.5, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["uniform", "label", "pixel"]))
    def test_normalization(self, seed, variant):
        warped, pred, img, valid, _ = _instance(seed, 6, 7, 4)
        w = variant_weights(variant, pred, img, valid)
        assert (w >= 0).all()
        assert not w[~valid].any()
        if valid.any():
            assert abs(w[valid].sum() - 1.0) <= 1e-5


class TestEdgeMap:
    def test_constant(self):
        assert not edge_map(np.full((6, 6, 3), 0.7)).any()

    def test_vertical_step(self):
        img = np.zeros((6, 8, 3))
        img[:, 4:] = 1.0
        # Sobel responds on columns 3 and 4; dilation widens the band to 2..5
        expected = np.zeros((6, 8), np.uint8)
        expected[:, 2:6] = 1
        np.testing.assert_array_equal(edge_map(img), expected)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (7, 9, 3), elements=st.floats(0, 1)))
    def test_matches_scipy_and_binary(self, img):
        out = edge_map(img)
        assert set(np.unique(out)) <= {0, 1}
        gray = img.mean(axis=-1)
        # scipy's sobel correlates with a flipped kernel; magnitude is unaffected
        mag = np.hypot(ndimage.sobel(gray, axis=1, mode="nearest"),
                       ndimage.sobel(gray, axis=0, mode="nearest"))
        if mag.max() <= 1e-12:
            assert not out.any()
            return
        raw = mag >= 0.1 * mag.max()
        # skip cases sitting on the threshold, where rounding decides
        near = np.abs(mag - 0.1 * mag.max()) < 1e-9
        expected = ndimage.binary_dilation(raw, np.ones((3, 3), bool))
        if not near.any():
            np.testing.assert_array_equal(out.astype(bool), expected)


class TestConsistencyL1:
    def test_equal_is_zero(self):
        x = np.random.default_rng(0).normal(size=(3, 3, 2))
        v = np.ones((3, 3), bool)
        assert consistency_l1(x, x, weight_uniform(3, 3, 2, v), v).item() == 0.0

    def test_single_pixel(self):
        v = np.ones((1, 1), bool)
        out = consistency_l1(np.array([[[3.0]]]), np.array([[[1.0]]]), np.ones((1, 1, 1)), v)
        assert out.item() == 2.0

    @pytest.mark.parametrize("seed", range(100))
    def test_loop_oracle(self, f64, seed):
        warped, pred, img, valid, rng = _instance(seed)
        for variant in ("uniform", "label", "pixel"):
            w = variant_weights(variant, pred, img, valid)
            got = consistency_l1(warped, pred, w, valid).item()
            assert abs(got - _loop_l1(warped, pred, w, valid)) <= 1e-6

    def test_uniform_is_masked_mean(self, f64):
        warped, pred, _, valid, _ = _instance(3, 4, 4, 3)
        got = consistency_l1(warped, pred, weight_uniform(4, 4, 3, valid), valid).item()
        assert abs(got - np.abs(warped - pred)[valid].mean()) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            consistency_l1(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), np.zeros((2, 2, 2)),
                           np.ones((2, 2), bool))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_scale_covariance(self, seed, a):
        warped, pred, img, valid, _ = _instance(seed)
        w = variant_weights("label", pred, img, valid)
        from stconsist.tensor import precision
        with precision(64):
            base = consistency_l1(warped, pred, w, valid).item()
            scaled = consistency_l1(a * warped, a * pred, w, valid).item()
        assert abs(scaled - a * base) <= 1e-9 * max(1.0, abs(a * base))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        warped, pred, img, valid, _ = _instance(seed)
        assert combined_consistency(warped, pred, img, valid).item() >= 0

    def test_symmetric_direction(self, f64):
        # the backward constraint is the same call with the roles swapped
        a, b, img, valid, _ = _instance(11)
        w = weight_uniform(*a.shape, valid)
        assert consistency_l1(a, b, w, valid).item() == pytest.approx(
            consistency_l1(b, a, w, valid).item(), abs=1e-12)


class TestCombined:
    def test_mix_sums_to_one(self):
        assert sum(MIX_WEIGHTS.values()) == 1.0
        assert MIX_WEIGHTS == {"uniform": 0.2, "label": 0.4, "pixel": 0.4}

    def test_equal_is_zero(self):
        _, pred, img, valid, _ = _instance(0)
        assert combined_consistency(pred, pred, img, valid).item() == 0.0

    @pytest.mark.parametrize("seed", range(100))
    def test_recomposition(self, f64, seed):
        warped, pred, img, valid, _ = _instance(seed)
        parts = {v: consistency_l1(warped, pred, variant_weights(v, pred, img, valid), valid).item()
                 for v in ("uniform", "label", "pixel")}
        expected = 0.2 * parts["uniform"] + 0.4 * parts["label"] + 0.4 * parts["pixel"]
        assert abs(combined_consistency(warped, pred, img, valid).item() - expected) <= 1e-6


class TestCrossEntropy:
    def test_uniform_two_class(self):
        v = np.ones((2, 3), bool)
        for label in (0, 1):
            out = pseudo_label_ce(np.zeros((2, 3, 2)), np.full((2, 3), label), v).item()
            assert out == pytest.approx(math.log(2), abs=1e-6)

    def test_saturated(self):
        logits = np.zeros((2, 2, 3))
        logits[..., 1] = 10.0
        assert pseudo_label_ce(logits, np.ones((2, 2), int), np.ones((2, 2), bool)).item() < 1e-4
        assert supervised_ce(logits, np.ones((2, 2), int)).item() < 1e-4

    def test_uniform_c_classes(self):
        assert supervised_ce(np.zeros((3, 3, 5)), np.zeros((3, 3), int)).item() == pytest.approx(
            math.log(5), abs=1e-6)

    def test_all_invalid_zero(self):
        assert pseudo_label_ce(np.ones((2, 2, 3)), np.zeros((2, 2), int),
                               np.zeros((2, 2), bool)).item() == 0.0

    @pytest.mark.parametrize("seed", range(100))
    def test_loop_oracles(self, f64, seed):
        warped, pred, _, valid, rng = _instance(seed)
        pseudo = np.argmax(pred, axis=-1)
        assert abs(pseudo_label_ce(warped, pseudo, valid).item()
                   - _loop_ce(warped, pseudo, valid)) <= 1e-6
        labels = rng.integers(0, 3, size=valid.shape)
        assert abs(supervised_ce(pred, labels).item()
                   - _loop_ce(pred, labels, np.ones_like(valid))) <= 1e-6
        assert abs(supervised_ce(pred, labels, valid).item() - _loop_ce(pred, labels, valid)) <= 1e-6

    def test_batched_supervised(self, f64):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 4, 4, 5))
        labels = rng.integers(0, 5, size=(3, 4, 4))
        per = [_loop_ce(logits[i], labels[i], np.ones((4, 4), bool)) for i in range(3)]
        assert supervised_ce(logits, labels).item() == pytest.approx(np.mean(per), abs=1e-9)


class TestLossGradients:
    SEEDS = range(20)

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("variant", ["uniform", "label", "pixel"])
    def test_l1(self, f64, seed, variant):
        warped, pred, img, valid, _ = _instance(seed, 3, 4, 3)
        w = variant_weights(variant, pred, img, valid)
        assert check_grad(lambda a, b: consistency_l1(a, b, w, valid), [warped, pred]) <= 1e-3

    @pytest.mark.parametrize("seed", SEEDS)
    def test_combined(self, f64, seed):
        warped, pred, img, valid, _ = _instance(seed, 3, 4, 3)
        # perturbing pred must not flip its argmax, or the label prior changes under the probe
        pred[..., 0] += 5.0
        assert check_grad(lambda a, b: combined_consistency(a, b, img, valid), [warped, pred]) <= 1e-3

    @pytest.mark.parametrize("seed", SEEDS)
    def test_pseudo_ce(self, f64, seed):
        warped, pred, _, valid, _ = _instance(seed, 3, 4, 3)
        pseudo = np.argmax(pred, axis=-1)
        assert check_grad(lambda a: pseudo_label_ce(a, pseudo, valid), [warped]) <= 1e-3

    @pytest.mark.parametrize("seed", SEEDS)
    def test_supervised_ce(self, f64, seed):
        _, pred, _, valid, rng = _instance(seed, 3, 4, 3)
        labels = rng.integers(0, 3, size=valid.shape)
        assert check_grad(lambda a: supervised_ce(a, labels, valid), [pred]) <= 1e-3
