import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waterflow import ndgrad as G
from waterflow.perception import (DENOM_EPS, FeatureExtractor, LossError, LossWeights,
                                  bilateral_l1, contrastive_loss, style_loss, total_loss)

FX = FeatureExtractor(np.float64)


def T(a):
    return G.Tensor(np.asarray(a, dtype=np.float64))


def feats(img):
    return FX(T(img[None]))


def direct_features(img):
    """Stage outputs from explicit loops over output pixels."""
    x = img
    out = []
    for w in FX.weights:
        w = w.data
        c_out, c_in, k, _ = w.shape
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p)), mode="edge")
        h, wd = x.shape[1:]
        y = np.zeros((c_out, h, wd))
        for i in range(h):
            for j in range(wd):
                patch = xp[:, i:i + k, j:j + k]
                y[:, i, j] = np.tensordot(w, patch, axes=([1, 2, 3], [0, 1, 2]))
        y = np.maximum(y, 0.0)
        if h % 2 == 0 and wd % 2 == 0:
            y = y.reshape(c_out, h // 2, 2, wd // 2, 2).mean(axis=(2, 4))
        out.append(y)
        x = y
    return out


def test_extractor_matches_direct_loops():
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    for a, b in zip(feats(img), direct_features(img)):
        np.testing.assert_allclose(a.data[0], b, rtol=1e-12, atol=1e-14)


def test_extractor_is_deterministic_and_frozen():
    other = FeatureExtractor(np.float64)
    assert other.digest() == FX.digest()
    assert [c.shape[0] for c in FX.weights] == [8, 16, 32, 32, 32]
    img = np.random.default_rng(1).uniform(size=(3, 16, 16))
    for a, b in zip(feats(img), other(T(img[None]))):
        np.testing.assert_array_equal(a.data, b.data)


def test_extractor_passes_gradients_to_the_image():
    x = G.Tensor(np.random.default_rng(2).uniform(size=(1, 3, 16, 16)), requires_grad=True)
    G.backward(G.sum(FX(x)[-1]))
    assert np.abs(x.grad).sum() > 0


class TestContrastive:
    def test_zero_at_positive_sample(self):
        rng = np.random.default_rng(3)
        ref, neg = rng.uniform(size=(2, 3, 16, 16))
        assert contrastive_loss(feats(ref), feats(ref), feats(neg), LossWeights().rho).item() == 0.0

    def test_matches_stage_by_stage_oracle(self):
        rng = np.random.default_rng(4)
        enh, ref, neg = rng.uniform(size=(3, 3, 16, 16))
        rho = LossWeights().rho
        expected = 0.0
        for r, fe, fr, fn in zip(rho, direct_features(enh), direct_features(ref), direct_features(neg)):
            expected += r * np.mean(np.abs(fr - fe)) / (np.mean(np.abs(fn - fe)) + DENOM_EPS)
        got = contrastive_loss(feats(enh), feats(ref), feats(neg), rho).item()
        assert got == pytest.approx(expected, rel=1e-10)

    def test_enhanced_equal_to_negative_is_finite(self):
        rng = np.random.default_rng(5)
        ref, neg = rng.uniform(size=(2, 3, 16, 16))
        val = contrastive_loss(feats(neg), feats(ref), feats(neg), LossWeights().rho).item()
        assert np.isfinite(val) and val > 1e3

    def test_rho_length_checked(self):
        f = feats(np.zeros((3, 16, 16)))
        with pytest.raises(LossError):
            contrastive_loss(f, f, f, (1.0, 1.0))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_non_negative(self, seed):
        enh, ref, neg = np.random.default_rng(seed).uniform(size=(3, 3, 16, 16))
        assert contrastive_loss(feats(enh), feats(ref), feats(neg), LossWeights().rho).item() >= 0.0


class TestStyle:
    def test_zero_at_reference(self):
        ref = np.random.default_rng(6).uniform(size=(3, 16, 16))
        assert style_loss(feats(ref), feats(ref)).item() == 0.0

    def test_matches_stage_by_stage_oracle(self):
        rng = np.random.default_rng(7)
        enh, ref = rng.uniform(size=(2, 3, 16, 16))
        expected = 0.0
        fe_all, fr_all = direct_features(enh), direct_features(ref)
        for fe, fr in zip(fe_all, fr_all):
            c = fe.shape[0]
            dm = fe.mean(axis=(1, 2)) - fr.mean(axis=(1, 2))
            dv = fe.var(axis=(1, 2)) - fr.var(axis=(1, 2))
            expected += (np.linalg.norm(dm) + np.linalg.norm(dv)) / np.sqrt(c)
        expected /= len(fe_all)
        assert style_loss(feats(enh), feats(ref)).item() == pytest.approx(expected, rel=1e-10)

    def test_depends_only_on_feature_statistics(self):
        # channel-wise constant images give spatially constant features, so
        # any pixel permutation leaves every statistic and the loss unchanged
        rng = np.random.default_rng(8)
        ref = rng.uniform(size=(3, 16, 16))
        a = np.ones((3, 16, 16)) * rng.uniform(size=(3, 1, 1))
        perm = rng.permutation(256)
        b = a.reshape(3, -1)[:, perm].reshape(3, 16, 16)
        assert style_loss(feats(a), feats(ref)).item() == style_loss(feats(b), feats(ref)).item()


class TestBilateral:
    def test_perfect_flow_is_zero(self):
        rng = np.random.default_rng(9)
        ref, under = rng.uniform(size=(2, 3, 8, 8))
        assert bilateral_l1(T(ref), T(ref), T(under), T(under)).item() == 0.0

    def test_identity_flow_doubles_the_gap(self):
        rng = np.random.default_rng(10)
        ref, under = rng.uniform(size=(2, 3, 8, 8))
        got = bilateral_l1(T(under), T(ref), T(ref), T(under)).item()
        assert got == pytest.approx(2 * np.mean(np.abs(under - ref)), rel=1e-14)

    def test_matches_elementwise_sum(self):
        rng = np.random.default_rng(11)
        e, r, d, u = rng.uniform(size=(4, 3, 8, 8))
        expected = sum(abs(a - b) for a, b in zip(e.ravel(), r.ravel())) / e.size
        expected += sum(abs(a - b) for a, b in zip(d.ravel(), u.ravel())) / d.size
        assert bilateral_l1(T(e), T(r), T(d), T(u)).item() == pytest.approx(expected, rel=1e-12)


class TestTotal:
    def test_zero_parts(self):
        parts = {k: G.Tensor(0.0) for k in ("contrastive", "style", "detection", "l1")}
        assert total_loss(parts, LossWeights()).item() == 0.0

    def test_unit_parts_default_weights(self):
        parts = {k: G.Tensor(1.0) for k in ("contrastive", "style", "detection", "l1")}
        assert total_loss(parts, LossWeights()).item() == pytest.approx(102.1, abs=1e-12)

    def test_zero_detection_weight_drops_the_term(self):
        parts = {"contrastive": G.Tensor(0.5), "style": G.Tensor(0.01), "detection": G.Tensor(7.0),
                 "l1": G.Tensor(0.2)}
        w = LossWeights(detection=0.0)
        assert total_loss(parts, w).item() == pytest.approx(0.5 + 1.0 + 0.2, abs=1e-12)

    def test_non_finite_part_named(self):
        parts = {"contrastive": G.Tensor(1.0), "style": G.Tensor(float("nan"))}
        with pytest.raises(LossError, match="style"):
            total_loss(parts, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(LossError):
            LossWeights(style=-1.0)
