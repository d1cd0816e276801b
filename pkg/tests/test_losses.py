"""Loss functions and regression target encoding."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from noduleforge.nn import (
    HybridLossConfig,
    decode_regression_target,
    encode_regression_target,
    hybrid_loss,
    localization_loss_per_sample,
    patch_diagonal,
    smooth_l1,
    smooth_l1_grad,
    softmax_nll_loss,
    softmax_nll_per_sample,
)

from oracles import grad_close, numeric_grad


# ---------------------------------------------------------------------------
# classification loss


def test_nll_uniform_softmax_is_ln2():
    loss, _ = softmax_nll_loss(np.array([[1.3, 1.3]]), [1])
    assert abs(loss - math.log(2.0)) < 1e-12


def test_nll_saturated_margin():
    loss, _ = softmax_nll_loss(np.array([[20.0, 0.0]]), [0])
    assert loss < 1e-8


def test_nll_large_logits_are_stable():
    loss, grad = softmax_nll_loss(np.array([[1000.0, 900.0]]), [1])
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    assert abs(loss - 100.0) < 1e-9


def test_nll_gradient_matches_finite_differences():
    rng = np.random.default_rng(20)
    z = rng.normal(size=(8, 2))
    y = rng.integers(0, 2, size=8)
    _, grad = softmax_nll_loss(z, y)

    def loss(zz):
        return softmax_nll_loss(zz, y)[0]

    assert grad_close(grad, numeric_grad(loss, z), rtol=1e-5)


def test_nll_rejects_bad_labels():
    with pytest.raises(ValueError, match="labels"):
        softmax_nll_loss(np.zeros((2, 2)), [0, 2])


def test_nll_accepts_tensor5_logits():
    z = np.zeros((3, 2, 1, 1, 1))
    loss, grad = softmax_nll_loss(z, [0, 1, 0])
    assert grad.shape == z.shape
    assert abs(loss - math.log(2.0)) < 1e-12


# ---------------------------------------------------------------------------
# smooth L1


def test_smooth_l1_values():
    assert smooth_l1(0.0) == 0.0
    assert smooth_l1(0.5) == 0.125
    assert smooth_l1(2.0) == 1.5
    assert smooth_l1(-2.0) == 1.5


def test_smooth_l1_continuous_at_one():
    # both branches evaluate to 0.5 at |a| = 1, and both gradients to +-1
    assert smooth_l1(1.0) == 0.5
    assert 0.5 * 1.0 ** 2 == abs(1.0) - 0.5
    assert smooth_l1_grad(1.0) == 1.0
    assert smooth_l1_grad(-1.0) == -1.0
    assert smooth_l1_grad(0.999999) == pytest.approx(1.0, abs=1e-5)


def test_smooth_l1_grad_matches_finite_differences():
    for a in (-2.3, -0.7, 0.2, 0.9, 1.7):
        num = (smooth_l1(a + 1e-6) - smooth_l1(a - 1e-6)) / 2e-6
        assert abs(smooth_l1_grad(a) - num) < 1e-6


# ---------------------------------------------------------------------------
# target encoding


def test_encode_fixed_point():
    s = (60, 60, 24)
    t = encode_regression_target((10, 10, 10), patch_diagonal(s), (10, 10, 10), s)
    npt.assert_allclose(t.as_tuple(), 0.0, atol=1e-15)


def test_encode_direct_substitution():
    s = (60, 60, 24)
    t = encode_regression_target((25, 10, 10), patch_diagonal(s), (10, 10, 10), s)
    npt.assert_allclose(t.as_tuple(), (0.5, 0.0, 0.0, 0.0), atol=1e-15)


def test_encode_half_diagonal_log():
    s = (60, 60, 24)
    t = encode_regression_target((0, 0, 0), 0.5 * patch_diagonal(s), (0, 0, 0), s)
    assert abs(t.td - math.log(0.5)) < 1e-12
    assert abs(t.td + 0.693147) < 1e-6


def test_decode_fixed_point():
    centroid, diameter = decode_regression_target((0, 0, 0, 0), (10, 10, 10), (60, 60, 24))
    npt.assert_allclose(centroid, (10, 10, 10))
    assert diameter == pytest.approx(math.sqrt(60 ** 2 + 60 ** 2 + 24 ** 2), abs=1e-9)
    assert diameter == pytest.approx(88.1816, abs=1e-4)


def test_decode_half_patch_displacement():
    centroid, _ = decode_regression_target((1, 1, 1, 0), (5, 6, 7), (2, 2, 2))
    npt.assert_allclose(centroid, (6, 7, 8))


def test_encode_decode_round_trip():
    rng = np.random.default_rng(21)
    s = (60, 60, 24)
    worst = 0.0
    for _ in range(1000):
        g = rng.uniform(-40, 40, size=3)
        d = rng.uniform(0.5, 40.0)
        p = rng.uniform(-40, 40, size=3)
        t = encode_regression_target(g, d, p, s)
        centroid, diameter = decode_regression_target(t, p, s)
        err = max(
            abs(diameter - d) / d,
            max(abs(a - b) / max(1.0, abs(b)) for a, b in zip(centroid, g)),
        )
        worst = max(worst, err)
    assert worst < 1e-9


def test_encode_rejects_bad_inputs():
    with pytest.raises(ValueError, match="diameter"):
        encode_regression_target((0, 0, 0), 0.0, (0, 0, 0), (60, 60, 24))
    with pytest.raises(ValueError, match="patch size"):
        encode_regression_target((0, 0, 0), 5.0, (0, 0, 0), (60, 0, 24))


# ---------------------------------------------------------------------------
# hybrid loss


def test_hybrid_all_negative_reduces_to_cls_plus_decay():
    rng = np.random.default_rng(22)
    z = rng.normal(size=(4, 2))
    y = np.zeros(4, dtype=int)
    pred = rng.normal(size=(4, 4))
    target = rng.normal(size=(4, 4))
    cfg = HybridLossConfig(lam=0.5, beta=1e-4, n_reg=2)
    l2 = 3.7
    loss, _, grad_reg = hybrid_loss(z, y, pred, target, l2, cfg)
    cls_loss, _ = softmax_nll_loss(z, y)
    assert loss == pytest.approx(cls_loss + 1e-4 * l2, abs=1e-15)
    npt.assert_array_equal(grad_reg, 0.0)


def test_hybrid_perfect_regression_has_zero_loc_term():
    rng = np.random.default_rng(23)
    z = rng.normal(size=(2, 2))
    y = np.array([1, 1])
    pred = rng.normal(size=(2, 4))
    cfg = HybridLossConfig(lam=0.5, beta=0.0, n_reg=2)
    loss, _, grad_reg = hybrid_loss(z, y, pred, pred.copy(), 0.0, cfg)
    assert loss == pytest.approx(softmax_nll_loss(z, y)[0], abs=1e-15)
    npt.assert_array_equal(grad_reg, 0.0)


def test_hybrid_matches_term_by_term_resummation():
    rng = np.random.default_rng(24)
    z = rng.normal(size=(4, 2))
    y = np.array([1, 0, 1, 0])
    pred = rng.normal(size=(4, 4)) * 2
    target = rng.normal(size=(4, 4)) * 2
    l2 = float(rng.uniform(0, 10))
    cfg = HybridLossConfig(lam=0.5, beta=1e-4, n_reg=2)
    loss, _, _ = hybrid_loss(z, y, pred, target, l2, cfg)

    # independent scalar re-summation
    want = 0.0
    for i in range(4):
        p = math.exp(z[i, y[i]]) / (math.exp(z[i, 0]) + math.exp(z[i, 1]))
        want += -math.log(p) / 4
    loc = 0.0
    for i in range(4):
        if y[i] == 1:
            for j in range(4):
                loc += smooth_l1(pred[i, j] - target[i, j])
    want += 0.5 * loc / 2 + 1e-4 * l2
    assert loss == pytest.approx(want, abs=1e-12)


def test_hybrid_with_zero_weights_equals_nll():
    rng = np.random.default_rng(25)
    z = rng.normal(size=(6, 2))
    y = rng.integers(0, 2, size=6)
    pred = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 4))
    cfg = HybridLossConfig(lam=0.0, beta=0.0, n_reg=3)
    loss, grad_cls, _ = hybrid_loss(z, y, pred, target, 123.0, cfg)
    want_loss, want_grad = softmax_nll_loss(z, y)
    assert loss == want_loss
    npt.assert_array_equal(grad_cls, want_grad)


def test_hybrid_negative_samples_get_zero_reg_gradient():
    rng = np.random.default_rng(26)
    z = rng.normal(size=(5, 2))
    y = np.array([1, 0, 1, 0, 0])
    pred = rng.normal(size=(5, 4)) * 3
    target = rng.normal(size=(5, 4)) * 3
    cfg = HybridLossConfig(lam=0.5, beta=1e-4, n_reg=2)
    _, _, grad_reg = hybrid_loss(z, y, pred, target, 0.0, cfg)
    npt.assert_array_equal(grad_reg[y == 0], 0.0)
    assert np.all(grad_reg[y == 1] != 0.0)


def test_hybrid_reg_gradient_matches_finite_differences():
    rng = np.random.default_rng(27)
    z = rng.normal(size=(4, 2))
    y = np.array([1, 1, 0, 1])
    pred = rng.normal(size=(4, 4))
    target = rng.normal(size=(4, 4))
    cfg = HybridLossConfig(lam=0.7, beta=0.0, n_reg=3)
    _, _, grad_reg = hybrid_loss(z, y, pred, target, 0.0, cfg)

    def loss(pp):
        return hybrid_loss(z, y, pp, target, 0.0, cfg)[0]

    assert grad_close(grad_reg, numeric_grad(loss, pred), rtol=1e-5)


def test_hybrid_rejects_misaligned_lists():
    with pytest.raises(ValueError, match="misaligned"):
        hybrid_loss(np.zeros((3, 2)), [0, 1, 0], np.zeros((2, 4)),
                    np.zeros((3, 4)), 0.0, HybridLossConfig())


def test_localization_per_sample_indicator():
    pred = np.array([[1.0, 0, 0, 0], [2.0, 0, 0, 0]])
    target = np.zeros((2, 4))
    per = localization_loss_per_sample(pred, target, [0, 1])
    npt.assert_allclose(per, [0.0, 1.5])


def test_hybrid_config_validation():
    with pytest.raises(ValueError):
        HybridLossConfig(lam=-0.1)
    with pytest.raises(ValueError):
        HybridLossConfig(beta=-1e-9)
    with pytest.raises(ValueError):
        HybridLossConfig(n_reg=0)


def test_per_sample_nll_consistency():
    rng = np.random.default_rng(28)
    z = rng.normal(size=(6, 2))
    y = rng.integers(0, 2, size=6)
    per = softmax_nll_per_sample(z, y)
    loss, _ = softmax_nll_loss(z, y)
    assert loss == pytest.approx(per.mean(), abs=1e-15)
