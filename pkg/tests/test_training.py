"""Sample filtering, SGD stepping, and both training loops."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from noduleforge.models import (
    ResidualUnitSpec,
    build_refine_resnet,
    build_screen_fcn,
    screen_forward,
    zero_grads,
)
from noduleforge.nn import HybridLossConfig, softmax_nll_per_sample
from noduleforge.training import (
    TrainBatch,
    TrainConfig,
    osf_select,
    sgd_step,
    train_stage1,
    train_stage2,
)
from noduleforge.volumes import NoduleAnnotation


def trainable_arrays(model):
    out = []
    for l in model.layers:
        for slot in ("weights", "bias", "bn_gamma", "bn_beta"):
            arr = getattr(l, slot)
            if arr is not None:
                out.append(arr)
    return out


# ---------------------------------------------------------------------------
# osf_select


def test_osf_forced_example():
    losses = [0.9, 0.8, 0.7, 0.6, 0.1, 0.2, 0.3, 0.4]
    rng = np.random.default_rng(0)
    sel = osf_select(losses, 0.5, 0.5, rng)
    assert len(sel) == 6
    assert set(sel) >= {0, 1, 2, 3}
    assert len(set(sel) & {4, 5, 6, 7}) == 2
    assert sel == sorted(sel)


def test_osf_all_equal_ties_to_lowest_indices():
    rng = np.random.default_rng(1)
    sel = osf_select([1.0] * 8, 0.5, 0.5, rng)
    assert len(sel) == 6
    assert set(sel) >= {0, 1, 2, 3}


def test_osf_hard_fraction_one_selects_all():
    rng = np.random.default_rng(2)
    assert osf_select([0.5, 0.1, 0.9], 1.0, 0.0, rng) == [0, 1, 2]
    assert osf_select([0.5, 0.1, 0.9], 1.0, 1.0, rng) == [0, 1, 2]


def test_osf_empty_rejected():
    with pytest.raises(ValueError):
        osf_select([], 0.5, 0.5, np.random.default_rng(0))


def test_osf_selection_size_law_exhaustive():
    rng = np.random.default_rng(3)
    for n in range(1, 65):
        losses = rng.uniform(size=n)
        for fh in (0.25, 0.5, 1.0):
            for fe in (0.25, 0.5, 1.0):
                sel = osf_select(losses, fh, fe, rng)
                n_hard = math.ceil(fh * n)
                n_easy = math.floor(fe * (n - n_hard) + 0.5)
                assert len(sel) == n_hard + n_easy, (n, fh, fe)


def test_osf_hard_subset_is_brute_force_top_k():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(1, 11))
        losses = np.round(rng.uniform(size=n), 2)  # provoke ties
        sel = set(osf_select(losses, 0.5, 0.0, rng))
        k = math.ceil(0.5 * n)
        want = set(sorted(range(n), key=lambda i: (-losses[i], i))[:k])
        assert sel == want


def test_osf_deterministic_given_rng_state():
    losses = np.random.default_rng(5).uniform(size=32)
    a = osf_select(losses, 0.5, 0.5, np.random.default_rng(77))
    b = osf_select(losses, 0.5, 0.5, np.random.default_rng(77))
    assert a == b


# ---------------------------------------------------------------------------
# sgd_step


def test_sgd_zero_lr_is_bit_identical():
    model = build_screen_fcn(seed=0)
    grads = zero_grads(model)
    for g in grads:
        if g.weights is not None:
            g.weights += 1.0
    out = sgd_step(model, grads, 0.0)
    for a, b in zip(trainable_arrays(model), trainable_arrays(out)):
        assert a.tobytes() == b.tobytes()


def test_sgd_single_weight_update():
    model = build_screen_fcn(seed=0)
    model.layers[0].weights.flat[0] = 1.0
    grads = zero_grads(model)
    grads[0].weights.flat[0] = 2.0
    out = sgd_step(model, grads, 0.1)
    assert out.layers[0].weights.flat[0] == pytest.approx(0.8, abs=1e-15)
    # source model untouched
    assert model.layers[0].weights.flat[0] == 1.0


def test_sgd_two_steps_equal_one_doubled_step():
    model = build_screen_fcn(seed=1)
    grads = zero_grads(model)
    rng = np.random.default_rng(6)
    for g in grads:
        if g.weights is not None:
            g.weights[:] = rng.normal(size=g.weights.shape)
    twice = sgd_step(sgd_step(model, grads, 0.01), grads, 0.01)
    once = sgd_step(model, grads, 0.02)
    for a, b in zip(trainable_arrays(twice), trainable_arrays(once)):
        npt.assert_allclose(a, b, atol=1e-15)


def test_sgd_misaligned_grads_rejected():
    model = build_screen_fcn(seed=0)
    with pytest.raises(ValueError, match="gradient"):
        sgd_step(model, zero_grads(model)[:-1], 0.1)


# ---------------------------------------------------------------------------
# synthetic samplers for loop tests


def separable_screen_sampler(rng, n):
    """Class 1 = bright center blob, class 0 = flat noise; trivially separable."""
    patches = rng.normal(0.0, 0.1, size=(n, 1, 10, 30, 30))
    labels = rng.integers(0, 2, size=n)
    zz, yy, xx = np.ogrid[0:10, 0:30, 0:30]
    blob = np.exp(-(((zz - 5) ** 2) + ((yy - 15) ** 2) + ((xx - 15) ** 2)) / 18.0)
    annos = []
    for i in range(n):
        if labels[i] == 1:
            patches[i, 0] += blob
            annos.append(NoduleAnnotation(centroid=(15, 15, 5), diameter=5.0))
        else:
            annos.append(None)
    return TrainBatch(
        patches=patches,
        labels=labels,
        annotations=annos,
        proposal_positions=[(15, 15, 5)] * n,
    )


def refine_sampler_factory(offset_scale=6.0):
    def sampler(rng, n):
        patches = rng.normal(0.0, 0.1, size=(n, 1, 24, 60, 60))
        labels = rng.integers(0, 2, size=n)
        annos = []
        for i in range(n):
            if labels[i] == 1:
                off = rng.uniform(-offset_scale, offset_scale, size=3)
                d = rng.uniform(4, 10)
                cx, cy, cz = 30 + off[0], 30 + off[1], 12 + off[2] / 2
                zz, yy, xx = np.ogrid[0:24, 0:60, 0:60]
                sig = d / 2.355
                patches[i, 0] += np.exp(
                    -((zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig)
                )
                annos.append(NoduleAnnotation(centroid=(cx, cy, cz), diameter=d))
            else:
                annos.append(None)
        return TrainBatch(
            patches=patches,
            labels=labels,
            annotations=annos,
            proposal_positions=[(30, 30, 12)] * n,
        )
    return sampler


# ---------------------------------------------------------------------------
# train_stage1


def test_stage1_zero_lr_leaves_parameters_unchanged():
    model = build_screen_fcn(seed=2)
    cfg = TrainConfig(batch_size=4, learning_rate=0.0, max_iters=3,
                      osf_enabled=False, seed=0,
                      loss_cfg=HybridLossConfig(beta=0.0))
    trained, trace = train_stage1(model, separable_screen_sampler, cfg)
    for a, b in zip(trainable_arrays(model), trainable_arrays(trained)):
        assert a.tobytes() == b.tobytes()
    assert len(trace) == 3


def test_stage1_learns_separable_set():
    model = build_screen_fcn(seed=3)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, max_iters=50,
                      osf_enabled=False, seed=1)
    trained, trace = train_stage1(model, separable_screen_sampler, cfg)
    assert trace[-1].loss < trace[0].loss
    assert all(r.selected == r.total == 8 for r in trace)


def test_stage1_osf_gradient_count_contract():
    model = build_screen_fcn(seed=4)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, max_iters=5,
                      osf_enabled=True, hard_fraction=0.5,
                      easy_keep_fraction=0.5, seed=2)
    _, trace = train_stage1(model, separable_screen_sampler, cfg)
    for row in trace:
        assert row.total == 8
        assert row.selected == 6  # ceil(4) + round(0.5 * 4)
        assert row.selected < row.total


def test_stage1_bit_reproducible():
    cfg = TrainConfig(batch_size=6, learning_rate=1e-3, max_iters=8, seed=9)
    m1, t1 = train_stage1(build_screen_fcn(seed=5), separable_screen_sampler, cfg)
    m2, t2 = train_stage1(build_screen_fcn(seed=5), separable_screen_sampler, cfg)
    assert [r.loss for r in t1] == [r.loss for r in t2]
    for a, b in zip(trainable_arrays(m1), trainable_arrays(m2)):
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("lr", [1e-3, 1e-4])
def test_stage1_single_step_decreases_batch_loss(lr):
    """Line-search check: with OSF off and no decay, one step helps."""
    model = build_screen_fcn(seed=6)
    rng = np.random.default_rng(3)
    batch = separable_screen_sampler(rng, 8)

    def batch_loss(m):
        logits = screen_forward(m, batch.patches, mode="infer")
        return float(softmax_nll_per_sample(logits.reshape(8, 2), batch.labels).mean())

    cfg = TrainConfig(batch_size=8, learning_rate=lr, max_iters=1,
                      osf_enabled=False, seed=0,
                      loss_cfg=HybridLossConfig(lam=0.0, beta=0.0))
    before = batch_loss(model)
    trained, _ = train_stage1(model, lambda r, n: batch, cfg)
    after = batch_loss(trained)
    assert after < before


def test_stage1_aborts_on_nonfinite_loss():
    from noduleforge.exceptions import TrainingDivergedError

    def bad_sampler(rng, n):
        batch = separable_screen_sampler(rng, n)
        batch.patches[0, 0, 0, 0, 0] = np.nan
        return batch

    cfg = TrainConfig(batch_size=4, learning_rate=10.0, max_iters=10, seed=0)
    with pytest.raises(TrainingDivergedError, match="iteration"):
        train_stage1(build_screen_fcn(seed=7), bad_sampler, cfg)


# ---------------------------------------------------------------------------
# train_stage2


def small_refiner(seed=0):
    return build_refine_resnet(spec=[ResidualUnitSpec(16), ResidualUnitSpec(24)],
                               seed=seed, stem_channels=(8, 8, 16))


def test_stage2_lambda_zero_ignores_annotations():
    base = refine_sampler_factory()

    def garbage_annos(rng, n):
        batch = base(rng, n)
        annos = [
            None if a is None else NoduleAnnotation(centroid=(1.0, 2.0, 3.0),
                                                    diameter=29.0)
            for a in batch.annotations
        ]
        return TrainBatch(patches=batch.patches, labels=batch.labels,
                          annotations=annos,
                          proposal_positions=batch.proposal_positions)

    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, max_iters=4,
                      osf_enabled=False, seed=11,
                      loss_cfg=HybridLossConfig(lam=0.0, beta=1e-4))
    m1, t1 = train_stage2(small_refiner(8), base, cfg)
    m2, t2 = train_stage2(small_refiner(8), garbage_annos, cfg)
    assert [r.loss for r in t1] == [r.loss for r in t2]
    for a, b in zip(trainable_arrays(m1), trainable_arrays(m2)):
        assert a.tobytes() == b.tobytes()


def test_stage2_all_negative_batch_keeps_regression_head_frozen():
    def all_neg(rng, n):
        batch = refine_sampler_factory()(rng, n)
        return TrainBatch(patches=batch.patches,
                          labels=np.zeros(n, dtype=int),
                          annotations=[None] * n,
                          proposal_positions=batch.proposal_positions)

    model = small_refiner(9)
    cfg = TrainConfig(batch_size=4, learning_rate=1e-2, max_iters=3,
                      osf_enabled=False, seed=12,
                      loss_cfg=HybridLossConfig(lam=0.5, beta=0.0))
    trained, _ = train_stage2(model, all_neg, cfg)
    rs, re = model.segments["reg_branch"]
    for idx in range(rs, re):
        npt.assert_array_equal(model.layers[idx].weights,
                               trained.layers[idx].weights)
        npt.assert_array_equal(model.layers[idx].bias,
                               trained.layers[idx].bias)
    # the classifier still moved
    cs, _ = model.segments["cls_branch"]
    assert not np.array_equal(model.layers[cs].weights, trained.layers[cs].weights)


def test_stage2_positive_sample_missing_annotation_rejected():
    with pytest.raises(ValueError, match="missing its annotation"):
        TrainBatch(patches=np.zeros((2, 1, 4, 4, 4)), labels=[1, 0],
                   annotations=[None, None],
                   proposal_positions=[(0, 0, 0), (0, 0, 0)])


def test_stage2_loss_decreases_on_synthetic_blobs():
    cfg = TrainConfig(batch_size=6, learning_rate=1e-3, max_iters=30,
                      osf_enabled=False, seed=13)
    _, trace = train_stage2(small_refiner(10), refine_sampler_factory(), cfg)
    first = np.mean([r.loss for r in trace[:5]])
    last = np.mean([r.loss for r in trace[-5:]])
    assert last < first


@pytest.mark.slow
def test_stage2_localization_error_improves_over_init():
    """Decoded centroid distance shrinks relative to the untrained model."""
    import math
    from noduleforge.models import refine_forward
    from noduleforge.nn import decode_regression_target

    sampler = refine_sampler_factory()

    def mean_decoded_error(model):
        rng = np.random.default_rng(99)
        batch = sampler(rng, 16)
        cls, reg = refine_forward(model, batch.patches, mode="infer")
        errs = []
        for i in range(16):
            if batch.labels[i] == 1:
                centroid, _ = decode_regression_target(
                    reg[i], batch.proposal_positions[i], batch.patch_size)
                errs.append(math.dist(centroid, batch.annotations[i].centroid))
        return float(np.mean(errs))

    init = small_refiner(30)
    cfg = TrainConfig(batch_size=8, learning_rate=5e-3, max_iters=60,
                      osf_enabled=False, seed=31,
                      loss_cfg=HybridLossConfig(lam=0.5, beta=1e-4))
    trained, _ = train_stage2(init, sampler, cfg)
    assert mean_decoded_error(trained) < mean_decoded_error(init)


def test_stage2_bit_reproducible():
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, max_iters=5, seed=21,
                      osf_enabled=False)
    m1, t1 = train_stage2(small_refiner(11), refine_sampler_factory(), cfg)
    m2, t2 = train_stage2(small_refiner(11), refine_sampler_factory(), cfg)
    assert [r.loss for r in t1] == [r.loss for r in t2]
    for a, b in zip(trainable_arrays(m1), trainable_arrays(m2)):
        assert a.tobytes() == b.tobytes()
