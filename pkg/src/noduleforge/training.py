"""SGD training loops with online sample filtering.

Stage 1 trains the screening FCN on labeled patches. Each iteration
forwards the full batch, ranks samples by their classification loss,
keeps the worst `hard_fraction` plus a random `easy_keep_fraction` of the
rest, and backpropagates only the kept samples (excluded rows contribute
zero logit gradient, so one forward/backward pass suffices).

Stage 2 trains the refiner under the joint objective: classification NLL
plus a weighted smooth-L1 localization term on positives plus weight
decay on the convolution weights of all segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import TrainingDivergedError
from .models import (
    ModelParams,
    Tape,
    commit_batchnorm_stats,
    conv_weight_l2,
    refine_backward,
    refine_forward,
    screen_backward,
    screen_forward,
    zero_grads,
)
from .nn.losses import (
    HybridLossConfig,
    localization_loss_per_sample,
    softmax2,
    softmax_nll_per_sample,
)
from .nn.targets import encode_regression_target
from .validation import check_labels


@dataclass
class TrainConfig:
    """Knobs shared by both training stages."""

    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_schedule: tuple[float, ...] = (0.5, 0.75)  # fractions of max_iters where lr *= 0.1
    max_iters: int = 100
    osf_enabled: bool = True
    hard_fraction: float = 0.5
    easy_keep_fraction: float = 0.5
    seed: int = 0
    loss_cfg: HybridLossConfig = field(default_factory=HybridLossConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0 < self.hard_fraction <= 1:
            raise ValueError(f"hard_fraction must be in (0, 1], got {self.hard_fraction}")
        if not 0 <= self.easy_keep_fraction <= 1:
            raise ValueError(
                f"easy_keep_fraction must be in [0, 1], got {self.easy_keep_fraction}"
            )
        if self.batch_size < 1 or self.max_iters < 0:
            raise ValueError("batch_size must be >= 1 and max_iters >= 0")

    def lr_at(self, iteration: int) -> float:
        lr = self.learning_rate
        for frac in self.lr_schedule:
            if iteration >= frac * self.max_iters:
                lr *= 0.1
        return lr


@dataclass
class TrainBatch:
    """One minibatch: patches, labels, and per-positive localization data.

    `annotations` holds a NoduleAnnotation for every positive and None for
    every negative; `proposal_positions` holds the (x, y, z) crop center
    of each patch in volume coordinates, the frame the annotations use.
    """

    patches: np.ndarray
    labels: np.ndarray
    annotations: list
    proposal_positions: list

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        self.labels = check_labels(self.labels, self.patches.shape[0])
        n = self.patches.shape[0]
        if len(self.annotations) != n or len(self.proposal_positions) != n:
            raise ValueError(
                f"batch of {n} patches needs {n} annotations and positions, got "
                f"{len(self.annotations)} and {len(self.proposal_positions)}"
            )
        for i, (lab, anno) in enumerate(zip(self.labels, self.annotations)):
            if lab == 1 and anno is None:
                raise ValueError(f"positive sample {i} is missing its annotation")
            if lab == 0 and anno is not None:
                raise ValueError(f"negative sample {i} must not carry an annotation")

    def __len__(self) -> int:
        return int(self.patches.shape[0])

    @property
    def patch_size(self) -> tuple[int, int, int]:
        """(x, y, z) spatial size of the patches."""
        _, _, d, h, w = self.patches.shape
        return (w, h, d)


@dataclass
class TraceRow:
    iteration: int
    loss: float
    selected: int
    total: int


def osf_select(losses, hard_fraction: float, easy_keep_fraction: float, rng) -> list[int]:
    """Pick hard samples plus a random share of the easy remainder.

    Keeps the ceil(hard_fraction * n) highest-loss indices (ties broken
    toward the lower index), then a uniform random subset of
    round(easy_keep_fraction * remaining) of the rest. Result is sorted.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("losses must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must all be finite")
    if not 0 < hard_fraction <= 1:
        raise ValueError(f"hard_fraction must be in (0, 1], got {hard_fraction}")
    if not 0 <= easy_keep_fraction <= 1:
        raise ValueError(f"easy_keep_fraction must be in [0, 1], got {easy_keep_fraction}")
    n = losses.size
    n_hard = math.ceil(hard_fraction * n)
    order = np.argsort(-losses, kind="stable")
    hard = order[:n_hard]
    rest = np.sort(order[n_hard:])
    n_easy = math.floor(easy_keep_fraction * rest.size + 0.5)  # round half up
    if n_easy > 0:
        easy = rng.choice(rest, size=n_easy, replace=False)
    else:
        easy = np.empty(0, dtype=np.intp)
    return sorted(int(i) for i in np.concatenate([hard, easy]))


def sgd_step(model: ModelParams, grads, lr: float) -> ModelParams:
    """w <- w - lr * g for every trainable array; returns a new model."""
    if len(grads) != len(model.layers):
        raise ValueError(
            f"got {len(grads)} gradient entries for {len(model.layers)} layers"
        )
    out = model.copy()
    for layer, g in zip(out.layers, grads):
        for slot in ("weights", "bias", "bn_gamma", "bn_beta"):
            param = getattr(layer, slot)
            grad = getattr(g, slot)
            if param is None:
                if grad is not None:
                    raise ValueError(f"gradient given for missing {slot} on {layer.kind}")
                continue
            if grad is None:
                continue
            if grad.shape != param.shape:
                raise ValueError(
                    f"{slot} gradient shape {grad.shape} does not match "
                    f"parameter shape {param.shape}"
                )
            param -= lr * grad
    return out


def _apply_weight_decay(model: ModelParams, grads, beta: float) -> None:
    if beta <= 0:
        return
    for layer, g in zip(model.layers, grads):
        if layer.kind == "conv3d":
            g.weights += 2.0 * beta * layer.weights


def _check_finite_loss(loss: float, iteration: int, stage: str) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergedError(
            f"{stage} loss became non-finite ({loss}) at iteration {iteration}"
        )


def train_stage1(model: ModelParams, sampler, cfg: TrainConfig):
    """Train the screening FCN with per-iteration sample filtering.

    `sampler(rng, n)` must return a TrainBatch of n labeled patches sized
    to the screening receptive field. Returns (trained model, trace).
    """
    rng = np.random.default_rng(cfg.seed)
    model = model.copy()
    trace: list[TraceRow] = []
    for it in range(cfg.max_iters):
        batch = sampler(rng, cfg.batch_size)
        n = len(batch)
        tape = Tape()
        logits = screen_forward(model, batch.patches, mode="train", tape=tape)
        logits2 = logits.reshape(n, 2)
        per_sample = softmax_nll_per_sample(logits2, batch.labels)
        if not np.all(np.isfinite(per_sample)):
            raise TrainingDivergedError(
                f"stage-1 per-sample loss became non-finite at iteration {it}"
            )
        if cfg.osf_enabled:
            selected = osf_select(per_sample, cfg.hard_fraction,
                                  cfg.easy_keep_fraction, rng)
        else:
            selected = list(range(n))
        beta = cfg.loss_cfg.beta
        loss = float(per_sample[selected].mean())
        if beta > 0:
            loss += beta * conv_weight_l2(model)
        _check_finite_loss(loss, it, "stage-1")

        grad_logits = np.zeros((n, 2))
        probs = softmax2(logits2[selected])
        probs[np.arange(len(selected)), batch.labels[selected]] -= 1.0
        grad_logits[selected] = probs / len(selected)
        grads, _ = screen_backward(model, tape, grad_logits.reshape(logits.shape))
        _apply_weight_decay(model, grads, beta)

        model = sgd_step(model, grads, cfg.lr_at(it))
        commit_batchnorm_stats(model, tape)
        trace.append(TraceRow(it, loss, len(selected), n))
    return model, trace


def _encode_targets(batch: TrainBatch) -> np.ndarray:
    size = batch.patch_size
    targets = np.zeros((len(batch), 4))
    for i, (lab, anno, pos) in enumerate(
        zip(batch.labels, batch.annotations, batch.proposal_positions)
    ):
        if lab == 1:
            t = encode_regression_target(anno.centroid, anno.diameter, pos, size)
            targets[i] = t.as_tuple()
    return targets


def train_stage2(model: ModelParams, sampler, cfg: TrainConfig):
    """Train the refiner under the joint objective. Returns (model, trace).

    Regression targets are encoded per sample against its proposal
    position and the batch patch size; the localization normalizer is the
    positive count of the (post-filtering) batch, floored at one.
    """
    rng = np.random.default_rng(cfg.seed)
    model = model.copy()
    lam, beta = cfg.loss_cfg.lam, cfg.loss_cfg.beta
    trace: list[TraceRow] = []
    for it in range(cfg.max_iters):
        batch = sampler(rng, cfg.batch_size)
        n = len(batch)
        tape = Tape()
        cls_logits, reg_out = refine_forward(model, batch.patches, mode="train", tape=tape)
        per_cls = softmax_nll_per_sample(cls_logits, batch.labels)
        targets = _encode_targets(batch)
        per_loc = localization_loss_per_sample(reg_out, targets, batch.labels)
        if not (np.all(np.isfinite(per_cls)) and np.all(np.isfinite(per_loc))):
            raise TrainingDivergedError(
                f"stage-2 per-sample loss became non-finite at iteration {it}"
            )

        if cfg.osf_enabled:
            n_pos_all = max(1, int(batch.labels.sum()))
            ranking = per_cls + lam * per_loc / n_pos_all
            selected = osf_select(ranking, cfg.hard_fraction,
                                  cfg.easy_keep_fraction, rng)
        else:
            selected = list(range(n))
        sel = np.asarray(selected, dtype=np.intp)
        labels_sel = batch.labels[sel]
        n_reg = max(1, int(labels_sel.sum()))
        params_l2 = conv_weight_l2(model)

        loss = float(per_cls[sel].mean())
        loss += lam * float(per_loc[sel].sum()) / n_reg
        loss += beta * params_l2
        _check_finite_loss(loss, it, "stage-2")

        grad_cls = np.zeros((n, 2))
        probs = softmax2(cls_logits[sel])
        probs[np.arange(sel.size), labels_sel] -= 1.0
        grad_cls[sel] = probs / sel.size

        grad_reg = np.zeros((n, 4))
        if lam > 0:
            diff = reg_out[sel] - targets[sel]
            step = np.where(np.abs(diff) < 1.0, diff, np.sign(diff))
            grad_reg[sel] = step * (labels_sel == 1)[:, None] * (lam / n_reg)

        grads, _ = refine_backward(model, tape, grad_cls, grad_reg)
        _apply_weight_decay(model, grads, beta)

        model = sgd_step(model, grads, cfg.lr_at(it))
        commit_batchnorm_stats(model, tape)
        trace.append(TraceRow(it, loss, sel.size, n))
    return model, trace
