"""Scikit-learn style estimators wrapping the two-stage pipeline.

X is a list of Volume objects and y a parallel list of annotation lists,
so the detectors plug into tooling that expects fit/predict plus
get_params/set_params (cloning, grid search over the training knobs).
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, clone

from .models import (
    REFINE_PATCH,
    SCREEN_PATCH,
    ResidualUnitSpec,
    build_refine_resnet,
    build_screen_fcn,
    transfer_stem,
)
from .nn.losses import HybridLossConfig
from .phantom import make_patch_sampler
from .refine import RefinerConfig, refine_candidates
from .screening import score_whole_volume, screen_scan
from .training import TrainConfig, train_stage1, train_stage2
from .volumes import Volume


def _check_xy(X, y):
    X = list(X)
    y = [list(a) for a in y]
    if len(X) != len(y):
        raise ValueError(f"got {len(X)} volumes but {len(y)} annotation lists")
    for i, vol in enumerate(X):
        if not isinstance(vol, Volume):
            raise TypeError(f"X[{i}] is not a Volume")
    return X, y


class CandidateScreener(BaseEstimator):
    """Stage-1 screening FCN trained with online sample filtering.

    fit(X, y) trains on phantom or CT volumes with nodule annotations;
    predict(X) returns one candidate list per volume.
    """

    def __init__(self, channels=(16, 16, 32, 32, 2), batch_size=64,
                 max_iters=120, learning_rate=1e-3, osf_enabled=True,
                 hard_fraction=0.5, easy_keep_fraction=0.5, pos_fraction=0.5,
                 hard_negative_fraction=0.4, augment=True, weight_decay=1e-4,
                 threshold=0.85, nms_radius=5.0, seed=0):
        self.channels = channels
        self.batch_size = batch_size
        self.max_iters = max_iters
        self.learning_rate = learning_rate
        self.osf_enabled = osf_enabled
        self.hard_fraction = hard_fraction
        self.easy_keep_fraction = easy_keep_fraction
        self.pos_fraction = pos_fraction
        self.hard_negative_fraction = hard_negative_fraction
        self.augment = augment
        self.weight_decay = weight_decay
        self.threshold = threshold
        self.nms_radius = nms_radius
        self.seed = seed

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        sampler = make_patch_sampler(
            list(zip(X, y)), SCREEN_PATCH,
            pos_fraction=self.pos_fraction,
            hard_negative_fraction=self.hard_negative_fraction,
            augment_positives=self.augment,
        )
        cfg = TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_iters=self.max_iters,
            osf_enabled=self.osf_enabled,
            hard_fraction=self.hard_fraction,
            easy_keep_fraction=self.easy_keep_fraction,
            seed=self.seed,
            loss_cfg=HybridLossConfig(lam=0.0, beta=self.weight_decay),
        )
        model = build_screen_fcn(self.channels, seed=self.seed)
        self.model_, self.loss_trace_ = train_stage1(model, sampler, cfg)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this CandidateScreener is not fitted yet")

    def score_volume(self, volume: Volume):
        self._require_fitted()
        return score_whole_volume(self.model_, volume)

    def predict(self, X):
        self._require_fitted()
        return [
            screen_scan(self.model_, vol, threshold=self.threshold,
                        radius=self.nms_radius)
            for vol in X
        ]


class FalsePositiveReducer(BaseEstimator):
    """Stage-2 hybrid-loss residual network.

    fit(X, y) trains on crops around simulated proposals; pass
    stem_source (a trained screening ModelParams) to initialize the stem
    from stage 1. predict(X, candidates) refines per-volume candidates.
    """

    def __init__(self, unit_channels=(32, 64), stem_channels=(16, 16, 32),
                 batch_size=24, max_iters=120, learning_rate=1e-3, lam=0.5,
                 weight_decay=1e-4, pos_fraction=0.5,
                 hard_negative_fraction=0.5, augment=True,
                 decision_threshold=0.5, patch_size=REFINE_PATCH,
                 osf_enabled=False, seed=0):
        self.unit_channels = unit_channels
        self.stem_channels = stem_channels
        self.batch_size = batch_size
        self.max_iters = max_iters
        self.learning_rate = learning_rate
        self.lam = lam
        self.weight_decay = weight_decay
        self.pos_fraction = pos_fraction
        self.hard_negative_fraction = hard_negative_fraction
        self.augment = augment
        self.decision_threshold = decision_threshold
        self.patch_size = patch_size
        self.osf_enabled = osf_enabled
        self.seed = seed

    def fit(self, X, y, stem_source=None):
        X, y = _check_xy(X, y)
        model = build_refine_resnet(
            spec=[ResidualUnitSpec(c) for c in self.unit_channels],
            seed=self.seed,
            stem_channels=self.stem_channels,
        )
        if stem_source is not None:
            model = transfer_stem(stem_source, model)
        sampler = make_patch_sampler(
            list(zip(X, y)), self.patch_size,
            pos_fraction=self.pos_fraction,
            hard_negative_fraction=self.hard_negative_fraction,
            augment_positives=self.augment,
        )
        cfg = TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_iters=self.max_iters,
            osf_enabled=self.osf_enabled,
            seed=self.seed,
            loss_cfg=HybridLossConfig(lam=self.lam, beta=self.weight_decay),
        )
        self.model_, self.loss_trace_ = train_stage2(model, sampler, cfg)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this FalsePositiveReducer is not fitted yet")

    def predict(self, X, candidates):
        """Refine per-volume candidate lists; returns the surviving lists."""
        self._require_fitted()
        X = list(X)
        candidates = list(candidates)
        if len(X) != len(candidates):
            raise ValueError(
                f"got {len(X)} volumes but {len(candidates)} candidate lists"
            )
        cfg = RefinerConfig(patch_size=self.patch_size,
                            decision_threshold=self.decision_threshold)
        return [
            refine_candidates(self.model_, vol, cands, cfg)
            for vol, cands in zip(X, candidates)
        ]


class NoduleDetector(BaseEstimator):
    """Full two-stage detector: screener plus reducer with stem transfer."""

    def __init__(self, screener=None, reducer=None):
        self.screener = screener
        self.reducer = reducer

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        self.screener_ = clone(self.screener) if self.screener is not None \
            else CandidateScreener()
        self.reducer_ = clone(self.reducer) if self.reducer is not None \
            else FalsePositiveReducer()
        self.screener_.fit(X, y)
        self.reducer_.fit(X, y, stem_source=self.screener_.model_)
        return self

    def predict(self, X):
        if not hasattr(self, "screener_"):
            raise RuntimeError("this NoduleDetector is not fitted yet")
        X = list(X)
        return self.reducer_.predict(X, self.screener_.predict(X))
