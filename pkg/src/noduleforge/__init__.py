"""Two-stage 3D ConvNet pulmonary nodule detection at desk scale.

Stage 1 screens candidates with a fully convolutional network trained
under online sample filtering; stage 2 re-classifies each candidate with
a hybrid-loss residual network that also regresses nodule centroid and
diameter. Includes a phantom volume generator and a FROC/CPM evaluation
harness so the whole pipeline runs and is testable without real CT data.
"""

from .estimators import CandidateScreener, FalsePositiveReducer, NoduleDetector
from .metrics import CpmResult, FrocCurve, cpm, cpm_from_sensitivities, froc, \
    hit_test, match_candidates, stage1_metrics
from .models import (
    ModelParams,
    ResidualUnitSpec,
    build_refine_resnet,
    build_screen_fcn,
    load_model,
    save_model,
    transfer_stem,
)
from .phantom import PhantomSpec, augment, generate_phantom, \
    make_patch_sampler, sample_training_patches
from .refine import RefinerConfig, detect, refine_candidates
from .screening import Candidate, ScoreVolume, index_map, nms3d, \
    score_whole_volume, screen_scan
from .training import TrainBatch, TrainConfig, osf_select, sgd_step, \
    train_stage1, train_stage2
from .volumes import NoduleAnnotation, Volume, crop_patch

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "CandidateScreener",
    "CpmResult",
    "FalsePositiveReducer",
    "FrocCurve",
    "ModelParams",
    "NoduleAnnotation",
    "NoduleDetector",
    "PhantomSpec",
    "RefinerConfig",
    "ResidualUnitSpec",
    "ScoreVolume",
    "TrainBatch",
    "TrainConfig",
    "Volume",
    "augment",
    "build_refine_resnet",
    "build_screen_fcn",
    "cpm",
    "cpm_from_sensitivities",
    "crop_patch",
    "detect",
    "froc",
    "generate_phantom",
    "hit_test",
    "index_map",
    "load_model",
    "make_patch_sampler",
    "match_candidates",
    "nms3d",
    "osf_select",
    "refine_candidates",
    "sample_training_patches",
    "save_model",
    "score_whole_volume",
    "screen_scan",
    "sgd_step",
    "stage1_metrics",
    "train_stage1",
    "train_stage2",
    "transfer_stem",
]
