"""From-scratch volumetric network kernels: layers, losses, targets."""

from .layers import (
    BatchNormCache,
    LayerParams,
    batchnorm3d_backward,
    batchnorm3d_forward,
    conv3d_backward,
    conv3d_forward,
    conv_output_shape,
    global_avg_pool,
    global_avg_pool_backward,
    maxpool3d,
    maxpool3d_backward,
    relu,
    relu_backward,
)
from .losses import (
    HybridLossConfig,
    hybrid_loss,
    localization_loss_per_sample,
    smooth_l1,
    smooth_l1_grad,
    softmax2,
    softmax_nll_loss,
    softmax_nll_per_sample,
)
from .targets import (
    RegressionTarget,
    decode_regression_target,
    encode_regression_target,
    patch_diagonal,
)

__all__ = [
    "BatchNormCache",
    "HybridLossConfig",
    "LayerParams",
    "RegressionTarget",
    "batchnorm3d_backward",
    "batchnorm3d_forward",
    "conv3d_backward",
    "conv3d_forward",
    "conv_output_shape",
    "decode_regression_target",
    "encode_regression_target",
    "global_avg_pool",
    "global_avg_pool_backward",
    "hybrid_loss",
    "localization_loss_per_sample",
    "maxpool3d",
    "maxpool3d_backward",
    "patch_diagonal",
    "relu",
    "relu_backward",
    "smooth_l1",
    "smooth_l1_grad",
    "softmax2",
    "softmax_nll_loss",
    "softmax_nll_per_sample",
]
