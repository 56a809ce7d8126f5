"""Multi-scene visibility enhancement engine built around a multi-branch
edge-extraction block that fuses, by closed-form weight algebra, into a
single 3x3 convolution for inference."""

from .attention import CamWeights, SamWeights, channel_attention, spatial_attention
from .degrade import (
    DegradedPair,
    HazeParams,
    LowLightParams,
    RainParams,
    gen_dataset,
    make_clean_image,
    make_haze,
    make_lowlight,
    make_rain,
)
from .kirsch import KirschBank, alt_operator_bank, kirsch_bank, kirsch_respond
from .losses import LossWeights, SsimParams, l1_loss, ms_ssim_loss, psnr, ssim, total_loss, tv_loss
from .model import (
    EraNetConfig,
    EraNetModel,
    WeightFormatError,
    analytic_macs,
    eranet_forward,
    fuse_model,
    init_model,
    load_weights,
    param_count,
    save_weights,
)
from .reparam import (
    FusedConv,
    KrmWeights,
    fuse_expand_squeeze,
    fuse_kirsch_branch,
    fuse_krm,
    init_krm,
    krm_forward_fused,
    krm_forward_training,
)
from .tensor import (
    ConvKernel,
    DepthwiseKernel,
    PadSpec,
    Tape,
    Tensor4,
    backward,
    conv2d,
    depthwise_conv2d,
    global_pool_spatial,
    gradient_check,
    layer_norm_channel,
    numeric_gradient,
    pad_channel_constant,
    pool_over_channels,
    prelu,
    sigmoid,
)
from .trainer import AdamState, Schedule, TrainingDiverged, adam_step, evaluate, lr_at_epoch, train

__version__ = "0.1.0"
