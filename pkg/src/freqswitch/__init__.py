"""Frequency-switched low-rank convolution adapters for multi-task learning.

One shared fused kernel (channel-reduce, spatial conv, channel-expand
collapsed into a single convolution) is specialized per task by an
elementwise sine map whose frequency comes from a tiny bounded clock net,
followed by a Gaussian low-pass. The package bundles the numerical core,
verification of the decorrelation/rank-expansion theory, a desk-scale
multi-task model with exact analytic gradients, a toy training loop, and a
CLI driving all of it.
"""

from .numerics import (
    ContractViolation,
    ConvKernel,
    RandomStream,
    conv2d,
    gaussian_kernel,
    sample_gaussian,
    singular_values,
    upsample_nearest,
)
from .adapters import (
    ClockNetParams,
    FusedKernel,
    LowRankFactors,
    MidKernel,
    ModulatedKernel,
    TaskToken,
    clocknet_backward,
    clocknet_forward,
    fuse_awb,
    fuse_backward,
    linear_scale,
    lowpass_filter,
    pipeline_apply,
    sine_backward,
    sine_modulate,
)
from .analysis import (
    CorrelationEstimate,
    GradSimMatrix,
    RankReport,
    UndefinedCorrelationError,
    epoch_grad_sim,
    gaussian_corr_oracle,
    grad_cosine,
    monte_carlo_corr,
    rank_report,
    vec_correlation,
)
from .model import (
    GradientBundle,
    ModelConfig,
    MTLModel,
    finite_diff_check,
    load_checkpoint,
    model_backward,
    model_forward,
    save_checkpoint,
)
from .trainer import (
    DivergenceError,
    RunReport,
    ToyDataset,
    ToyTask,
    TrainConfig,
    delta_m,
    make_toy_suite,
    mtl_loss,
    optimizer_step,
    train,
    train_single_task,
)

__version__ = "0.1.0"
