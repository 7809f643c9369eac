"""Subject-specific deformable 3D registration.

An untrained pyramidal convolutional network, optimized per image pair,
parametrizes a diffeomorphic displacement field; its architecture acts
as the only learned-free regularizer beyond explicit smoothness and
folding penalties. Everything runs on a from-scratch reverse-mode tape
over numba kernels: no deep-learning framework involved.
"""

from .autodiff import (AdamState, ShapeError, TapeError, Tensor, adam_step,
                       backward, conv3, conv3_transpose, leaky_relu, max_pool2,
                       mean, sum_all, trilinear_resize, zero_grad)
from .field import (compose, exp_velocity, jacobian_determinant, resize_volume,
                    upsample_field, warp, zero_field)
from .losses import (LossWeights, NccFixedCache, ncc_dissimilarity,
                     negative_jacobian_penalty, smoothness_penalty, total_loss)
from .metrics import (EvalReport, LabeledMasks, detection_rate, dice,
                      disappearing_rate, evaluate, sdjdet, warp_mask)
from .network import (NetConfig, Network, build, forward_level, image_pyramid,
                      load_network, pyramid_field, save_network)
from .optim import (DivergenceError, RegistrationResult, ScheduleConfig,
                    TraceRow, default_iters, loss_trace_report, register_direct,
                    register_pyramid, write_trace_csv)
from .phantom import (PhantomCase, PhantomError, PhantomSpec, default_spec,
                      field_error, generate)
from .volio import VolumeFormatError, normalize_intensity, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "AdamState", "ShapeError", "TapeError", "Tensor", "adam_step", "backward",
    "conv3", "conv3_transpose", "leaky_relu", "max_pool2", "mean", "sum_all",
    "trilinear_resize", "zero_grad",
    "compose", "exp_velocity", "jacobian_determinant", "resize_volume",
    "upsample_field", "warp", "zero_field",
    "LossWeights", "NccFixedCache", "ncc_dissimilarity",
    "negative_jacobian_penalty", "smoothness_penalty", "total_loss",
    "EvalReport", "LabeledMasks", "detection_rate", "dice",
    "disappearing_rate", "evaluate", "sdjdet", "warp_mask",
    "NetConfig", "Network", "build", "forward_level", "image_pyramid",
    "load_network", "pyramid_field", "save_network",
    "DivergenceError", "RegistrationResult", "ScheduleConfig", "TraceRow",
    "default_iters", "loss_trace_report", "register_direct", "register_pyramid",
    "write_trace_csv",
    "PhantomCase", "PhantomError", "PhantomSpec", "default_spec", "field_error",
    "generate",
    "VolumeFormatError", "normalize_intensity", "read_volume", "write_volume",
    "__version__",
]
