"""Gap-preserving distillation engine.

A compact student and a wider dynamic teacher share one parameter store:
the teacher is grown from the student by function-preserving channel and
branch expansion, the student is re-extracted from the shared parameters
in closed form at every step, and both views train jointly under a
single-direction distillation objective.
"""

from .checkpoint import load, save
from .data import Dataset, DatasetSpec, load_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    GpdError,
    NumericError,
    ShapeError,
)
from .expand import (
    DualBNState,
    ExpandedBlock,
    ExpansionPlan,
    expand_bn,
    expand_branches,
    expand_channels,
    expand_model,
)
from .losses import LossBreakdown, LossConfig, gpd_loss, verify_stop_gradient
from .model import LayerSpec, ModelGraph, build_student, forward
from .ops import (
    BNParams,
    ConvWeight,
    avgpool_global,
    batchnorm,
    conv2d,
    kd_kl_divergence,
    linear,
    relu,
    sgd_momentum_step,
    softmax_cross_entropy,
)
from .reparam import (
    StudentView,
    extract_channels,
    extract_student,
    grad_pullback,
    materialize_student,
    merge_block,
    merge_branch,
)
from .tensor import Tensor, stop_gradient
from .train import (
    GapSummary,
    TrainConfig,
    TrainRecord,
    evaluate,
    track_gap,
    train,
    train_step,
)

__version__ = "0.1.0"
