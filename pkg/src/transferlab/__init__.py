"""transferlab: craft and evaluate transferable adversarial examples.

Train grid-structured multi-head proxy networks next to standard baselines,
attack them with sign-gradient methods under an L-infinity budget, and
measure attack success against black-box targets — with reproducible data
handling, content-addressed caching, and file-based records throughout.
"""

__version__ = "0.1.0"

from .attacks import AdversarialBatch, AttackConfig, bim, fgsm, input_gradient, project_linf
from .data import (
    DatasetSplit,
    ImageBatch,
    LabelBatch,
    load_cifar10,
    make_batches,
    subsample,
)
from .diagnostics import (
    CostReport,
    FiniteDifferenceReport,
    GradientChainDecomposition,
    finite_difference_check,
    gradient_chain_decomposition,
    profile_cost,
)
from .evaluation import (
    ASRMatrix,
    ASRRecord,
    SweepSpec,
    attack_success_rate,
    select_best,
    sweep_and_select,
    transfer_matrix,
)
from .models import (
    HeadSelector,
    MultiTrackConfig,
    MultiTrackNet,
    build_baseline,
    build_from_config,
    build_multitrack,
    ensemble_log_probs,
    forward_heads,
    model_stats,
)
from .training import (
    TrainConfig,
    TrainingLog,
    evaluate_accuracy,
    load_checkpoint,
    multi_head_loss,
    save_checkpoint,
    train,
)

__all__ = [
    "AdversarialBatch",
    "ASRMatrix",
    "ASRRecord",
    "AttackConfig",
    "CostReport",
    "DatasetSplit",
    "FiniteDifferenceReport",
    "GradientChainDecomposition",
    "HeadSelector",
    "ImageBatch",
    "LabelBatch",
    "MultiTrackConfig",
    "MultiTrackNet",
    "SweepSpec",
    "TrainConfig",
    "TrainingLog",
    "attack_success_rate",
    "bim",
    "build_baseline",
    "build_from_config",
    "build_multitrack",
    "ensemble_log_probs",
    "evaluate_accuracy",
    "fgsm",
    "finite_difference_check",
    "forward_heads",
    "gradient_chain_decomposition",
    "input_gradient",
    "load_checkpoint",
    "load_cifar10",
    "make_batches",
    "model_stats",
    "multi_head_loss",
    "profile_cost",
    "project_linf",
    "save_checkpoint",
    "select_best",
    "subsample",
    "sweep_and_select",
    "train",
    "transfer_matrix",
]
