"""Forgetting-aware pruning of task vectors between model checkpoints."""

__version__ = "0.1.0"

from .criteria import (
    ColumnNorms,
    Criterion,
    avg_abs,
    score_fapm,
    score_magnitude,
    score_random,
    score_relative,
    score_wanda,
)
from .masking import PruneMask, Scope, apply_mask, keep_count, select_global, select_topk
from .pipelines import (
    BasePolicy,
    OneDimPolicy,
    PruneConfig,
    RunReport,
    lora_prune_merge,
    prune_merge,
    sequential_merge,
    sweep,
    wise_ft,
)
from .taskvector import TaskVector, TensorFilter, apply, compose_lora, diff
from .tensorstore import Checkpoint, DType, Tensor, cast_tensor, load_checkpoint, save_checkpoint

__all__ = [
    "BasePolicy",
    "Checkpoint",
    "ColumnNorms",
    "Criterion",
    "DType",
    "OneDimPolicy",
    "PruneConfig",
    "PruneMask",
    "RunReport",
    "Scope",
    "TaskVector",
    "Tensor",
    "TensorFilter",
    "apply",
    "apply_mask",
    "avg_abs",
    "cast_tensor",
    "compose_lora",
    "diff",
    "keep_count",
    "load_checkpoint",
    "lora_prune_merge",
    "prune_merge",
    "save_checkpoint",
    "score_fapm",
    "score_magnitude",
    "score_random",
    "score_relative",
    "score_wanda",
    "select_global",
    "select_topk",
    "sequential_merge",
    "sweep",
    "wise_ft",
]
