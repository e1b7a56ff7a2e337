"""Structured pruning of attention heads and feed-forward units in a small
transformer span-extraction model, built on a numpy autodiff core."""

from .autodiff import Tensor, finite_difference_check, matmul, no_grad
from .benchmark import LatencyResult, benchmark_latency
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import SyntheticTaskConfig, generate_synthetic_task, load_jsonl, save_jsonl
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, NonFiniteError, TrainingDivergedError
from .gates import (
    GateTrainConfig,
    HardConcreteGates,
    ImportanceScores,
    PenaltyWeights,
    finalize_gates,
    finalize_mask,
    gain_scores,
    random_gates,
    threshold_scores,
    train_gates_l0,
)
from .optim import Adam
from .pipeline import PipelineConfig, PruneReport, StageError, emit_report, run_pipeline
from .surgery import prune, prune_attention, prune_feedforward, round_sizes, verify_equivalence
from .training import TrainConfig, distill, distillation_loss, retrain, train_task
from .transformer import (
    GateMask,
    Model,
    QaBatch,
    TransformerConfig,
    build_model,
    count_flops,
    count_params,
    evaluate,
    forward,
    qa_loss,
)

__version__ = "0.1.0"
