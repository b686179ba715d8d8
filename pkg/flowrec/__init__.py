from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import (
    DataConfig,
    ModelConfig,
    ModulationConfig,
    RunConfig,
    SamplerConfig,
    TrainConfig,
    load_config,
)
from .dataset import (
    Catalog,
    EvalGroups,
    InteractionLog,
    PreparedData,
    SequenceBatch,
    Split,
    UserSequence,
    build_sequences,
    compute_groups,
    dataset_stats,
    five_core_filter,
    ingest,
    leave_one_out,
    make_batches,
    prepare,
    read_snapshot,
    write_snapshot,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DatasetCollapsedError,
    DivergedError,
    FlowRecError,
    IncompatibleCheckpointError,
    TrainingError,
)
from .evaluation import (
    EvalReport,
    evaluate,
    hr_at_k,
    ndcg_at_k,
    popularity_baseline,
    steps_sweep,
    timing_report,
)
from .flow import (
    align_loss,
    cfm_loss,
    interpolate,
    sample_modulation,
    single_step_estimate,
    vector_field,
)
from .model import FlowRec, LossParts, ModelState, build_model, init_state
from .sampler import Trajectory, euler_integrate, read_trace, score, top_k, trace_export
from .synthetic import markov_corpus, markov_ndcg_ceiling
from .trainer import EarlyStopping, train, train_step

# Names scripts and notebooks import from the top-level package.
__all__ = [
    "align_loss",
    "build_model",
    "build_sequences",
    "Catalog",
    "cfm_loss",
    "CheckpointError",
    "compute_groups",
    "ConfigError",
    "DataConfig",
    "DataError",
    "DatasetCollapsedError",
    "dataset_stats",
    "DivergedError",
    "EarlyStopping",
    "euler_integrate",
    "evaluate",
    "EvalGroups",
    "EvalReport",
    "five_core_filter",
    "FlowRec",
    "FlowRecError",
    "hr_at_k",
    "IncompatibleCheckpointError",
    "ingest",
    "init_state",
    "InteractionLog",
    "interpolate",
    "leave_one_out",
    "load_checkpoint",
    "load_config",
    "LossParts",
    "make_batches",
    "markov_corpus",
    "markov_ndcg_ceiling",
    "ModelConfig",
    "ModelState",
    "ModulationConfig",
    "ndcg_at_k",
    "popularity_baseline",
    "prepare",
    "PreparedData",
    "read_checkpoint",
    "read_snapshot",
    "read_trace",
    "RunConfig",
    "sample_modulation",
    "SamplerConfig",
    "save_checkpoint",
    "score",
    "SequenceBatch",
    "single_step_estimate",
    "Split",
    "steps_sweep",
    "timing_report",
    "top_k",
    "trace_export",
    "train",
    "train_step",
    "TrainConfig",
    "TrainingError",
    "Trajectory",
    "UserSequence",
    "vector_field",
    "write_snapshot",
]
