"""fedsyn: a single-machine laboratory for one-shot federated learning.

Pipeline: Dirichlet non-iid partitioning -> independent local training ->
server-side data-free generator synthesis against the uploaded ensemble ->
distillation of the average-logit teacher into a global student. A FedAvg
baseline, loss ablations, heterogeneous-architecture bundles, and a
multi-round extension are included.
"""

from .data import DatasetHandle, load_dataset
from .distillation import (
    FedSynConfig,
    RunResult,
    distill_loss,
    fedsyn_epoch,
    init_state,
    run_fedsyn,
    run_multiround,
)
from .ensemble import (
    EnsembleBundle,
    UnsupportedAggregationError,
    average_logits,
    evaluate,
    fedavg_aggregate,
    load_bundle,
    save_bundle,
)
from .generator_stage import (
    GenLossWeights,
    SyntheticBatch,
    bn_loss,
    ce_gen_loss,
    div_loss,
    gen_loss,
    generator_inner_loop,
    sample_noise_and_labels,
)
from .harness import ExperimentSpec, ReportRow, render_report, run_matrix
from .local_training import (
    LocalTrainConfig,
    local_update,
    register_local_loss,
    train_all_clients,
)
from .models import (
    BatchStatsCapture,
    ClientModel,
    GeneratorModel,
    build_generator,
    build_model,
    forward_logits,
    generate,
    load_checkpoint,
    save_checkpoint,
)
from .partition import (
    PartitionPlan,
    dirichlet_partition,
    load_plan,
    partition_summary,
    save_plan,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetHandle",
    "load_dataset",
    "PartitionPlan",
    "dirichlet_partition",
    "partition_summary",
    "save_plan",
    "load_plan",
    "ClientModel",
    "GeneratorModel",
    "BatchStatsCapture",
    "build_model",
    "build_generator",
    "forward_logits",
    "generate",
    "save_checkpoint",
    "load_checkpoint",
    "LocalTrainConfig",
    "local_update",
    "train_all_clients",
    "register_local_loss",
    "EnsembleBundle",
    "UnsupportedAggregationError",
    "average_logits",
    "fedavg_aggregate",
    "evaluate",
    "save_bundle",
    "load_bundle",
    "GenLossWeights",
    "SyntheticBatch",
    "sample_noise_and_labels",
    "ce_gen_loss",
    "bn_loss",
    "div_loss",
    "gen_loss",
    "generator_inner_loop",
    "FedSynConfig",
    "RunResult",
    "distill_loss",
    "fedsyn_epoch",
    "init_state",
    "run_fedsyn",
    "run_multiround",
    "ExperimentSpec",
    "ReportRow",
    "run_matrix",
    "render_report",
    "__version__",
]
