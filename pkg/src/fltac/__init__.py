"""Deterministic federated fine-tuning simulator.

Clients fine-tune one low-rank adapter per local task; the server clusters
the anonymous uploads, averages within each cluster, and writes the result
back.  A small rank sweep quantifies why per-task adapters beat one shared
adapter at equal total rank.
"""

from .cli import build_experiment, per_task_losses
from .client import ClientState, Upload, group_shards, init_client
from .config import (ExperimentConfig, load_experiment, load_sweep,
                     save_experiment, save_sweep)
from .data import (Shard, TaskSpec, blob_task, dirichlet_partition,
                   generate_task, sinusoid_task)
from .errors import (ConfigError, InfeasibleError, NumericError,
                     ParameterError, PartitionError, ProtocolError,
                     ShapeError)
from .metrics import RoundRecord, cluster_accuracy, project_2d, purity
from .model import (Adapter, BaseModel, batch_loss, flatten, forward,
                    init_adapter, init_base_model, load_adapter,
                    loss_and_grad, save_adapter, unflatten)
from .numeric import Rng
from .server import (Clustering, RoundResult, aggregate, cluster_uploads,
                     kmeans, run_round, select_clients)
from .toy_sim import (SweepConfig, aggregate_sweep, default_sweep_config,
                      run_sweep)

__version__ = "0.1.0"

__all__ = [
    "Adapter", "BaseModel", "ClientState", "Clustering", "ConfigError",
    "ExperimentConfig", "InfeasibleError", "NumericError", "ParameterError",
    "PartitionError", "ProtocolError", "Rng", "RoundRecord", "RoundResult",
    "Shard", "ShapeError", "SweepConfig", "TaskSpec", "Upload",
    "aggregate", "aggregate_sweep", "batch_loss", "blob_task",
    "build_experiment", "cluster_accuracy", "cluster_uploads",
    "default_sweep_config", "dirichlet_partition", "flatten", "forward",
    "generate_task", "group_shards", "init_adapter", "init_base_model",
    "init_client", "kmeans", "load_adapter", "load_experiment", "load_sweep",
    "loss_and_grad", "per_task_losses", "project_2d", "purity", "run_round",
    "run_sweep",
    "save_adapter", "save_experiment", "save_sweep", "select_clients",
    "sinusoid_task", "unflatten",
]
