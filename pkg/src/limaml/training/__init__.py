from .config import ConfigError, TrainConfig, format_config, parse_config_text, read_config_file
from .optim import Adam, clip_gradients, lr_at, lr_schedule, scale_lr
from .parallel import ShardPool, canonical_order, parallel_outer_step, shard
from .trainers import (
    DivergenceError,
    MetaStep,
    TaskSampler,
    TrainReport,
    VanillaStep,
    limaml_train,
    maml_train,
    meta_eligible,
    query_auc,
    task_rng,
    training_tasks,
    vanilla_train,
    with_dropout,
)

__all__ = [
    "Adam",
    "ConfigError",
    "DivergenceError",
    "MetaStep",
    "ShardPool",
    "TaskSampler",
    "TrainConfig",
    "TrainReport",
    "VanillaStep",
    "canonical_order",
    "clip_gradients",
    "format_config",
    "limaml_train",
    "lr_at",
    "lr_schedule",
    "maml_train",
    "meta_eligible",
    "parallel_outer_step",
    "parse_config_text",
    "query_auc",
    "read_config_file",
    "scale_lr",
    "shard",
    "task_rng",
    "training_tasks",
    "vanilla_train",
    "with_dropout",
]
