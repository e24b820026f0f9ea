"""Offline meta-embedding generation.

For every task: start from the trained meta block, take ``k`` gradient
steps on the task's recent samples (loss through the full network, global
block frozen), run the adapted meta block over those samples and pool the
per-sample outputs into one fixed-size vector.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DAY, TaskCollection, TaskDataset, date_to_epoch
from .networks import META, ModelBundle, SplitNetwork, task_loss
from .numcore import NonFiniteError, ParamSet, adapt, as_variables, no_grad
from .numcore import graph as G

log = logging.getLogger(__name__)

POOLING = ("latest", "max", "mean", "cos")


@dataclass(frozen=True)
class EmbedGenConfig:
    k: int = 1
    alpha: float = 0.1
    window_days: int = 30
    pooling: str = "latest"
    version: str = "2024-04-30"
    min_samples: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.window_days < 1:
            raise ValueError("window_days must be >= 1")
        if self.pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        date_to_epoch(self.version)

    @property
    def as_of(self) -> int:
        """Last second of the version date (UTC)."""
        return date_to_epoch(self.version) + DAY - 1


@dataclass(frozen=True)
class MetaEmbedding:
    task_key: str
    vector: np.ndarray
    version: str
    sample_count_used: int


@dataclass
class GenerationResult:
    embeddings: list[MetaEmbedding] = field(default_factory=list)
    skipped: int = 0
    failed: int = 0

    def __iter__(self):
        return iter(self.embeddings)

    def __len__(self) -> int:
        return len(self.embeddings)


def select_window(task: TaskDataset, window_days: int, as_of: int) -> TaskDataset:
    """Samples with timestamp in ``(as_of - window, as_of]``, oldest first."""
    if window_days < 1:
        raise ValueError("window_days must be >= 1")
    lo = as_of - window_days * DAY
    return task.select((task.timestamps > lo) & (task.timestamps <= as_of))


def pool(embeddings: Sequence[np.ndarray], mode: str) -> np.ndarray:
    """Combine per-sample embeddings (oldest first, last = latest)."""
    if len(embeddings) == 0:
        raise ValueError("nothing to pool")
    E = np.asarray([np.asarray(e, dtype=np.float64) for e in embeddings]) if not isinstance(embeddings, np.ndarray) else np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError("embeddings must all have the same length")
    latest = E[-1]
    if mode == "latest":
        return latest.copy()
    if mode == "max":
        return E.max(axis=0)
    if mode == "mean":
        return E.mean(axis=0)
    if mode == "cos":
        norms = np.linalg.norm(E, axis=1)
        ln = norms[-1]
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where((norms > 0) & (ln > 0), (E @ latest) / (norms * ln), 0.0)
        w = np.maximum(cos, 0.0)
        total = w.sum()
        if total == 0.0:
            return latest.copy()
        return (w[:, None] * E).sum(axis=0) / total
    raise ValueError(f"unknown pooling {mode!r}")


def finetune_meta(network: SplitNetwork, params: ParamSet, key: str, rows: TaskDataset, k: int, alpha: float) -> ParamSet:
    """k full-batch gradient steps on the meta block only (eval mode)."""
    if k == 0 or len(rows) == 0:
        return params

    def loss_fn(p, _step):
        return task_loss(network, p, key, rows.meta, rows.other, rows.labels)

    adapted = adapt(loss_fn, as_variables(params), alpha, k, keys=network.adapt_keys(params), create_graph=False)
    return ParamSet({name: node.value for name, node in adapted.items()})


def meta_outputs(network: SplitNetwork, params: ParamSet, key: str, meta: np.ndarray) -> np.ndarray:
    with no_grad():
        consts = {k: G.constant(v) for k, v in params.items() if k.startswith(META)}
        return network.meta_block.embed(consts, key, meta).value


def embed_task(network: SplitNetwork, params: ParamSet, key: str, rows: TaskDataset, k: int, alpha: float, pooling: str) -> np.ndarray:
    """Fine-tune on ``rows`` then pool the adapted meta block's outputs (float64)."""
    adapted = finetune_meta(network, params, key, rows, k, alpha)
    return pool(meta_outputs(network, adapted, key, rows.meta), pooling)


_GEN_STATE: dict = {}


def _gen_one(key: str):
    st = _GEN_STATE
    rows = st["rows"][key]
    cfg: EmbedGenConfig = st["config"]
    try:
        vec = embed_task(st["network"], st["params"], key, rows, cfg.k, cfg.alpha, cfg.pooling)
    except NonFiniteError as exc:
        return key, None, str(exc)
    if not np.all(np.isfinite(vec)):
        return key, None, "non-finite embedding"
    return key, vec.astype(np.float32), None


def _gen_shard(keys):
    return [_gen_one(k) for k in keys]


def generate_embeddings(tasks: TaskCollection, bundle: ModelBundle, config: EmbedGenConfig, as_of: int | None = None) -> GenerationResult:
    """One embedding per task with at least ``min_samples`` recent samples.

    The bundle's parameters are never modified. Output is sorted by task key
    and identical for any worker count.
    """
    as_of = config.as_of if as_of is None else as_of
    rows = {}
    result = GenerationResult()
    for key, task in tasks.items():
        window = select_window(task, config.window_days, as_of)
        if len(window) < config.min_samples or len(window) == 0:
            result.skipped += 1
            continue
        rows[key] = window
    _GEN_STATE.clear()
    _GEN_STATE.update(rows=rows, network=bundle.network, params=bundle.params, config=config)
    keys = sorted(rows)
    try:
        if config.workers > 1 and len(keys) > 1:
            shards = [list(s) for s in np.array_split(np.array(keys, dtype=object), config.workers)]
            with mp.get_context("fork").Pool(config.workers) as p:
                outs = [item for part in p.map(_gen_shard, shards) for item in part]
        else:
            outs = _gen_shard(keys)
    finally:
        _GEN_STATE.clear()
    for key, vec, err in outs:
        if vec is None:
            log.warning("task %s skipped: %s", key, err)
            result.failed += 1
            continue
        result.embeddings.append(MetaEmbedding(key, vec, config.version, len(rows[key])))
    return result
