"""Vanilla task-batch training, entire-network MAML and two-block LiMAML."""
from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..data import TaskCollection, TaskDataset
from ..metrics import auc
from ..networks import GLOBAL, META, MlpNetwork, ModelBundle, SplitNetwork, task_loss
from ..numcore import MlpSpec, NonFiniteError, ParamSet, as_variables, grad, meta_gradient_fn, no_grad
from ..numcore import graph as G
from .config import TrainConfig
from .optim import Adam, clip_gradients, lr_schedule
from .parallel import ShardPool, parallel_outer_step

log = logging.getLogger(__name__)

QUERY_PHASE = 1


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    total_seconds: float = 0.0
    final_params: ParamSet | None = None
    final_query_auc: float | None = None
    skipped_tasks: int = 0

    def metrics_rows(self) -> list[dict]:
        return [
            {"step": i, "loss": l, "lr": lr, "grad_norm": g, "wall_ms": w}
            for i, (l, lr, g, w) in enumerate(zip(self.losses, self.lrs, self.grad_norms, self.wall_ms))
        ]


def task_rng(seed: int, step: int, key: str, phase: int) -> np.random.Generator:
    """Dropout stream for one task in one step and phase."""
    return np.random.default_rng([seed, step, zlib.crc32(key.encode("utf-8")), phase])


class TaskSampler:
    """Batches of task keys, without replacement inside an epoch."""

    def __init__(self, keys: Sequence[str], batch_size: int, seed: int):
        self.keys = sorted(keys)
        self.batch_size = batch_size
        self.seed = seed
        self._epoch = 0
        self._queue: list[str] = []

    def next_batch(self) -> list[str]:
        if not self._queue:
            order = np.random.default_rng([self.seed, self._epoch]).permutation(len(self.keys))
            self._queue = [self.keys[i] for i in order]
            self._epoch += 1
        batch, self._queue = self._queue[: self.batch_size], self._queue[self.batch_size :]
        return batch


def _has_dropout(network) -> bool:
    if isinstance(network, MlpNetwork):
        return any(network.spec.dropout)
    specs = [network.global_spec] + ([network.meta_block.spec] if hasattr(network.meta_block, "spec") else [])
    return any(any(s.dropout) for s in specs)


def with_dropout(network, rate: float):
    """Same architecture with dropout ``rate`` after every hidden layer."""
    if isinstance(network, MlpNetwork):
        return MlpNetwork(network.spec.with_dropout(rate), network.meta_dim, network.other_dim)
    block = network.meta_block
    if hasattr(block, "spec"):
        block = type(block)(block.spec.with_dropout(rate))
    return SplitNetwork(block, network.global_spec.with_dropout(rate), network.meta_dim, network.other_dim, network.meta_to_global)


@dataclass
class VanillaStep:
    """Plain gradient of a task's mean loss over all its samples."""

    network: object
    params: ParamSet
    seed: int
    step: int
    dropout: bool

    def __call__(self, task: TaskDataset):
        rng = task_rng(self.seed, self.step, task.task_key, QUERY_PHASE) if self.dropout else None
        leaves = as_variables(self.params)
        loss = task_loss(self.network, leaves, task.task_key, task.meta, task.other, task.labels, train=True, rng=rng)
        names = list(self.params)
        grads = grad(loss, [leaves[k] for k in names])
        return ParamSet({k: g.value for k, g in zip(names, grads)}), float(loss.value)


@dataclass
class MetaStep:
    """Meta-gradient of one task: adapt on support, differentiate query loss."""

    network: object
    params: ParamSet
    alpha: float
    inner_steps: int
    seed: int
    step: int
    dropout: bool
    global_grad_source: str = "adapted"

    def __call__(self, task: TaskDataset):
        net, key = self.network, task.task_key
        s, q = task.support(), task.query()

        def rng(phase):
            return task_rng(self.seed, self.step, key, phase) if self.dropout else None

        def support_loss(p, j):
            return task_loss(net, p, key, s.meta, s.other, s.labels, train=True, rng=rng(QUERY_PHASE + 1 + j))

        def query_loss(p, _):
            return task_loss(net, p, key, q.meta, q.other, q.labels, train=True, rng=rng(QUERY_PHASE))

        adapt_keys = net.adapt_keys(self.params)
        grads, loss = meta_gradient_fn(self.params, support_loss, query_loss, self.alpha, self.inner_steps, adapt_keys)
        if self.global_grad_source == "shared" and isinstance(net, SplitNetwork):
            leaves = {k: (G.variable(v) if k.startswith(GLOBAL) else G.constant(v)) for k, v in self.params.items()}
            gnames = [k for k in self.params if k.startswith(GLOBAL)]
            gg = grad(query_loss(leaves, None), [leaves[k] for k in gnames])
            grads = grads.merged({k: g.value for k, g in zip(gnames, gg)})
        return grads, loss


def _eligible(tasks, need_split: bool) -> list[TaskDataset]:
    items = tasks.values() if isinstance(tasks, TaskCollection) else tasks
    if need_split:
        out = [t for t in items if t.train_eligible]
    else:
        out = [t for t in items if len(t) > 0]
    return out


def _run(network, params: ParamSet, tasks: list[TaskDataset], config: TrainConfig, make_step, trainable, on_step=None):
    if not tasks:
        raise ValueError("no train-eligible tasks")
    by_key = {t.task_key: t for t in tasks}
    sampler = TaskSampler(list(by_key), config.tasks_per_batch, config.seed)
    adam = Adam()
    report = TrainReport()
    shapes = params.shapes
    start = time.perf_counter()
    with ShardPool(by_key, config.workers) as pool:
        for step in range(config.total_steps):
            t0 = time.perf_counter()
            batch = sampler.next_batch()
            lr = lr_schedule(step, config)
            try:
                summed, losses = parallel_outer_step(batch, config.workers, make_step(params, step), shapes, pool)
            except NonFiniteError as exc:
                raise DivergenceError(step, str(exc)) from exc
            loss = float(np.mean([losses[k] for k in sorted(losses)]))
            if not np.isfinite(loss):
                raise DivergenceError(step, "non-finite loss")
            norm = summed.global_norm()
            if config.clip_norm is not None:
                summed = clip_gradients(summed, config.clip_norm)
            try:
                params = adam.step(params, summed, lr, trainable)
            except NonFiniteError as exc:
                raise DivergenceError(step, str(exc)) from exc
            wall = (time.perf_counter() - t0) * 1e3
            report.losses.append(loss)
            report.lrs.append(lr)
            report.grad_norms.append(norm)
            report.wall_ms.append(wall)
            if on_step is not None:
                on_step({"step": step, "loss": loss, "lr": lr, "grad_norm": norm, "wall_ms": wall})
        pool.close()
    report.total_seconds = time.perf_counter() - start
    report.final_params = params
    report.final_query_auc = query_auc(network, params, tasks)
    return params, report


def query_auc(network, params: ParamSet, tasks: Sequence[TaskDataset]) -> float | None:
    """Pooled AUC of the shared model on every task's query samples."""
    scores, labels = [], []
    with no_grad():
        consts = {k: G.constant(v) for k, v in params.items()}
        for t in tasks:
            q = t.query()
            if len(q) == 0:
                continue
            z = network.logits(consts, t.task_key, q.meta, q.other).value.ravel()
            scores.append(G._sigmoid_value(z))
            labels.append(q.labels)
    if not scores:
        return None
    return auc(np.concatenate(scores), np.concatenate(labels))


def _as_network(model, tasks) -> object:
    if isinstance(model, MlpSpec):
        if not isinstance(tasks, TaskCollection):
            raise TypeError("an MlpSpec needs a TaskCollection to know the feature split")
        return MlpNetwork(model, tasks.meta_dim, tasks.other_dim)
    if isinstance(model, ModelBundle):
        return model.network
    return model


def _initial(network, model, config: TrainConfig, init: ParamSet | None) -> ParamSet:
    if init is not None:
        return init
    if isinstance(model, ModelBundle):
        return model.params
    return network.init(np.random.default_rng(config.seed))


def vanilla_train(tasks, model, config: TrainConfig, init: ParamSet | None = None, on_step: Callable | None = None):
    """Adam on task mini-batches; every sample of a task is training data.

    ``model`` is an MlpSpec, a network, or a ModelBundle (whose parameters
    are the starting point). Returns (params, report).
    """
    network = _as_network(model, tasks)
    if config.dropout > 0:
        network = with_dropout(network, config.dropout)
    params = _initial(network, model, config, init)
    network.check(params)
    drop = _has_dropout(network)

    def make_step(p, step):
        return VanillaStep(network, p, config.seed, step, drop)

    return _run(network, params, _eligible(tasks, need_split=False), config, make_step, None, on_step)


def meta_eligible(tasks, inner_steps: int, warn: bool = False) -> list[TaskDataset]:
    """Tasks a meta-trainer can use: a non-empty query set, and a support set when adapting."""
    out = []
    for t in (tasks.values() if isinstance(tasks, TaskCollection) else tasks):
        if len(t.query()) == 0 or (inner_steps > 0 and t.support_end == 0):
            if warn:
                log.warning("skipping task %s: empty support or query set", t.task_key)
            continue
        out.append(t)
    return out


def training_tasks(tasks, algorithm: str, inner_steps: int = 0) -> list[TaskDataset]:
    """The task list a trainer iterates over (and reports its query AUC on)."""
    if algorithm == "vanilla":
        return _eligible(tasks, need_split=False)
    return meta_eligible(tasks, inner_steps)


def _meta_train(network, params, tasks, config, on_step):
    network.check(params)
    drop = _has_dropout(network)
    eligible = meta_eligible(tasks, config.inner_steps, warn=True)
    trainable = None
    if config.freeze_meta:
        trainable = {k for k in params if not k.startswith(META)}

    def make_step(p, step):
        return MetaStep(network, p, config.alpha, config.inner_steps, config.seed, step, drop, config.global_grad_source)

    params, report = _run(network, params, eligible, config, make_step, trainable, on_step)
    report.skipped_tasks = len(tasks) - len(eligible)
    return params, report


def maml_train(tasks, model, config: TrainConfig, init: ParamSet | None = None, on_step: Callable | None = None):
    """Second-order MAML over the entire network. Returns (params, report)."""
    network = _as_network(model, tasks)
    if config.dropout > 0:
        network = with_dropout(network, config.dropout)
    return _meta_train(network, _initial(network, model, config, init), tasks, config, on_step)


def limaml_train(tasks, bundle: ModelBundle, config: TrainConfig, on_step: Callable | None = None):
    """Meta-learn the meta block, train the global block on the same query losses.

    The inner loop adapts only the meta block. The outer update uses the
    second-order gradient for the meta block and the partial gradient for
    the global block. Returns (new bundle, report).
    """
    network = bundle.network
    if config.dropout > 0:
        network = with_dropout(network, config.dropout)
    params, report = _meta_train(network, bundle.params, tasks, config, on_step)
    return ModelBundle(network, params), report
