"""AUC reporting under the fine-tune / no-fine-tune protocols, plus sweeps."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import inference
from .data import TaskCollection, TaskDataset, cohort_slice
from .embedgen import embed_task
from .metrics import auc, auc_gain
from .networks import GLOBAL, MlpNetwork, ModelBundle, SplitNetwork, task_loss
from .numcore import ParamSet, adapt, as_variables

MODES = ("no-fine-tune", "fine-tune")


@dataclass(frozen=True)
class EvalProtocol:
    """How test scores are produced.

    ``fine-tune``: per task, start from the trained parameters, take ``k``
    steps with step size ``alpha`` on the task's validation samples, score
    its test samples. For split networks only the meta block adapts and the
    pooled embedding (``pooling``) feeds the global block. ``no-fine-tune``
    is the same with zero steps.
    """

    mode: str = "fine-tune"
    k: int = 1
    alpha: float = 0.1
    pooling: str = "latest"
    cohort_threshold: int = 25

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k < 0 or self.alpha < 0:
            raise ValueError("k and alpha must be >= 0")

    @property
    def steps(self) -> int:
        return self.k if self.mode == "fine-tune" else 0


@dataclass
class EvalReport:
    overall_auc: float | None
    cohort_aucs: dict[str, float | None]
    cohort_counts: dict[str, int]
    gain_rel: float | None = None
    gain_abs: float | None = None
    seed: int = 0
    unadapted_tasks: int = 0
    scores: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    labels: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def with_baseline(self, baseline_auc: float) -> "EvalReport":
        if self.overall_auc is not None:
            self.gain_rel, self.gain_abs = auc_gain(self.overall_auc, baseline_auc)
        return self

    def same_as(self, other: "EvalReport") -> bool:
        return (
            self.overall_auc == other.overall_auc
            and self.cohort_aucs == other.cohort_aucs
            and self.cohort_counts == other.cohort_counts
            and list(self.scores) == list(other.scores)
            and all(np.array_equal(self.scores[k], other.scores[k]) for k in self.scores)
        )


def _unpack(model):
    if isinstance(model, ModelBundle):
        return model.network, model.params
    network, params = model
    return network, params


def finetune_all(network, params: ParamSet, key: str, rows: TaskDataset, k: int, alpha: float) -> ParamSet:
    """k full-batch gradient steps on every parameter (eval mode)."""
    if k == 0 or len(rows) == 0:
        return params

    def loss_fn(p, _step):
        return task_loss(network, p, key, rows.meta, rows.other, rows.labels)

    adapted = adapt(loss_fn, as_variables(params), alpha, k, create_graph=False)
    return ParamSet({n: v.value for n, v in adapted.items()})


def mlp_probabilities(network: MlpNetwork, params: Mapping, meta, other) -> np.ndarray:
    x = np.concatenate([meta, other], axis=1)
    return inference.mlp_forward(network.spec.to_dict(), params, x).ravel()


def split_probabilities(network: SplitNetwork, params: Mapping, embedding: np.ndarray, meta, other) -> np.ndarray:
    """Global-block probabilities with one stored (float32) embedding for all rows."""
    rows = np.asarray(other).shape[0]
    emb = np.broadcast_to(np.asarray(embedding, dtype=np.float32).astype(np.float64), (rows, network.embed_dim))
    theta_global = {k: v for k, v in params.items() if k.startswith(GLOBAL)}
    return inference.global_scores(network.global_spec.to_dict(), theta_global, emb, meta, other, network.meta_to_global)


def task_embedding(network: SplitNetwork, params: ParamSet, key: str, recent: TaskDataset | None, protocol: EvalProtocol) -> np.ndarray | None:
    """The float32 embedding evaluation uses for one task (None: no recent data)."""
    if recent is None or len(recent) == 0:
        return None
    return embed_task(network, params, key, recent, protocol.steps, protocol.alpha, protocol.pooling).astype(np.float32)


def score_task(model, protocol: EvalProtocol, recent: TaskDataset | None, test: TaskDataset) -> tuple[np.ndarray, bool]:
    """Test-sample probabilities for one task and whether adaptation data existed."""
    network, params = _unpack(model)
    key = test.task_key
    if isinstance(network, SplitNetwork):
        emb = task_embedding(network, params, key, recent, protocol)
        adapted = emb is not None
        if emb is None:
            emb = np.zeros(network.embed_dim, dtype=np.float32)
        return split_probabilities(network, params, emb, test.meta, test.other), adapted
    adapted = recent is not None and len(recent) > 0
    p = finetune_all(network, params, key, recent, protocol.steps, protocol.alpha) if adapted else params
    return mlp_probabilities(network, p, test.meta, test.other), adapted


def _pooled_auc(keys, scores, labels) -> float | None:
    if not keys:
        return None
    return auc(np.concatenate([scores[k] for k in keys]), np.concatenate([labels[k] for k in keys]))


def evaluate(model, protocol: EvalProtocol, validation: TaskCollection | None, test: TaskCollection, *, baseline_auc: float | None = None, seed: int = 0) -> EvalReport:
    """Score every test task under ``protocol`` and report pooled AUCs.

    Cohorts split test tasks by their test sample count at
    ``protocol.cohort_threshold`` (``small`` below it, ``large`` at or above).
    The trained parameters are never modified.
    """
    if protocol.mode == "fine-tune" and validation is None:
        raise ValueError("fine-tune evaluation needs a validation collection")
    scores: dict[str, np.ndarray] = {}
    labels: dict[str, np.ndarray] = {}
    unadapted = 0
    for key, t in test.items():
        if len(t) == 0:
            continue
        recent = validation.get(key) if validation is not None else None
        s, adapted = score_task(model, protocol, recent, t)
        unadapted += not adapted
        scores[key] = s
        labels[key] = t.labels
    small, large = cohort_slice(test.filter(lambda t: t.task_key in scores), protocol.cohort_threshold)
    report = EvalReport(
        overall_auc=_pooled_auc(list(scores), scores, labels),
        cohort_aucs={"small": _pooled_auc(list(small), scores, labels), "large": _pooled_auc(list(large), scores, labels)},
        cohort_counts={"small": len(small), "large": len(large)},
        seed=seed,
        unadapted_tasks=unadapted,
        scores=scores,
        labels=labels,
    )
    if baseline_auc is not None:
        report.with_baseline(baseline_auc)
    return report


def cohort_auc(report: EvalReport, test: TaskCollection, threshold: int) -> tuple[float | None, float | None]:
    """Re-slice an existing report's scores at another threshold."""
    small, large = cohort_slice(test.filter(lambda t: t.task_key in report.scores), threshold)
    return _pooled_auc(list(small), report.scores, report.labels), _pooled_auc(list(large), report.scores, report.labels)


# ------------------------------------------------------------------ reports

GAIN_COLUMNS = (
    ("vanilla", "no-fine-tune"),
    ("vanilla", "fine-tune"),
    ("maml", "no-fine-tune"),
    ("maml", "fine-tune"),
    ("limaml", "no-fine-tune"),
    ("limaml", "fine-tune"),
)


def _fmt_gain(value: float | None, baseline: float | None) -> str:
    if value is None or baseline is None:
        return "n/a"
    rel, _ = auc_gain(value, baseline)
    return f"{rel:+.2f}%"


def aligned(rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned text table, two spaces between columns."""
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def gain_table(reports: Mapping[tuple[str, str], EvalReport], baseline=("vanilla", "no-fine-tune"), threshold: int = 25) -> tuple[str, str]:
    """(aligned text, CSV) of relative AUC gains per cohort and algorithm column.

    The baseline column prints ``baseline``; missing columns print ``n/a``.
    CSV columns: cohort, algorithm, fine_tune, auc, gain_pct, gain_abs, tasks.
    """
    base = reports.get(baseline)
    cohorts = [
        ("all", "All tasks in test data"),
        ("small", f"Tasks with fewer than {threshold} samples"),
        ("large", f"Tasks with {threshold} or more samples"),
    ]
    cols = [c for c in GAIN_COLUMNS if c in reports]

    def value(rep: EvalReport, cohort: str):
        return rep.overall_auc if cohort == "all" else rep.cohort_aucs.get(cohort)

    header = ["cohort"] + [f"{a}/{'yes' if m == 'fine-tune' else 'no'}" for a, m in cols]
    rows = [header]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cohort", "algorithm", "fine_tune", "auc", "gain_pct", "gain_abs", "tasks"])
    for cohort, label in cohorts:
        line = [label]
        b = value(base, cohort) if base is not None else None
        for col in cols:
            rep = reports[col]
            v = value(rep, cohort)
            line.append("baseline" if col == baseline else _fmt_gain(v, b))
            tasks = sum(rep.cohort_counts.values()) if cohort == "all" else rep.cohort_counts.get(cohort, 0)
            rel, ab = auc_gain(v, b) if (v is not None and b is not None) else ("", "")
            w.writerow([cohort, col[0], "yes" if col[1] == "fine-tune" else "no", "" if v is None else repr(v), rel if rel == "" else repr(rel), ab if ab == "" else repr(ab), tasks])
        rows.append(line)
    return aligned(rows), buf.getvalue()


# ------------------------------------------------------------------- sweeps

SWEEP_PARAMS = ("inner_steps", "dropout", "task_lr", "global_lr", "pooling")


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple
    replicates: int = 1
    base_seed: int = 0

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}")
        if len(self.values) < 2:
            raise ValueError("a sweep needs at least two values")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    def seed(self, value_index: int, replicate: int) -> int:
        # common random numbers: every value of a replicate shares init and sampling
        return self.base_seed * 10007 + replicate


@dataclass(frozen=True)
class Baseline:
    """Reference run the gain columns are measured against."""

    auc: float
    seconds: float


@dataclass
class SweepRow:
    value: object
    replicate: int
    seed: int
    auc: float | None = None
    seconds: float | None = None
    status: str = "ok"
    error: str = ""


@dataclass
class SweepResult:
    spec: SweepSpec
    rows: list[SweepRow]
    baseline: Baseline | None = None

    def summary(self) -> list[dict]:
        """Per value: mean/stdev AUC, mean wall time, gains vs the baseline."""
        out = []
        for v in self.spec.values:
            ok = [r for r in self.rows if r.value == v and r.status == "ok" and r.auc is not None]
            item = {"value": v, "runs": len(ok), "auc": None, "auc_std": None, "seconds": None,
                    "auc_gain_pct": None, "auc_gain_abs": None, "time_increase_pct": None}
            if ok:
                aucs = np.array([r.auc for r in ok])
                secs = float(np.mean([r.seconds for r in ok]))
                item.update(auc=float(aucs.mean()), auc_std=float(aucs.std()), seconds=secs)
                if self.baseline is not None:
                    item["auc_gain_pct"], item["auc_gain_abs"] = auc_gain(item["auc"], self.baseline.auc)
                    item["time_increase_pct"] = (secs - self.baseline.seconds) / self.baseline.seconds * 100.0
            out.append(item)
        return out

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["param", "value", "replicate", "seed", "auc", "seconds", "status", "error"])
        for r in self.rows:
            w.writerow([self.spec.param, r.value, r.replicate, r.seed, "" if r.auc is None else repr(r.auc),
                        "" if r.seconds is None else repr(r.seconds), r.status, r.error])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["value", "runs", "auc", "auc_std", "seconds", "auc_gain_pct", "auc_gain_abs", "time_increase_pct"]
        w.writerow(cols)
        for item in self.summary():
            w.writerow(["" if item[c] is None else (repr(item[c]) if isinstance(item[c], float) else item[c]) for c in cols])
        return buf.getvalue()

    def table(self, include_time: bool = True) -> str:
        """Aligned text: value, train time increase, test AUC gain."""
        head = [self.spec.param]
        if include_time:
            head.append("train time increase")
        head.append("test AUC gain")
        rows = [head]
        if self.baseline is not None:
            rows.append(["baseline"] + (["baseline"] if include_time else []) + ["baseline"])
        for item in self.summary():
            line = [str(item["value"])]
            if include_time:
                t = item["time_increase_pct"]
                line.append("n/a" if t is None else f"{t:+.2f}%")
            g = item["auc_gain_pct"]
            if g is None:
                line.append("n/a" if item["auc"] is None else f"auc {item['auc']:.4f}")
            else:
                line.append(f"{g:+.2f}%")
            rows.append(line)
        return aligned(rows)


def apply_sweep_value(param: str, value, config, protocol: EvalProtocol):
    """(train config, eval protocol) with one swept value applied.

    Inner steps and the task learning rate drive both the inner loop and
    test-time fine-tuning, so a model is always adapted the way it was trained.
    """
    from dataclasses import replace

    if param == "inner_steps":
        return config.replace(inner_steps=int(value)), replace(protocol, k=int(value))
    if param == "dropout":
        return config.replace(dropout=float(value)), protocol
    if param == "task_lr":
        return config.replace(alpha=float(value)), replace(protocol, alpha=float(value))
    if param == "global_lr":
        return config.replace(beta=float(value)), protocol
    if param == "pooling":
        return config, replace(protocol, pooling=str(value))
    raise ValueError(f"unknown sweep parameter {param!r}")


def run_sweep(spec: SweepSpec, config, datasets, model_factory, protocol: EvalProtocol = EvalProtocol(), baseline: Baseline | None = None, on_run=None) -> SweepResult:
    """One LiMAML train + evaluate per value per replicate.

    ``datasets`` is (training tasks split into support/query, validation,
    test). ``model_factory(seed)`` returns a fresh ModelBundle. A failed run is
    recorded with its error and the sweep moves on. ``seconds`` is training
    wall time only.
    """
    from .training import limaml_train

    train, validation, test = datasets
    rows = []
    for vi, value in enumerate(spec.values):
        for r in range(spec.replicates):
            seed = spec.seed(vi, r)
            row = SweepRow(value, r, seed)
            try:
                cfg, proto = apply_sweep_value(spec.param, value, config.replace(seed=seed), protocol)
                t0 = time.perf_counter()
                bundle, _ = limaml_train(train, model_factory(seed), cfg)
                row.seconds = time.perf_counter() - t0
                row.auc = evaluate(bundle, proto, validation, test, seed=seed).overall_auc
            except Exception as exc:  # recorded, sweep continues
                row.status = "failed"
                row.error = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            if on_run is not None:
                on_run(row)
    return SweepResult(spec, rows, baseline)
