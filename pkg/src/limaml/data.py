"""Samples, tasks, file ingestion, chronological splits and synthetic tasks."""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

KEY_SEP = "|"
DAY = 86400
# synthetic timelines start here (2024-01-01T00:00:00Z)
SYNTHETIC_EPOCH = 1704067200


class DataError(ValueError):
    """Malformed input; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Sample:
    task_key: str
    timestamp: int
    label: int
    meta_features: tuple[float, ...]
    other_features: tuple[float, ...]


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _as_rows(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2 and a.shape[0] == n:
        return a
    return a.reshape(n, -1)


class TaskDataset:
    """All samples of one task, ascending by timestamp, stored column-wise.

    ``support_end`` splits the samples: ``[0, support_end)`` is the support
    set and the remainder the query set.
    """

    __slots__ = ("task_key", "timestamps", "labels", "meta", "other", "support_end")

    def __init__(self, task_key, timestamps, labels, meta, other, support_end=None, *, presorted=False):
        ts = np.asarray(timestamps, dtype=np.int64)
        n = ts.shape[0]
        meta = _as_rows(meta, n)
        other = _as_rows(other, n)
        labels = np.asarray(labels)
        if not presorted:
            order = np.argsort(ts, kind="stable")
            ts, labels, meta, other = ts[order], labels[order], meta[order], other[order]
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise DataError(f"task {task_key!r}: labels must be 0/1")
        if not (np.isfinite(meta).all() and np.isfinite(other).all()):
            raise DataError(f"task {task_key!r}: non-finite feature values")
        end = n if support_end is None else int(support_end)
        if not 0 <= end <= n:
            raise ValueError("support_end out of range")
        self.task_key = task_key
        self.timestamps = _frozen(ts, np.int64)
        self.labels = _frozen(labels, np.float64)
        self.meta = _frozen(meta, np.float64)
        self.other = _frozen(other, np.float64)
        self.support_end = end

    def __len__(self) -> int:
        return self.timestamps.shape[0]

    def __repr__(self) -> str:
        return f"TaskDataset({self.task_key!r}, n={len(self)}, support_end={self.support_end})"

    @property
    def train_eligible(self) -> bool:
        """Both a support and a query sample exist."""
        return 0 < self.support_end < len(self)

    @property
    def samples(self) -> list[Sample]:
        return [
            Sample(
                self.task_key,
                int(self.timestamps[i]),
                int(self.labels[i]),
                tuple(float(v) for v in self.meta[i]),
                tuple(float(v) for v in self.other[i]),
            )
            for i in range(len(self))
        ]

    def _slice(self, sl: slice, support_end=None) -> "TaskDataset":
        return TaskDataset(
            self.task_key,
            self.timestamps[sl],
            self.labels[sl],
            self.meta[sl],
            self.other[sl],
            support_end,
            presorted=True,
        )

    def support(self) -> "TaskDataset":
        return self._slice(slice(0, self.support_end))

    def query(self) -> "TaskDataset":
        return self._slice(slice(self.support_end, None))

    def with_support_end(self, end: int) -> "TaskDataset":
        return self._slice(slice(None), end)

    def tail(self, count: int) -> "TaskDataset":
        return self._slice(slice(max(len(self) - count, 0), None))

    def select(self, mask: np.ndarray) -> "TaskDataset":
        return TaskDataset(
            self.task_key, self.timestamps[mask], self.labels[mask], self.meta[mask],
            self.other[mask], presorted=True,
        )

    def same_as(self, other: "TaskDataset") -> bool:
        return (
            self.task_key == other.task_key
            and self.support_end == other.support_end
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("timestamps", "labels", "meta", "other")
            )
        )


class TaskCollection(Mapping[str, TaskDataset]):
    """Tasks keyed by task key (iteration is in sorted key order)."""

    def __init__(self, tasks: Iterable[TaskDataset], meta_dim: int | None = None, other_dim: int | None = None):
        by_key: dict[str, TaskDataset] = {}
        for t in tasks:
            if t.task_key in by_key:
                raise DataError(f"duplicate task key {t.task_key!r}")
            by_key[t.task_key] = t
        self._tasks = {k: by_key[k] for k in sorted(by_key)}
        dims = {(t.meta.shape[1], t.other.shape[1]) for t in self._tasks.values()}
        if len(dims) > 1:
            raise DataError(f"tasks disagree on feature dimensions: {sorted(dims)}")
        if dims:
            meta_dim, other_dim = dims.pop()
        self.meta_dim = int(meta_dim or 0)
        self.other_dim = int(other_dim or 0)

    def __getitem__(self, key: str) -> TaskDataset:
        return self._tasks[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tasks)

    def __len__(self) -> int:
        return len(self._tasks)

    def __repr__(self) -> str:
        return f"TaskCollection(N={len(self)}, samples={self.num_samples}, meta_dim={self.meta_dim}, other_dim={self.other_dim})"

    @property
    def num_samples(self) -> int:
        return sum(len(t) for t in self._tasks.values())

    def map(self, fn) -> "TaskCollection":
        return TaskCollection((fn(t) for t in self._tasks.values()), self.meta_dim, self.other_dim)

    def filter(self, pred) -> "TaskCollection":
        return TaskCollection((t for t in self._tasks.values() if pred(t)), self.meta_dim, self.other_dim)

    def same_as(self, other: "TaskCollection") -> bool:
        return list(self) == list(other) and all(self[k].same_as(other[k]) for k in self)


# ---------------------------------------------------------------- file formats


def _columns(meta_dim: int, other_dim: int) -> tuple[list[str], list[str]]:
    return [f"mf_{i}" for i in range(meta_dim)], [f"of_{i}" for i in range(other_dim)]


def _group(rows: list[tuple[int, str, int, int, list[float], list[float]]]) -> TaskCollection:
    if not rows:
        return TaskCollection([])
    dims = (len(rows[0][4]), len(rows[0][5]))
    grouped: dict[str, list] = {}
    for line, key, ts, label, mf, of in rows:
        if (len(mf), len(of)) != dims:
            raise DataError(f"feature count {(len(mf), len(of))} differs from {dims}", line)
        grouped.setdefault(key, []).append((ts, label, mf, of))
    tasks = []
    for key, items in grouped.items():
        tasks.append(
            TaskDataset(
                key,
                [r[0] for r in items],
                [r[1] for r in items],
                np.array([r[2] for r in items], dtype=np.float64).reshape(len(items), dims[0]),
                np.array([r[3] for r in items], dtype=np.float64).reshape(len(items), dims[1]),
            )
        )
    return TaskCollection(tasks, *dims)


def _task_key(values: Sequence[str], line: int) -> str:
    for v in values:
        if KEY_SEP in v:
            raise DataError(f"task key component {v!r} contains {KEY_SEP!r}", line)
        if v == "":
            raise DataError("empty task key component", line)
    return KEY_SEP.join(values)


def _parse_label(raw, line: int) -> int:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DataError(f"bad label {raw!r}", line) from None
    if value not in (0.0, 1.0):
        raise DataError(f"label must be 0 or 1, got {raw!r}", line)
    return int(value)


def _parse_ts(raw, line: int) -> int:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DataError(f"bad timestamp {raw!r}", line) from None
    if not value.is_integer():
        raise DataError(f"timestamp must be integer epoch seconds, got {raw!r}", line)
    return int(value)


def _parse_float(raw, line: int) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DataError(f"bad feature value {raw!r}", line) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite feature value {raw!r}", line)
    return value


def ingest(path, fmt: str = "delimited", task_key_columns: Sequence[str] = ("task_key",), delimiter: str = ",") -> TaskCollection:
    """Read labelled samples and group them into tasks.

    The task key joins the ``task_key_columns`` values with ``"|"``. Feature
    columns are ``mf_0..`` (meta) and ``of_0..`` (other). Errors carry the
    offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    key_cols = list(task_key_columns)
    if not key_cols:
        raise ValueError("need at least one task key column")
    rows = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        if fmt == "delimited":
            reader = csv.reader(fh, delimiter=delimiter)
            try:
                header = next(reader)
            except StopIteration:
                return TaskCollection([])
            missing = [c for c in key_cols + ["timestamp", "label"] if c not in header]
            if missing:
                raise DataError(f"missing columns {missing}", 1)
            idx = {c: i for i, c in enumerate(header)}
            mf = sorted((c for c in header if c.startswith("mf_")), key=lambda c: int(c[3:]))
            of = sorted((c for c in header if c.startswith("of_")), key=lambda c: int(c[3:]))
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise DataError(f"expected {len(header)} fields, got {len(rec)}", lineno)
                rows.append((
                    lineno,
                    _task_key([rec[idx[c]] for c in key_cols], lineno),
                    _parse_ts(rec[idx["timestamp"]], lineno),
                    _parse_label(rec[idx["label"]], lineno),
                    [_parse_float(rec[idx[c]], lineno) for c in mf],
                    [_parse_float(rec[idx[c]], lineno) for c in of],
                ))
        elif fmt == "json-lines":
            for lineno, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                try:
                    obj = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise DataError(f"invalid JSON: {exc.msg}", lineno) from None
                if not isinstance(obj, dict):
                    raise DataError("expected a JSON object", lineno)
                missing = [c for c in key_cols + ["timestamp", "label"] if c not in obj]
                if missing:
                    raise DataError(f"missing fields {missing}", lineno)
                mf = sorted((c for c in obj if c.startswith("mf_")), key=lambda c: int(c[3:]))
                of = sorted((c for c in obj if c.startswith("of_")), key=lambda c: int(c[3:]))
                rows.append((
                    lineno,
                    _task_key([str(obj[c]) for c in key_cols], lineno),
                    _parse_ts(obj["timestamp"], lineno),
                    _parse_label(obj["label"], lineno),
                    [_parse_float(obj[c], lineno) for c in mf],
                    [_parse_float(obj[c], lineno) for c in of],
                ))
        else:
            raise ValueError(f"unknown format {fmt!r}")
    return _group(rows)


def _records(tasks: TaskCollection, key_cols: Sequence[str]):
    mf, of = _columns(tasks.meta_dim, tasks.other_dim)
    for key, t in tasks.items():
        parts = key.split(KEY_SEP)
        if len(parts) != len(key_cols):
            raise DataError(f"task key {key!r} does not split into columns {list(key_cols)}")
        for i in range(len(t)):
            rec = dict(zip(key_cols, parts))
            rec["timestamp"] = int(t.timestamps[i])
            rec["label"] = int(t.labels[i])
            rec.update(zip(mf, (float(v) for v in t.meta[i])))
            rec.update(zip(of, (float(v) for v in t.other[i])))
            yield rec


def export(tasks: TaskCollection, path, fmt: str = "delimited", task_key_columns: Sequence[str] = ("task_key",), delimiter: str = ",") -> None:
    """Write ``tasks`` in a format :func:`ingest` reads back exactly.

    Floats use ``repr`` so they round-trip bit for bit; rows go out in key
    then time order.
    """
    key_cols = list(task_key_columns)
    mf, of = _columns(tasks.meta_dim, tasks.other_dim)
    buf = io.StringIO(newline="")
    if fmt == "delimited":
        header = key_cols + ["timestamp", "label"] + mf + of
        writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        writer.writerow(header)
        for rec in _records(tasks, key_cols):
            writer.writerow([repr(v) if isinstance(v, float) else v for v in (rec[c] for c in header)])
    elif fmt == "json-lines":
        for rec in _records(tasks, key_cols):
            buf.write(json.dumps(rec) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


# ---------------------------------------------------------------- splitting


def split_support_query(task: TaskDataset, support_fraction: float = 0.75) -> TaskDataset:
    """First ``support_fraction`` of the samples (in time) become support.

    With at least two samples both sides are kept non-empty. A single-sample
    task keeps everything as support and is not train-eligible.
    """
    if not 0.0 < support_fraction < 1.0:
        raise ValueError("support_fraction must be in (0, 1)")
    n = len(task)
    if n < 2:
        return task.with_support_end(n)
    end = min(max(int(math.floor(n * support_fraction)), 1), n - 1)
    return task.with_support_end(end)


def cap_samples(task: TaskDataset, cap: int) -> TaskDataset:
    """Keep only the ``cap`` most recent samples."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    return task if len(task) <= cap else task.tail(cap)


def prepare_training(tasks: TaskCollection, cap: int = 64, support_fraction: float = 0.75) -> TaskCollection:
    """Cap then split every task."""
    return tasks.map(lambda t: split_support_query(cap_samples(t, cap), support_fraction))


def query_only(tasks: TaskCollection) -> TaskCollection:
    """Each task reduced to its query samples (support emptied)."""
    return tasks.map(lambda t: t.query().with_support_end(0))


def cohort_slice(tasks: TaskCollection, threshold: int = 25) -> tuple[TaskCollection, TaskCollection]:
    """Split into (fewer than ``threshold`` samples, at least ``threshold``)."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    small = tasks.filter(lambda t: len(t) < threshold)
    large = tasks.filter(lambda t: len(t) >= threshold)
    return small, large


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Heterogeneous logistic tasks on a shared timeline.

    Every task has a static entity profile (its meta features, plus drift
    along a per-task direction over time) and a latent label rule::

        logit = bias + shared . [meta, other] + task_bias + task_weights . other

    ``latent_scale`` sets the size of the per-task part: a per-task bias, a
    random sign on the first other-feature weight, and Gaussian noise on the
    remaining other-feature weights. ``drift`` moves each task's profile
    along its drift direction by ``drift`` units over the whole timeline.
    ``min_samples``/``max_samples`` count training samples; validation and
    test sizes are ``eval_fraction`` of that (at least one each).
    """

    num_tasks: int = 2000
    min_samples: int = 8
    max_samples: int = 64
    latent_scale: float = 1.0
    meta_dim: int = 4
    other_dim: int = 8
    drift: float = 0.0
    seed: int = 0
    eval_fraction: float = 0.25
    meta_noise: float = 0.1
    profile_weight: float = 1.0
    shared_weight: float = 1.0
    base_bias: float = -0.5
    train_days: int = 90
    eval_days: int = 15
    start: int = SYNTHETIC_EPOCH

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if self.min_samples < 1 or self.max_samples < self.min_samples:
            raise ValueError("need max_samples >= min_samples >= 1")
        if self.meta_dim < 1 or self.other_dim < 1:
            raise ValueError("feature dimensions must be >= 1")
        if self.latent_scale < 0 or self.eval_fraction <= 0:
            raise ValueError("latent_scale must be >= 0 and eval_fraction > 0")
        if self.train_days < 1 or self.eval_days < 1:
            raise ValueError("day spans must be >= 1")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown synthetic spec key(s): {', '.join(unknown)}")
        kwargs = {}
        for name, raw in values.items():
            typ = type(getattr(cls(), name))
            kwargs[name] = typ(float(raw)) if typ is int else typ(raw)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class _TaskLatent:
    profile: np.ndarray
    drift_dir: np.ndarray
    bias: float
    weights: np.ndarray = field(repr=False)


def task_logits(spec: SyntheticSpec, shared: np.ndarray, latent: _TaskLatent, meta: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Bayes-optimal logit of every row for one task."""
    x = np.concatenate([meta, other], axis=1)
    return spec.base_bias + x @ shared + latent.bias + other @ latent.weights


def _shared_weights(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    w_meta = spec.profile_weight * rng.normal(size=spec.meta_dim) / math.sqrt(spec.meta_dim)
    w_other = spec.shared_weight * rng.normal(size=spec.other_dim) / math.sqrt(spec.other_dim)
    w_other[0] = 0.0  # carried only by the per-task sign
    return np.concatenate([w_meta, w_other])


def _draw_latent(spec: SyntheticSpec, rng: np.random.Generator) -> _TaskLatent:
    profile = rng.normal(size=spec.meta_dim)
    drift_dir = rng.normal(size=spec.meta_dim)
    bias = spec.latent_scale * rng.normal()
    weights = 0.5 * spec.latent_scale * rng.normal(size=spec.other_dim)
    weights[0] = spec.latent_scale * (1.0 if rng.random() < 0.5 else -1.0)
    return _TaskLatent(profile, drift_dir, bias, weights)


def _draw_rows(spec, shared, latent, rng, count, t0, t1):
    total_span = (spec.train_days + 2 * spec.eval_days) * DAY
    ts = np.sort(rng.integers(t0, t1, size=count))
    frac = (ts - spec.start) / total_span
    meta = (
        latent.profile
        + spec.drift * frac[:, None] * latent.drift_dir
        + spec.meta_noise * rng.normal(size=(count, spec.meta_dim))
    )
    other = rng.normal(size=(count, spec.other_dim))
    p = 1.0 / (1.0 + np.exp(-task_logits(spec, shared, latent, meta, other)))
    labels = (rng.random(count) < p).astype(np.int64)
    return ts, labels, meta, other, p


def synthesize(spec: SyntheticSpec, *, return_probs: bool = False):
    """Generate (train, validation, test) collections, disjoint in time.

    Timestamps: train in the first ``train_days``, then validation, then test,
    each spanning ``eval_days``. Identical specs give identical output. With
    ``return_probs`` a fourth value maps task key to the true test-sample
    probabilities.
    """
    root = np.random.SeedSequence(spec.seed)
    shared_ss, *task_ss = root.spawn(spec.num_tasks + 1)
    shared = _shared_weights(spec, np.random.default_rng(shared_ss))
    width = len(str(spec.num_tasks - 1))
    spans = [
        (spec.start, spec.start + spec.train_days * DAY),
        (spec.start + spec.train_days * DAY, spec.start + (spec.train_days + spec.eval_days) * DAY),
        (spec.start + (spec.train_days + spec.eval_days) * DAY, spec.start + (spec.train_days + 2 * spec.eval_days) * DAY),
    ]
    out = ([], [], [])
    probs = {}
    for i, ss in enumerate(task_ss):
        rng = np.random.default_rng(ss)
        key = f"u{i:0{width}d}"
        latent = _draw_latent(spec, rng)
        n_train = int(rng.integers(spec.min_samples, spec.max_samples + 1))
        n_eval = max(1, int(round(n_train * spec.eval_fraction)))
        for j, (count, (t0, t1)) in enumerate(zip((n_train, n_eval, n_eval), spans)):
            ts, labels, meta, other, p = _draw_rows(spec, shared, latent, rng, count, t0, t1)
            out[j].append(TaskDataset(key, ts, labels, meta, other))
            if j == 2:
                probs[key] = p
    cols = tuple(TaskCollection(ts, spec.meta_dim, spec.other_dim) for ts in out)
    return cols + (probs,) if return_probs else cols


def date_to_epoch(date: str) -> int:
    """Start of ``YYYY-MM-DD`` in UTC as epoch seconds."""
    d = dt.date.fromisoformat(date)
    return int(dt.datetime(d.year, d.month, d.day, tzinfo=dt.timezone.utc).timestamp())


def epoch_to_date(ts: int) -> str:
    return dt.datetime.fromtimestamp(int(ts), tz=dt.timezone.utc).date().isoformat()
