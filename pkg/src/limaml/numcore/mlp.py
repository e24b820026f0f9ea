from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import graph as G
from .errors import ShapeError
from .params import ParamSet, glorot_init

EPS = 1e-7


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network: ``input_dim`` then one entry per layer.

    ``dropout[i]`` is applied to the output of layer ``i`` in train mode; the
    last layer never gets dropout.
    """

    input_dim: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    dropout: tuple[float, ...] = field(default=())

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        acts = tuple(self.activations)
        drop = tuple(float(d) for d in self.dropout) or (0.0,) * len(widths)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "dropout", drop)
        if not widths:
            raise ValueError("MlpSpec needs at least one layer")
        if self.input_dim < 1 or any(w < 1 for w in widths):
            raise ValueError("layer widths must be positive")
        if len(acts) != len(widths) or len(drop) != len(widths):
            raise ValueError("activations/dropout must have one entry per layer")
        for a in acts:
            if a not in G.ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if any(not 0.0 <= d < 1.0 for d in drop):
            raise ValueError("dropout rate must be in [0, 1)")

    @classmethod
    def classifier(cls, input_dim: int, hidden: Sequence[int], activation: str = "relu", dropout: float = 0.0):
        """Hidden layers with ``activation`` and a single sigmoid output unit."""
        hidden = tuple(hidden)
        return cls(
            input_dim,
            hidden + (1,),
            (activation,) * len(hidden) + ("sigmoid",),
            (dropout,) * len(hidden) + (0.0,),
        )

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def param_shapes(self, prefix: str = "") -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        fan_in = self.input_dim
        for i, w in enumerate(self.widths):
            shapes.append((f"{prefix}layer{i}.W", (fan_in, w)))
            shapes.append((f"{prefix}layer{i}.b", (w,)))
            fan_in = w
        return shapes

    def init(self, rng: np.random.Generator, prefix: str = "") -> ParamSet:
        return glorot_init(self.param_shapes(prefix), rng)

    def with_dropout(self, rate: float) -> "MlpSpec":
        n = len(self.widths)
        return MlpSpec(self.input_dim, self.widths, self.activations, (rate,) * (n - 1) + (0.0,))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "widths": list(self.widths),
            "activations": list(self.activations),
            "dropout": list(self.dropout),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpSpec":
        return cls(int(d["input_dim"]), tuple(d["widths"]), tuple(d["activations"]), tuple(d["dropout"]))


def check_params(spec: MlpSpec, params: Mapping, prefix: str = "") -> None:
    for i, (name, shape) in enumerate(spec.param_shapes(prefix)):
        if name not in params:
            raise ShapeError(f"missing parameter {name!r}", layer=i // 2)
        got = tuple(params[name].shape)
        if got != shape:
            raise ShapeError(f"{name} has shape {got}, expected {shape}", layer=i // 2)


def mlp_graph(
    spec: MlpSpec,
    params: Mapping[str, G.Node],
    x: G.Node,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    prefix: str = "",
    logits: bool = False,
) -> G.Node:
    """Graph forward pass over a batch ``x`` of shape (rows, input_dim).

    With ``logits=True`` the final sigmoid is skipped so losses can work on
    the pre-activation.
    """
    h = x
    last = len(spec.widths) - 1
    for i in range(len(spec.widths)):
        h = G.linear(h, params[f"{prefix}layer{i}.W"], params[f"{prefix}layer{i}.b"])
        act = spec.activations[i]
        if i == last and logits and act == "sigmoid":
            break
        h = G.ACTIVATIONS[act](h)
        rate = spec.dropout[i]
        if train and rate > 0.0 and i < last:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = (rng.random(h.shape) >= rate).astype(np.float64) / (1.0 - rate)
            h = G.scale(h, keep)
    return h


def forward_mlp(
    spec: MlpSpec,
    params: ParamSet,
    x,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, G.Node]:
    """Evaluate the network on one input vector or a batch of rows.

    Returns the output values and the output graph node (parameters are leaf
    variables so the node can be differentiated).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    check_params(spec, params)
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != spec.input_dim:
        raise ShapeError(f"input width {arr.shape[1]} != {spec.input_dim}", layer=0)
    if not np.all(np.isfinite(arr)):
        raise ValueError("input contains non-finite values")
    leaves = {k: G.variable(v, name=k) for k, v in params.items()}
    out = mlp_graph(spec, leaves, G.constant(arr), train=mode == "train", rng=rng)
    value = out.value[0] if single else out.value
    return value, out


def cross_entropy(prediction: float, label: int) -> float:
    """Minimizable binary cross-entropy of one prediction (clamped at 1e-7)."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    p = min(max(float(prediction), EPS), 1.0 - EPS)
    return -math.log(p) if label == 1 else -math.log1p(-p)


def mean_bce(logit_node: G.Node, labels: np.ndarray) -> G.Node:
    """Mean cross-entropy over a batch, from logits of shape (rows, 1)."""
    per_row = G.bce_with_logits(logit_node, np.asarray(labels, dtype=np.float64).reshape(-1, 1), EPS)
    return G.mean(per_row)
