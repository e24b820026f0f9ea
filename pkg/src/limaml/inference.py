"""Forward-only scoring in plain numpy.

Nothing here imports the differentiation machinery: the online scorer and
the offline evaluation both call :func:`global_scores`, so their
probabilities come from the very same arithmetic.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

_ACT = {
    "relu": lambda a: a * (a > 0).astype(np.float64),
    "tanh": np.tanh,
    "identity": lambda a: a,
}


def sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def mlp_forward(spec_dict: Mapping, params: Mapping[str, np.ndarray], x: np.ndarray, prefix: str = "") -> np.ndarray:
    """Eval-mode forward pass of a serialized MlpSpec (no dropout)."""
    h = np.asarray(x, dtype=np.float64)
    for i, act in enumerate(spec_dict["activations"]):
        h = h @ params[f"{prefix}layer{i}.W"] + params[f"{prefix}layer{i}.b"]
        h = sigmoid(h) if act == "sigmoid" else _ACT[act](h)
    return h


def global_input(embeddings: np.ndarray, meta: np.ndarray | None, other: np.ndarray, meta_to_global: bool) -> np.ndarray:
    parts = [np.asarray(embeddings, dtype=np.float64)]
    if meta_to_global:
        parts.append(np.asarray(meta, dtype=np.float64))
    parts.append(np.asarray(other, dtype=np.float64))
    return np.concatenate(parts, axis=1)


def global_scores(global_spec: Mapping, theta_global: Mapping[str, np.ndarray], embeddings, meta, other, meta_to_global: bool) -> np.ndarray:
    """Probabilities of the global block for rows of (embedding, meta, other).

    Rows go through the network one at a time. A batched matrix product may
    round differently depending on how many rows share the call, and the
    scorer must reproduce offline probabilities bit for bit.
    """
    x = global_input(embeddings, meta, other, meta_to_global)
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = mlp_forward(global_spec, theta_global, x[i : i + 1], prefix="global.")[0, 0]
    return out
