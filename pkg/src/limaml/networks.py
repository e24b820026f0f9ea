"""Network architectures the trainers operate on.

``MlpNetwork`` is one MLP over ``[meta, other]`` features (vanilla training
and entire-network MAML). ``SplitNetwork`` is the two-block layout: a meta
block turns a task's meta features into an embedding, and a global block
scores ``[embedding, (meta), other]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .numcore import MlpSpec, ParamSet, ShapeError, check_params, glorot_init, mean_bce, mlp_graph
from .numcore import graph as G

META = "meta."
GLOBAL = "global."


class MlpNetwork:
    kind = "mlp"

    def __init__(self, spec: MlpSpec, meta_dim: int, other_dim: int):
        if spec.input_dim != meta_dim + other_dim:
            raise ShapeError(f"input width {spec.input_dim} != meta {meta_dim} + other {other_dim}", layer=0)
        if spec.output_dim != 1:
            raise ShapeError("classifier output width must be 1", layer=len(spec.widths) - 1)
        self.spec = spec
        self.meta_dim = meta_dim
        self.other_dim = other_dim

    def param_shapes(self):
        return self.spec.param_shapes()

    def init(self, rng: np.random.Generator) -> ParamSet:
        return self.spec.init(rng)

    def adapt_keys(self, params: Mapping) -> list[str]:
        return list(params)

    def check(self, params: Mapping) -> None:
        check_params(self.spec, params)

    def logits(self, params, key: str, meta, other, *, train=False, rng=None) -> G.Node:
        x = G.constant(np.concatenate([meta, other], axis=1))
        return mlp_graph(self.spec, params, x, train=train, rng=rng, logits=True)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "meta_dim": self.meta_dim, "other_dim": self.other_dim, "mlp": self.spec.to_dict()}


class MlpMetaBlock:
    """Meta block as a small MLP over meta features."""

    kind = "mlp"

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self.embed_dim = spec.output_dim

    def param_shapes(self):
        return self.spec.param_shapes(META)

    def embed(self, params, key, meta, *, train=False, rng=None) -> G.Node:
        return mlp_graph(self.spec, params, G.constant(meta), train=train, rng=rng, prefix=META)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "mlp": self.spec.to_dict()}


class IdEmbeddingMetaBlock:
    """Meta block as a per-task-key lookup table.

    Row ``i`` belongs to ``keys[i]``; the last row is a shared default for
    keys not seen at construction. Meta features are ignored.
    """

    kind = "id-embedding"

    def __init__(self, keys: Sequence[str], embed_dim: int):
        self.keys = tuple(sorted(keys))
        self.index = {k: i for i, k in enumerate(self.keys)}
        self.embed_dim = int(embed_dim)
        if self.embed_dim < 1:
            raise ValueError("embedding dimension must be >= 1")

    def param_shapes(self):
        return [(f"{META}table", (len(self.keys) + 1, self.embed_dim))]

    def row(self, key: str) -> int:
        return self.index.get(key, len(self.keys))

    def embed(self, params, key, meta, *, train=False, rng=None) -> G.Node:
        idx = np.full(meta.shape[0], self.row(key), dtype=np.intp)
        return G.take_rows(params[f"{META}table"], idx)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "keys": list(self.keys), "embed_dim": self.embed_dim}


class SplitNetwork:
    kind = "split"

    def __init__(self, meta_block, global_spec: MlpSpec, meta_dim: int, other_dim: int, meta_to_global: bool = True):
        self.meta_block = meta_block
        self.global_spec = global_spec
        self.meta_dim = meta_dim
        self.other_dim = other_dim
        self.meta_to_global = bool(meta_to_global)
        self.embed_dim = meta_block.embed_dim
        want = self.embed_dim + other_dim + (meta_dim if self.meta_to_global else 0)
        if global_spec.input_dim != want:
            raise ShapeError(f"global block input width {global_spec.input_dim} != {want}", layer=0)
        if isinstance(meta_block, MlpMetaBlock) and meta_block.spec.input_dim != meta_dim:
            raise ShapeError(f"meta block input width {meta_block.spec.input_dim} != {meta_dim}", layer=0)
        if global_spec.output_dim != 1:
            raise ShapeError("global block output width must be 1", layer=len(global_spec.widths) - 1)

    def param_shapes(self):
        return self.meta_block.param_shapes() + self.global_spec.param_shapes(GLOBAL)

    def init(self, rng: np.random.Generator) -> ParamSet:
        return glorot_init(self.param_shapes(), rng)

    def adapt_keys(self, params: Mapping) -> list[str]:
        return [k for k in params if k.startswith(META)]

    def check(self, params: Mapping) -> None:
        for i, (name, shape) in enumerate(self.param_shapes()):
            if name not in params:
                raise ShapeError(f"missing parameter {name!r}", layer=i // 2)
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"{name} has shape {tuple(params[name].shape)}, expected {shape}", layer=i // 2)

    def global_input(self, embedding: G.Node, meta, other) -> G.Node:
        parts = [embedding]
        if self.meta_to_global:
            parts.append(G.constant(meta))
        parts.append(G.constant(other))
        return G.concat_cols(parts)

    def logits(self, params, key: str, meta, other, *, train=False, rng=None) -> G.Node:
        emb = self.meta_block.embed(params, key, meta, train=train, rng=rng)
        x = self.global_input(emb, meta, other)
        return mlp_graph(self.global_spec, params, x, train=train, rng=rng, prefix=GLOBAL, logits=True)

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "meta_dim": self.meta_dim,
            "other_dim": self.other_dim,
            "meta_to_global": self.meta_to_global,
            "meta_block": self.meta_block.descriptor(),
            "global": self.global_spec.to_dict(),
        }


@dataclass
class ModelBundle:
    """A split network together with its parameters."""

    network: SplitNetwork
    params: ParamSet

    def __post_init__(self):
        self.network.check(self.params)

    @classmethod
    def initialize(cls, network: SplitNetwork, seed: int) -> "ModelBundle":
        return cls(network, network.init(np.random.default_rng(seed)))

    @property
    def theta_meta(self) -> ParamSet:
        return self.params.subset(META)

    @property
    def theta_global(self) -> ParamSet:
        return self.params.subset(GLOBAL)

    @property
    def embed_dim(self) -> int:
        return self.network.embed_dim


def network_from_descriptor(d: Mapping):
    if d["kind"] == "mlp":
        return MlpNetwork(MlpSpec.from_dict(d["mlp"]), int(d["meta_dim"]), int(d["other_dim"]))
    if d["kind"] == "split":
        mb = d["meta_block"]
        if mb["kind"] == "mlp":
            block = MlpMetaBlock(MlpSpec.from_dict(mb["mlp"]))
        elif mb["kind"] == "id-embedding":
            block = IdEmbeddingMetaBlock(mb["keys"], int(mb["embed_dim"]))
        else:
            raise ValueError(f"unknown meta block kind {mb['kind']!r}")
        return SplitNetwork(
            block, MlpSpec.from_dict(d["global"]), int(d["meta_dim"]), int(d["other_dim"]), bool(d["meta_to_global"])
        )
    raise ValueError(f"unknown network kind {d['kind']!r}")


def build_mlp_network(meta_dim: int, other_dim: int, hidden=(32, 16), activation="relu", dropout=0.0) -> MlpNetwork:
    return MlpNetwork(MlpSpec.classifier(meta_dim + other_dim, hidden, activation, dropout), meta_dim, other_dim)


def build_split_network(
    meta_dim: int,
    other_dim: int,
    *,
    embed_dim: int = 4,
    meta_hidden=(8,),
    global_hidden=(32, 16),
    meta_to_global: bool = True,
    meta_block: str = "mlp",
    keys: Sequence[str] = (),
    activation: str = "relu",
    dropout: float = 0.0,
) -> SplitNetwork:
    """Default LiMAML layout; the meta MLP's last layer is linear."""
    if meta_block == "mlp":
        hidden = tuple(meta_hidden)
        spec = MlpSpec(
            meta_dim,
            hidden + (embed_dim,),
            (activation,) * len(hidden) + ("identity",),
            (dropout,) * len(hidden) + (0.0,),
        )
        block = MlpMetaBlock(spec)
    elif meta_block == "id-embedding":
        block = IdEmbeddingMetaBlock(keys, embed_dim)
    else:
        raise ValueError(f"unknown meta block {meta_block!r}")
    gin = embed_dim + other_dim + (meta_dim if meta_to_global else 0)
    return SplitNetwork(block, MlpSpec.classifier(gin, global_hidden, activation, dropout), meta_dim, other_dim, meta_to_global)


def task_loss(network, params, key, meta, other, labels, *, train=False, rng=None) -> G.Node:
    """Mean cross-entropy of one task's rows."""
    return mean_bce(network.logits(params, key, meta, other, train=train, rng=rng), labels)
