"""Inner-loop adaptation and exact (second-order) meta-gradients."""
from __future__ import annotations

from typing import Callable, Collection, Mapping

import numpy as np

from . import graph as G
from .errors import NonFiniteError
from .mlp import MlpSpec, mean_bce, mlp_graph
from .params import ParamSet

# loss_fn(params, inner_step) -> scalar node; inner_step is None for the query pass
LossFn = Callable[[Mapping[str, G.Node], "int | None"], G.Node]


def as_variables(params: ParamSet) -> dict[str, G.Node]:
    return {k: G.variable(v, name=k) for k, v in params.items()}


def adapt(
    loss_fn: LossFn,
    params: Mapping[str, G.Node],
    alpha: float,
    steps: int,
    keys: Collection[str] | None = None,
    create_graph: bool = True,
) -> dict[str, G.Node]:
    """Take ``steps`` full-batch gradient steps on ``loss_fn`` for ``keys``.

    With ``create_graph`` the result stays connected to ``params``; without
    it every step restarts from fresh leaves (first-order fine-tuning).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    current = dict(params)
    keys = list(current) if keys is None else [k for k in current if k in keys]
    for step in range(steps):
        loss = loss_fn(current, step)
        if not np.isfinite(loss.value):
            raise NonFiniteError("inner-loop loss is not finite", step=step)
        grads = G.grad(loss, [current[k] for k in keys], create_graph=create_graph)
        for k, g in zip(keys, grads):
            if not np.all(np.isfinite(g.value)):
                raise NonFiniteError(f"gradient of {k} is not finite", step=step)
            if create_graph:
                current[k] = G.sgd_step(current[k], g, alpha)
            else:
                current[k] = G.variable(current[k].value - alpha * g.value, name=k)
    return current


def meta_gradient_fn(
    params: ParamSet,
    support_loss: LossFn,
    query_loss: LossFn,
    alpha: float,
    steps: int,
    adapt_keys: Collection[str] | None = None,
) -> tuple[ParamSet, float]:
    """Derivative of the post-adaptation query loss w.r.t. the original params.

    Only ``adapt_keys`` are adapted in the inner loop. Other parameters are
    held as constants while adapting, so their gradient is the partial
    derivative of the query loss with the adapted keys plugged in.
    Returns (gradient, query loss value).
    """
    leaves = as_variables(params)
    adapt_keys = set(params) if adapt_keys is None else set(adapt_keys)
    if steps == 0:
        query_params = leaves
    else:
        inner = {k: (leaves[k] if k in adapt_keys else G.constant(params[k])) for k in params}
        adapted = adapt(support_loss, inner, alpha, steps, keys=adapt_keys, create_graph=True)
        query_params = {k: (adapted[k] if k in adapt_keys else leaves[k]) for k in params}
    loss = query_loss(query_params, None)
    if not np.isfinite(loss.value):
        raise NonFiniteError("query loss is not finite")
    names = list(params)
    grads = G.grad(loss, [leaves[k] for k in names])
    return ParamSet({k: g.value for k, g in zip(names, grads)}), float(loss.value)


def _mlp_loss(spec: MlpSpec, batch, loss) -> LossFn:
    x, y = batch
    xn = G.constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    y = np.asarray(y, dtype=np.float64)
    if loss is None:
        return lambda p, _step: mean_bce(mlp_graph(spec, p, xn, logits=True), y)
    return lambda p, _step: loss(mlp_graph(spec, p, xn), y)


def unrolled_adapt(
    spec: MlpSpec,
    params: Mapping[str, G.Node],
    support,
    alpha: float,
    n: int,
    loss=None,
) -> tuple[dict[str, G.Node], bool]:
    """Adapt MLP parameters on a support batch ``(x, y)`` for ``n`` steps.

    ``params`` are graph nodes (see :func:`as_variables`); the returned nodes
    stay connected to them. ``loss(output_node, labels)`` defaults to mean
    cross-entropy.
    """
    if n > 0 and len(support[1]) == 0:
        raise ValueError("support set is empty")
    adapted = adapt(_mlp_loss(spec, support, loss), params, alpha, n)
    connected = all(adapted[k] is params[k] or adapted[k].requires_grad for k in params)
    return adapted, connected


def meta_gradient(spec: MlpSpec, params: ParamSet, support, query, alpha: float, n: int, loss=None) -> ParamSet:
    """Exact meta-gradient of one task for a plain MLP."""
    if len(query[1]) == 0:
        raise ValueError("query set is empty")
    if n > 0 and len(support[1]) == 0:
        raise ValueError("support set is empty")
    g, _ = meta_gradient_fn(
        params, _mlp_loss(spec, support, loss), _mlp_loss(spec, query, loss), alpha, n
    )
    return g
