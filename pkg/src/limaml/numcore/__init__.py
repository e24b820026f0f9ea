"""Dense math, small networks and differentiation through gradient steps."""
from . import graph
from .errors import NonFiniteError, ShapeError
from .graph import Node, constant, grad, no_grad, variable
from .meta import adapt, as_variables, meta_gradient, meta_gradient_fn, unrolled_adapt
from .mlp import EPS, MlpSpec, check_params, cross_entropy, forward_mlp, mean_bce, mlp_graph
from .params import ParamSet, glorot_init

__all__ = [
    "EPS",
    "MlpSpec",
    "Node",
    "NonFiniteError",
    "ParamSet",
    "ShapeError",
    "adapt",
    "as_variables",
    "check_params",
    "constant",
    "cross_entropy",
    "forward_mlp",
    "glorot_init",
    "grad",
    "graph",
    "mean_bce",
    "meta_gradient",
    "meta_gradient_fn",
    "mlp_graph",
    "no_grad",
    "unrolled_adapt",
    "variable",
]
