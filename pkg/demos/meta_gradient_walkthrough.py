"""Differentiating through inner gradient steps, checked two ways.

1. A one-parameter quadratic where the meta-gradient has a closed form.
2. A small tanh network, against central finite differences.

Run: python3 demos/meta_gradient_walkthrough.py
"""
import numpy as np

from limaml.numcore import MlpSpec, ParamSet, as_variables, meta_gradient, meta_gradient_fn, no_grad, unrolled_adapt
from limaml.numcore import graph as G
from limaml.numcore import mean_bce, mlp_graph


def quadratic(c):
    def loss(p, _step):
        d = G.sub(p["theta"], G.constant(np.array([c])))
        return G.scale(G.reduce_sum(G.mul(d, d)), 0.5)

    return loss


def main():
    alpha, theta, c_support, c_query = 0.3, 1.7, -0.4, 0.9
    print("quadratic task: support optimum c, query optimum c'")
    for n in range(6):
        g, loss = meta_gradient_fn(ParamSet({"theta": np.array([theta])}), quadratic(c_support), quadratic(c_query), alpha, n)
        theta_n = c_support + (1 - alpha) ** n * (theta - c_support)
        closed = (1 - alpha) ** n * (theta_n - c_query)
        print(f"  n={n}  autodiff {g['theta'][0]:+.15f}  closed form {closed:+.15f}  query loss {loss:.4f}")

    spec = MlpSpec(3, (8, 1), ("tanh", "sigmoid"))
    rng = np.random.default_rng(0)
    params = spec.init(rng)
    support = rng.normal(size=(6, 3)), rng.integers(0, 2, 6).astype(float)
    query = rng.normal(size=(6, 3)), rng.integers(0, 2, 6).astype(float)
    print(f"\ntanh network with {params.size} parameters, step size 0.4")
    for n in (1, 2, 3):
        g = meta_gradient(spec, params, support, query, 0.4, n).flatten()

        def f(vec):
            adapted, _ = unrolled_adapt(spec, as_variables(ParamSet.unflatten(vec, params.shapes)), support, 0.4, n)
            with no_grad():
                nodes = {k: G.constant(v.value) for k, v in adapted.items()}
                return float(mean_bce(mlp_graph(spec, nodes, G.constant(query[0]), logits=True), query[1]).value)

        x, h = params.flatten(), 1e-5
        fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])
        print(f"  n={n}  max |autodiff - finite difference| = {np.abs(g - fd).max():.2e}")


if __name__ == "__main__":
    main()
