"""Built-in SDE models, constructible by name from a parameter map.

=================  ============================================  ==================
name               dynamics                                      parameters
=================  ============================================  ==================
bs                 dX = mu X dt + sigma X dW                     mu, sigma
additive-sin       dX = sin(X) dt + s dW                         s
noncommuting-2d    dX1 = dW1, dX2 = X1 dW2                        (none)
linear-1d          dX = alpha X dt + s dW                        alpha, s
constant           dX = c0 dt + sum_j c_j dW^j                   c0, c
=================  ============================================  ==================

Every model also takes ``T`` and ``x0``. Vector parameters are written as
comma-separated numbers and matrices as semicolon-separated rows.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError
from .flows import FlowSpec
from .vecfield import SdeModel, VectorField


def constant_field(c, label: str = "") -> VectorField:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    n = c.shape[0]
    return VectorField(
        n,
        lambda x: np.broadcast_to(c, x.shape).copy(),
        jac=lambda x: np.zeros(x.shape + (n,)),
        hess=lambda x: np.zeros(x.shape + (n, n)),
        label=label,
    ).with_flow(FlowSpec.constant(c))


def linear_field(A, label: str = "") -> VectorField:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    spec = FlowSpec.scalar_geometric(A[0, 0]) if n == 1 else FlowSpec.linear(A)
    # multiply-and-sum instead of a matrix product: BLAS rounding can depend on
    # the batch size, and a path must not depend on which batch it ran in
    return VectorField(
        n,
        lambda x: (x[..., None, :] * A).sum(axis=-1),
        jac=lambda x: np.broadcast_to(A, x.shape + (n,)).copy(),
        hess=lambda x: np.zeros(x.shape + (n, n)),
        label=label,
    ).with_flow(spec)


def _vector(value, name: str) -> np.ndarray:
    if isinstance(value, str):
        try:
            return np.array([float(v) for v in value.split(",")])
        except ValueError:
            raise ConfigError(f"parameter {name}: cannot parse {value!r} as a comma-separated vector") from None
    return np.atleast_1d(np.asarray(value, dtype=float))


def _matrix(value, name: str) -> np.ndarray:
    if isinstance(value, str):
        rows = [_vector(r, name) for r in value.split(";")]
        if len({r.shape for r in rows}) != 1:
            raise ConfigError(f"parameter {name}: rows of {value!r} have different lengths")
        return np.vstack(rows)
    return np.atleast_2d(np.asarray(value, dtype=float))


def _scalar(value, name: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"parameter {name}: cannot parse {value!r} as a number") from None


def black_scholes(mu=0.1, sigma=0.4, T=1.0, x0=1.0) -> SdeModel:
    mu, sigma = float(mu), float(sigma)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    def exact(times, W):
        drift = (mu - 0.5 * sigma ** 2) * times
        return (x0[0] * np.exp(drift + sigma * W[:, 0, :]))[..., None]

    return SdeModel(
        linear_field([[mu]], "b"),
        [linear_field([[sigma]], "sigma1")],
        T,
        x0,
        exact=exact,
        drift_flow=FlowSpec.scalar_geometric(mu - 0.5 * sigma ** 2),
        name="bs",
        params={"mu": mu, "sigma": sigma},
    )


def additive_sin(s=1.0, T=1.0, x0=1.0) -> SdeModel:
    b = VectorField(
        1,
        np.sin,
        jac=lambda x: np.cos(x)[..., None],
        hess=lambda x: -np.sin(x)[..., None, None],
        label="b",
    )
    return SdeModel(
        b,
        [constant_field([float(s)], "sigma1")],
        T,
        x0,
        drift_flow=FlowSpec.numeric(),
        name="additive-sin",
        params={"s": float(s)},
    )


def noncommuting_2d(T=1.0, x0=(1.0, 0.0)) -> SdeModel:
    return SdeModel(
        constant_field([0.0, 0.0], "b"),
        [constant_field([1.0, 0.0], "sigma1"), linear_field([[0.0, 0.0], [1.0, 0.0]], "sigma2")],
        T,
        x0,
        drift_flow=FlowSpec.constant([0.0, 0.0]),
        name="noncommuting-2d",
    )


def linear_1d(alpha=1.0, s=1.0, T=1.0, x0=1.0) -> SdeModel:
    alpha = float(alpha)
    return SdeModel(
        linear_field([[alpha]], "b"),
        [constant_field([float(s)], "sigma1")],
        T,
        x0,
        drift_flow=FlowSpec.scalar_geometric(alpha),
        name="linear-1d",
        params={"alpha": alpha, "s": float(s)},
    )


def constant_model(c0=(0.5, -0.25), c=((1.0, 0.0), (0.3, 0.7)), T=1.0, x0=None) -> SdeModel:
    c0 = np.atleast_1d(np.asarray(c0, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    if c.shape[1] != c0.shape[0]:
        raise ConfigError(f"diffusion rows have length {c.shape[1]}, drift has length {c0.shape[0]}")
    x0 = np.zeros_like(c0) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))

    def exact(times, W):
        return x0 + times[:, None] * c0 + np.einsum("bjk,jn->bkn", W, c)

    return SdeModel(
        constant_field(c0, "b"),
        [constant_field(row, f"sigma{j + 1}") for j, row in enumerate(c)],
        T,
        x0,
        exact=exact,
        drift_flow=FlowSpec.constant(c0),
        name="constant",
        params={"c0": c0, "c": c},
    )


# name -> (builder, {parameter: parser})
REGISTRY: dict[str, tuple[Callable[..., SdeModel], dict[str, Callable]]] = {
    "bs": (black_scholes, {"mu": _scalar, "sigma": _scalar}),
    "additive-sin": (additive_sin, {"s": _scalar}),
    "noncommuting-2d": (noncommuting_2d, {}),
    "linear-1d": (linear_1d, {"alpha": _scalar, "s": _scalar}),
    "constant": (constant_model, {"c0": _vector, "c": _matrix}),
}


def build_model(name: str, params: Mapping | None = None) -> SdeModel:
    """Construct a registered model; unknown names or parameters raise ConfigError."""
    if name not in REGISTRY:
        raise ConfigError(f"unknown model {name!r}; choose from {', '.join(REGISTRY)}")
    builder, parsers = REGISTRY[name]
    parsers = {**parsers, "T": _scalar, "x0": _vector}
    kwargs = {}
    for key, value in (params or {}).items():
        if key not in parsers:
            raise ConfigError(f"model {name} has no parameter {key!r}; known: {', '.join(sorted(parsers))}")
        kwargs[key] = parsers[key](value, key)
    return builder(**kwargs)
