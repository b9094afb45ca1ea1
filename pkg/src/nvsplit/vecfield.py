"""Vector-field calculus on R^n.

Fields are evaluated on batches: ``eval`` maps an array of shape ``(..., n)``
to ``(..., n)``, ``jac`` to ``(..., n, n)`` with ``jac[..., i, k] = d_k V^i``
and ``hess`` to ``(..., n, n, n)`` with ``hess[..., i, k, l] = d_l d_k V^i``.
Every routine here accepts a single point or a stack of points.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import DimensionError, NumericalFailure

EPS = np.finfo(float).eps
FD_STEP_FIRST = EPS ** (1.0 / 3.0)
FD_STEP_SECOND = EPS ** 0.25

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class VectorField:
    """A smooth map R^n -> R^n with optional analytic derivatives.

    ``flow`` optionally carries a closed-form (or numeric) recipe for the ODE
    flow of the field; attach one with :func:`nvsplit.flows.attach_flow` so
    that its algebraic form is checked.
    """

    dim: int
    eval: ArrayFn
    jac: ArrayFn | None = None
    hess: ArrayFn | None = None
    label: str = ""
    flow: object | None = None

    def __post_init__(self):
        if int(self.dim) < 1:
            raise DimensionError(f"field dimension must be positive, got {self.dim}")

    def __call__(self, x) -> np.ndarray:
        return evaluate(self, x)

    def with_flow(self, spec) -> "VectorField":
        from .flows import attach_flow

        return attach_flow(self, spec)


def _points(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != n:
        raise DimensionError(f"expected points with trailing dimension {n}, got shape {x.shape}")
    return x


def _require_finite(values: np.ndarray, what: str, label: str) -> np.ndarray:
    if not np.isfinite(values).all():
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NumericalFailure(
            f"non-finite {what} of field {label or '<anonymous>'} at index {tuple(int(i) for i in bad)}"
        )
    return values


def evaluate(V: VectorField, x) -> np.ndarray:
    x = _points(x, V.dim)
    out = np.asarray(V.eval(x), dtype=float)
    if out.shape != x.shape:
        out = np.broadcast_to(out, x.shape).copy()
    return _require_finite(out, "value", V.label)


def _central_difference(fn: ArrayFn, x: np.ndarray, n: int, rel_step: float, label: str) -> np.ndarray:
    """Stack of central differences of ``fn`` along each coordinate; last axis indexes it."""
    cols = []
    for k in range(n):
        step = rel_step * np.maximum(1.0, np.abs(x[..., k]))
        xp = x.copy()
        xm = x.copy()
        xp[..., k] += step
        xm[..., k] -= step
        # the representable spacing, not the nominal step
        width = (xp[..., k] - xm[..., k])
        fp = np.asarray(fn(xp), dtype=float)
        fm = np.asarray(fn(xm), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericalFailure(
                f"non-finite evaluation of field {label or '<anonymous>'} "
                f"while differentiating along coordinate {k}"
            )
        width = width.reshape(width.shape + (1,) * (fp.ndim - width.ndim))
        cols.append((fp - fm) / width)
    return np.stack(cols, axis=-1)


def jacobian(V: VectorField, x) -> np.ndarray:
    """Jacobian of ``V`` at ``x``: analytic when supplied, else central differences."""
    x = _points(x, V.dim)
    if not np.all(np.isfinite(x)):
        k = int(np.argwhere(~np.isfinite(x))[0][-1])
        raise NumericalFailure(f"non-finite point passed to jacobian (coordinate {k})")
    if V.jac is not None:
        J = np.asarray(V.jac(x), dtype=float)
        J = np.broadcast_to(J, x.shape + (V.dim,)).copy()
        return _require_finite(J, "jacobian", V.label)

    def f(y):
        return np.broadcast_to(np.asarray(V.eval(y), dtype=float), y.shape)

    return _central_difference(f, x, V.dim, FD_STEP_FIRST, V.label)


def hessian(V: VectorField, x) -> np.ndarray:
    """Second-derivative tensor ``[..., i, k, l] = d_l d_k V^i``."""
    x = _points(x, V.dim)
    if V.hess is not None:
        H = np.asarray(V.hess(x), dtype=float)
        H = np.broadcast_to(H, x.shape + (V.dim, V.dim)).copy()
        return _require_finite(H, "hessian", V.label)
    if V.jac is not None:
        return _central_difference(lambda y: jacobian(V, y), x, V.dim, FD_STEP_SECOND, V.label)
    # value-only field: second differences straight from eval
    n = V.dim
    H = np.empty(x.shape + (n, n))
    f0 = evaluate(V, x)
    steps = FD_STEP_SECOND * np.maximum(1.0, np.abs(x))
    for k in range(n):
        for l in range(k, n):
            ek = np.zeros(n)
            el = np.zeros(n)
            ek[k] = 1.0
            el[l] = 1.0
            hk = steps[..., k:k + 1]
            hl = steps[..., l:l + 1]
            if k == l:
                val = (evaluate(V, x + hk * ek) - 2.0 * f0 + evaluate(V, x - hk * ek)) / hk ** 2
            else:
                val = (
                    evaluate(V, x + hk * ek + hl * el)
                    - evaluate(V, x + hk * ek - hl * el)
                    - evaluate(V, x - hk * ek + hl * el)
                    + evaluate(V, x - hk * ek - hl * el)
                ) / (4.0 * hk * hl)
            H[..., :, k, l] = val
            H[..., :, l, k] = val
    return H


def tensor_apply(A, v) -> np.ndarray:
    """Contract the trailing index of a (m, p, q) tensor with a q-vector.

    Leading batch axes broadcast: ``A`` of shape ``(..., m, p, q)`` and ``v`` of
    shape ``(..., q)`` give ``(..., m, p)``.
    """
    A = np.asarray(A, dtype=float)
    v = np.asarray(v, dtype=float)
    if A.ndim < 3 or v.ndim < 1 or A.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cannot contract tensor of shape {A.shape} with vector of shape {v.shape}")
    return np.einsum("...ikl,...l->...ik", A, v)


def _matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ik,...k->...i", M, v)


def lie_bracket(V: VectorField, W: VectorField, x) -> np.ndarray:
    """[V, W](x) = dW(x) V(x) - dV(x) W(x)."""
    if V.dim != W.dim:
        raise DimensionError(f"bracket of fields with dimensions {V.dim} and {W.dim}")
    x = _points(x, V.dim)
    return _matvec(jacobian(W, x), evaluate(V, x)) - _matvec(jacobian(V, x), evaluate(W, x))


def bracket_field(V: VectorField, W: VectorField) -> VectorField:
    """The Lie bracket [V, W] as a field in its own right.

    Its Jacobian is analytic when both inputs carry ``jac`` and ``hess``;
    otherwise it is left to finite differences.
    """
    if V.dim != W.dim:
        raise DimensionError(f"bracket of fields with dimensions {V.dim} and {W.dim}")
    jac = None
    if V.jac is not None and W.jac is not None and V.hess is not None and W.hess is not None:

        def jac(x):
            dV, dW = jacobian(V, x), jacobian(W, x)
            return (
                tensor_apply(hessian(W, x), evaluate(V, x))
                + dW @ dV
                - tensor_apply(hessian(V, x), evaluate(W, x))
                - dV @ dW
            )

    return VectorField(
        V.dim,
        lambda x: lie_bracket(V, W, x),
        jac=jac,
        label=f"[{V.label},{W.label}]",
    )


@dataclass(frozen=True, eq=False)
class SdeModel:
    """Ito SDE dX = b(X) dt + sum_j sigma_j(X) dW^j on [0, T] started at x0.

    ``exact``, when present, maps ``(times, W)`` with ``times`` of shape
    ``(K+1,)`` and ``W`` the Brownian values at those times, shape
    ``(B, d, K+1)``, to states of shape ``(B, K+1, n)``.
    ``drift_flow`` is the flow recipe for the Stratonovich drift.
    """

    b: VectorField
    sigma: tuple
    T: float
    x0: np.ndarray
    exact: Callable | None = None
    drift_flow: object | None = None
    name: str = "custom"
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(self.sigma))
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        object.__setattr__(self, "T", float(self.T))
        dims = {self.b.dim, *(s.dim for s in self.sigma), self.x0.shape[0]}
        if len(dims) != 1 or self.x0.ndim != 1:
            raise DimensionError(
                f"drift, diffusion fields and x0 must share one dimension, got {sorted(dims)}"
            )
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")

    @property
    def n(self) -> int:
        return self.b.dim

    @property
    def d(self) -> int:
        return len(self.sigma)

    @cached_property
    def strat_drift(self) -> VectorField:
        return stratonovich_drift(self)

    @cached_property
    def commutativity(self) -> "CommutativityReport":
        return check_commutativity(self)

    def replace(self, **changes) -> "SdeModel":
        return replace(self, **changes)


def stratonovich_drift(model: SdeModel) -> VectorField:
    """sigma_0 = b - 1/2 sum_j (d sigma_j) sigma_j."""
    b, sigma = model.b, model.sigma
    if all(getattr(s.flow, "kind", None) == "exact-constant" for s in sigma):
        # d sigma_j = 0, so the correction vanishes identically
        drift = VectorField(model.n, b.eval, jac=b.jac, hess=b.hess, label="sigma0", flow=b.flow)
        return drift.with_flow(model.drift_flow) if model.drift_flow is not None else drift

    def s0(x):
        out = evaluate(b, x)
        for s in sigma:
            out = out - 0.5 * _matvec(jacobian(s, x), evaluate(s, x))
        return out

    jac = None
    if b.jac is not None and all(s.jac is not None and s.hess is not None for s in sigma):

        def jac(x):
            J = jacobian(b, x)
            for s in sigma:
                dS = jacobian(s, x)
                J = J - 0.5 * (tensor_apply(hessian(s, x), evaluate(s, x)) + dS @ dS)
            return J

    drift = VectorField(model.n, s0, jac=jac, label="sigma0")
    if model.drift_flow is not None:
        drift = drift.with_flow(model.drift_flow)
    return drift


@dataclass(frozen=True)
class CommutativityReport:
    brownian_max: float
    drift_max: float
    brownian_commute: bool
    drift_commutes: bool
    n_points: int
    tol: float
    worst_brownian_pair: tuple | None = None
    worst_drift_index: int | None = None


def probe_points(center, count: int = 64, radius: float = 2.0) -> np.ndarray:
    """``center`` followed by ``count`` Halton points inside the ball around it."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    n = center.shape[0]
    sampler = qmc.Halton(d=n, scramble=False)
    sampler.fast_forward(1)  # the first Halton point is the origin corner
    found = []
    while len(found) < count:
        cand = radius * (2.0 * sampler.random(4 * count) - 1.0)
        found.extend(cand[np.linalg.norm(cand, axis=1) <= radius])
    return np.vstack([center, center + np.asarray(found[:count])])


def check_commutativity(model: SdeModel, points=None, tol: float = 1e-9) -> CommutativityReport:
    """Sample-based test of the vanishing of Lie brackets.

    A bracket counts as zero at ``x`` when its norm is at most
    ``tol * (1 + |V(x)| + |W(x)|)``. The maxima reported are of the raw norms;
    the flags use the scaled test. Only a finite sample is inspected, so a
    ``True`` flag certifies the sample, not the identity on R^n.
    """
    pts = probe_points(model.x0) if points is None else _points(np.atleast_2d(points), model.n)
    if pts.shape[0] == 0:
        raise ValueError("need at least one probe point")

    def scan(pairs):
        worst, worst_key, ok = 0.0, None, True
        for key, V, W in pairs:
            norms = np.linalg.norm(lie_bracket(V, W, pts), axis=-1)
            scale = 1.0 + np.linalg.norm(evaluate(V, pts), axis=-1) + np.linalg.norm(evaluate(W, pts), axis=-1)
            ok = ok and bool(np.all(norms <= tol * scale))
            m = float(norms.max())
            if worst_key is None or m > worst:
                worst, worst_key = m, key
        return worst, worst_key, ok

    sig = model.sigma
    bro = [((j + 1, m + 1), sig[j], sig[m]) for j in range(len(sig)) for m in range(j + 1, len(sig))]
    b_max, b_key, b_ok = scan(bro)
    s0 = model.strat_drift
    d_max, d_key, d_ok = scan([(j + 1, s0, s) for j, s in enumerate(sig)])
    return CommutativityReport(
        brownian_max=b_max,
        drift_max=d_max,
        brownian_commute=b_ok,
        drift_commutes=d_ok,
        n_points=int(pts.shape[0]),
        tol=tol,
        worst_brownian_pair=b_key,
        worst_drift_index=d_key,
    )


def derivative_mismatch(V: VectorField, points: Sequence) -> dict:
    """Largest relative gaps between analytic and finite-difference derivatives."""
    pts = _points(np.atleast_2d(points), V.dim)
    out = {"jac": 0.0, "hess": 0.0, "hess_symmetry": 0.0}
    if V.jac is not None:
        fd = jacobian(replace(V, jac=None, hess=None, flow=None), pts)
        an = jacobian(V, pts)
        out["jac"] = float(np.max(np.abs(fd - an) / (1.0 + np.abs(an))))
    if V.hess is not None:
        fd = hessian(replace(V, hess=None, flow=None), pts)
        an = hessian(V, pts)
        out["hess"] = float(np.max(np.abs(fd - an) / (1.0 + np.abs(an))))
        out["hess_symmetry"] = float(np.max(np.abs(an - np.swapaxes(an, -1, -2))))
    return out
