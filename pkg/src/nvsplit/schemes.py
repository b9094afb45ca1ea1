"""One-step SDE integrators driven by shared Brownian paths.

All integrators advance a whole batch of paths at once; ``states`` arrays
have shape ``(B, N+1, n)``.  Any grid whose step count divides the path's
grid by a power of two can be used, so a coarse scheme and a fine reference
see the same Brownian motion.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalFailure, UnsupportedModel
from .flows import OVERFLOW, FlowSpec, certify_substeps, flow
from .paths import BrownianPath, RademacherSeq, TimeGrid, make_rademacher
from .vecfield import SdeModel, VectorField, evaluate, jacobian, probe_points

SCHEMES = ("euler", "milstein", "nv", "nv-eta", "exact")
FLOW_TARGET = 1e-12


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: TimeGrid
    states: np.ndarray
    scheme: str
    warnings: tuple = field(default=())

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    def to_csv(self, row: int = 0) -> str:
        """One path as CSV with header ``t,x1..xn``."""
        n = self.states.shape[-1]
        lines = [",".join(["t"] + [f"x{i + 1}" for i in range(n)])]
        for t, x in zip(self.grid.times, self.states[row]):
            lines.append(",".join(f"{v:.17g}" for v in (t, *x)))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RefConfig:
    """Reference-solution settings: ``refinement`` is the fine/coarse step ratio."""

    refinement: int = 16
    gate_paths: int = 64

    def __post_init__(self):
        r = int(self.refinement)
        if r < 2 or r & (r - 1):
            raise ConfigError(f"reference refinement must be a power of two >= 2, got {self.refinement}")


def _driving(grid: TimeGrid, path: BrownianPath) -> np.ndarray:
    if not np.isclose(grid.T, path.grid.T, rtol=0, atol=1e-15 * grid.T):
        raise ConfigError(f"grid horizon {grid.T} differs from path horizon {path.grid.T}")
    return path.coarsen(grid.N).increments


def _check(X: np.ndarray, k: int, scheme: str) -> None:
    if not (np.abs(X) <= OVERFLOW).all():
        rows = np.flatnonzero(~np.all(np.isfinite(X) & (np.abs(X) <= OVERFLOW), axis=-1))
        raise NumericalFailure(f"{scheme} overflowed at step {k} on batch rows {rows[:5].tolist()}")


def _start(model: SdeModel, batch: int, N: int) -> np.ndarray:
    states = np.empty((batch, N + 1, model.n))
    states[:, 0, :] = model.x0
    return states


def simulate_euler(model: SdeModel, grid: TimeGrid, path: BrownianPath) -> Trajectory:
    dW = _driving(grid, path)
    h = grid.h
    states = _start(model, path.batch, grid.N)
    X = states[:, 0, :].copy()
    for k in range(grid.N):
        step = evaluate(model.b, X) * h
        for j, s in enumerate(model.sigma):
            step = step + evaluate(s, X) * dW[:, j, k, None]
        X = X + step
        _check(X, k, "euler")
        states[:, k + 1, :] = X
    return Trajectory(grid, states, "euler")


def simulate_milstein(model: SdeModel, grid: TimeGrid, path: BrownianPath) -> Trajectory:
    """Milstein scheme for d = 1 or commuting diffusions.

    Under commutativity the iterated Ito integrals reduce to
    (dW^j dW^m - delta_jm h) / 2, so no Levy areas are needed.
    """
    if model.d > 1 and not model.commutativity.brownian_commute:
        raise UnsupportedModel(
            f"Milstein needs commuting diffusion fields when d > 1 (max bracket norm "
            f"{model.commutativity.brownian_max:.3g})"
        )
    dW = _driving(grid, path)
    h = grid.h
    states = _start(model, path.batch, grid.N)
    X = states[:, 0, :].copy()
    d = model.d
    for k in range(grid.N):
        sig = [evaluate(s, X) for s in model.sigma]
        jac = [jacobian(s, X) for s in model.sigma]
        step = evaluate(model.b, X) * h
        for j in range(d):
            step = step + sig[j] * dW[:, j, k, None]
        for j in range(d):
            for m in range(d):
                prod = dW[:, j, k] * dW[:, m, k] - (h if j == m else 0.0)
                step = step + 0.5 * np.einsum("bik,bk->bi", jac[m], sig[j]) * prod[:, None]
        X = X + step
        _check(X, k, "milstein")
        states[:, k + 1, :] = X
    return Trajectory(grid, states, "milstein")


def _certified(V: VectorField, t_max: float, samples: np.ndarray, target: float) -> FlowSpec:
    spec = V.flow if V.flow is not None else FlowSpec.numeric()
    return certify_substeps(V, spec, t_max, samples, target=target)


def simulate_nv(
    model: SdeModel,
    grid: TimeGrid,
    path: BrownianPath,
    eta: RademacherSeq | None,
    flow_target: float = FLOW_TARGET,
) -> Trajectory:
    """Ninomiya-Victoir splitting.

    Each step runs the Stratonovich drift for h/2, then the Brownian fields
    for their increments, then the drift for h/2 again.  With eta = +1 the
    Brownian fields act in the order 1, ..., d; with eta = -1 in the order
    d, ..., 1.  ``eta=None`` fixes the ascending order.

    Numeric flows get the smallest substep count whose estimated error is
    below ``flow_target * max(1, |x|)`` near x0.
    """
    dW = _driving(grid, path)
    h = grid.h
    d = model.d
    if eta is not None and eta.values.shape != (path.batch, grid.N):
        raise ConfigError(f"sign sequence has shape {eta.values.shape}, expected {(path.batch, grid.N)}")
    s0 = model.strat_drift
    samples = probe_points(model.x0, count=16)
    drift_spec = _certified(s0, 0.5 * h, samples, flow_target)
    sig_specs = [_certified(s, 6.0 * np.sqrt(h), samples, flow_target) for s in model.sigma]

    states = _start(model, path.batch, grid.N)
    X = states[:, 0, :].copy()
    for k in range(grid.N):
        X = flow(s0, drift_spec, 0.5 * h, X)
        if eta is None or d == 1:
            for j in range(d):
                X = flow(model.sigma[j], sig_specs[j], dW[:, j, k], X)
        else:
            up = eta.values[:, k] > 0
            for pos in range(d):
                j_up, j_down = pos, d - 1 - pos
                if j_up == j_down:
                    X = flow(model.sigma[j_up], sig_specs[j_up], dW[:, j_up, k], X)
                    continue
                # flows for zero time are exact identities, so masking is lossless
                for j, mask in ((j_up, up), (j_down, ~up)):
                    if np.any(mask):
                        X = flow(model.sigma[j], sig_specs[j], np.where(mask, dW[:, j, k], 0.0), X)
        X = flow(s0, drift_spec, 0.5 * h, X)
        _check(X, k, "nv")
        states[:, k + 1, :] = X
    tag = "nv" if eta is None else "nv-eta"
    return Trajectory(grid, states, tag)


def simulate_nv_commuting(
    model: SdeModel, grid: TimeGrid, path: BrownianPath, flow_target: float = FLOW_TARGET, check: bool = True
) -> Trajectory:
    """Ninomiya-Victoir with the fixed ascending order, for commuting Brownian fields.

    Runs on any model; when the fields do not commute a warning is attached.
    """
    traj = simulate_nv(model, grid, path, None, flow_target=flow_target)
    if check and model.d > 1 and not model.commutativity.brownian_commute:
        msg = (
            f"Brownian fields of model {model.name} do not commute "
            f"(max bracket norm {model.commutativity.brownian_max:.3g}); fixed-order NV is only order 1/2 here"
        )
        _warnings.warn(msg, RuntimeWarning, stacklevel=2)
        traj = Trajectory(traj.grid, traj.states, traj.scheme, (msg,))
    return traj


def exact_trajectory(model: SdeModel, grid: TimeGrid, path: BrownianPath) -> Trajectory:
    if model.exact is None:
        raise UnsupportedModel(f"model {model.name} has no exact solution")
    stride = path.grid.N // grid.N
    if stride * grid.N != path.grid.N:
        raise ConfigError(f"grid with {grid.N} steps does not divide the path grid ({path.grid.N} steps)")
    W = path.values()[..., ::stride]
    states = np.asarray(model.exact(grid.times, W), dtype=float)
    states[:, 0, :] = model.x0
    return Trajectory(grid, states, "exact")


def reference_solution(model: SdeModel, grid_coarse: TimeGrid, path: BrownianPath, cfg: RefConfig) -> Trajectory:
    """Pathwise stand-in for the true solution at the coarse grid times.

    The exact solution when the model has one; otherwise fixed-order NV on
    the grid ``cfg.refinement`` times finer, driven by the same path.
    """
    r = int(cfg.refinement)
    if path.grid.N % (grid_coarse.N * r):
        raise ConfigError(
            f"path grid ({path.grid.N} steps) is not a multiple of {grid_coarse.N} x refinement {r}"
        )
    if model.exact is not None:
        return exact_trajectory(model, grid_coarse, path)
    fine = grid_coarse.refined(r)
    traj = simulate_nv_commuting(model, fine, path, check=False)
    return Trajectory(grid_coarse, traj.states[:, ::r, :], "reference")


def run_scheme(name: str, model: SdeModel, grid: TimeGrid, path: BrownianPath) -> Trajectory:
    """Dispatch by scheme name; ``nv-eta`` draws its signs from the path's seed and indices."""
    if name == "euler":
        return simulate_euler(model, grid, path)
    if name == "milstein":
        return simulate_milstein(model, grid, path)
    if name == "nv":
        return simulate_nv_commuting(model, grid, path, check=False)
    if name == "nv-eta":
        eta = make_rademacher(path.seed, path.path_indices, grid.N)
        return simulate_nv(model, grid, path, eta)
    if name == "exact":
        return exact_trajectory(model, grid, path)
    raise ConfigError(f"unknown scheme {name!r}; choose from {', '.join(SCHEMES)}")
