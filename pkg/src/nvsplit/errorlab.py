"""Strong-error measurement, rate fits and asymptotic error laws.

Monte Carlo work is split into fixed-size chunks of consecutive path
indices.  Chunks may run on several threads, but their composition and the
order of every reduction depend only on the path count, so results are
identical for any number of workers.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, DegenerateData, DomainError
from .paths import AUX_STREAM, TimeGrid, gaussian_block, make_path
from .schemes import RefConfig, exact_trajectory, reference_solution, run_scheme, simulate_nv_commuting
from .vecfield import SdeModel, evaluate, jacobian, lie_bracket

log = logging.getLogger(__name__)

CHUNK = 1000
DEGENERACY_FLOOR = 1e-12
Z95 = 1.959963984540054
# limit-SDE paths live far from the empirical path indices
LIMIT_PATH_OFFSET = 1 << 40
GATE_PATH_OFFSET = 1 << 41


@dataclass(frozen=True)
class RateRow:
    N: int
    M: int
    err: float
    ci_half: float


@dataclass
class RateTable:
    rows: list
    slope: float | None = None
    intercept: float | None = None
    slope_ci: float | None = None
    degenerate: bool = False
    ref_gap: float | None = None
    gate_ok: bool | None = None

    @classmethod
    def from_errors(cls, Ns: Sequence[int], errs: Sequence[float], M: int = 0) -> "RateTable":
        return cls([RateRow(int(N), M, float(e), 0.0) for N, e in zip(Ns, errs)])

    @property
    def Ns(self) -> np.ndarray:
        return np.array([r.N for r in self.rows])

    @property
    def errs(self) -> np.ndarray:
        return np.array([r.err for r in self.rows])

    def to_csv(self) -> str:
        lines = ["N,M,err,ci_half"]
        lines += [f"{r.N},{r.M},{r.err:.17g},{r.ci_half:.17g}" for r in self.rows]
        slope = float("nan") if self.slope is None else self.slope
        ci = float("nan") if self.slope_ci is None else self.slope_ci
        lines += [f"slope,{slope:.17g}", f"slope_ci,{ci:.17g}"]
        return "\n".join(lines) + "\n"


@dataclass
class ErrorSampleSet:
    kind: str
    N: int | None
    samples: np.ndarray
    seed: int
    path_offset: int = 0

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.kind not in ("U_N", "V_N", "U_limit", "V_limit"):
            raise ConfigError(f"unknown sample kind {self.kind!r}")
        if self.samples.shape[0] < 2 or not np.all(np.isfinite(self.samples)):
            raise ConfigError("sample sets need at least two finite rows")

    @property
    def M(self) -> int:
        return int(self.samples.shape[0])

    def to_csv(self) -> str:
        n = self.samples.shape[1]
        lines = [",".join(f"x{i + 1}" for i in range(n))]
        lines += [",".join(f"{v:.17g}" for v in row) for row in self.samples]
        return "\n".join(lines) + "\n"


@dataclass
class CoordComparison:
    coord: str
    mean_a: float
    mean_b: float
    var_a: float
    var_b: float
    ks: float
    p: float
    mean_z: float
    var_z: float
    degenerate: bool = False


@dataclass
class ComparisonReport:
    rows: list
    alpha: float
    passed: bool = field(default=False)

    def to_csv(self) -> str:
        lines = ["coord,mean_a,mean_b,var_a,var_b,ks,p"]
        for r in self.rows:
            lines.append(
                ",".join([r.coord] + [f"{v:.17g}" for v in (r.mean_a, r.mean_b, r.var_a, r.var_b, r.ks, r.p)])
            )
        return "\n".join(lines) + "\n"


def _chunks(M: int) -> list[np.ndarray]:
    return [np.arange(s, min(s + CHUNK, M)) for s in range(0, M, CHUNK)]


def _map_chunks(fn: Callable, M: int, workers: int) -> list:
    chunks = _chunks(M)
    if workers <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def _check_ladder(N_list: Sequence[int]) -> list[int]:
    Ns = [int(N) for N in N_list]
    if not Ns or any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ConfigError(f"N list must be non-empty and strictly increasing, got {Ns}")
    top = Ns[-1]
    for N in Ns:
        ratio = top // N
        if N < 1 or top % N or ratio & (ratio - 1):
            raise ConfigError(f"every N must divide {top} by a power of two, got {N}")
    return Ns


def variance_se(x) -> float:
    """Large-sample standard error of the sample variance."""
    x = np.asarray(x, dtype=float)
    c = x - x.mean()
    m2 = np.mean(c ** 2)
    m4 = np.mean(c ** 4)
    return float(math.sqrt(max(m4 - m2 ** 2, 0.0) / x.shape[0]))


def _max_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.max(np.sum((a - b) ** 2, axis=-1), axis=-1)


def strong_error(
    model: SdeModel,
    scheme: str,
    N_list: Sequence[int],
    M: int,
    master_seed: int,
    ref_cfg: RefConfig | None = None,
    workers: int = 1,
) -> RateTable:
    """E[max_k |X_tk - Xhat_tk|^2]^(1/2) for each N, on coupled paths.

    The reference is computed once on the finest requested grid (or its
    refinement) and subsampled for coarser N.  The CI half-width comes from
    the sample variance of the max-squared statistic through the delta method.
    """
    cfg = ref_cfg or RefConfig()
    Ns = _check_ladder(N_list)
    if M < 2:
        raise ConfigError("need at least two paths")
    top = Ns[-1]
    fine = TimeGrid(model.T, top * cfg.refinement)
    coarse_top = TimeGrid(model.T, top)

    def work(idx):
        path = make_path(master_seed, idx, model.d, fine)
        ref = reference_solution(model, coarse_top, path, cfg)
        out = []
        for N in Ns:
            if scheme == "exact" and model.exact is not None:
                out.append(np.zeros(idx.shape[0]))
                continue
            traj = run_scheme(scheme, model, TimeGrid(model.T, N), path)
            out.append(_max_sq(traj.states, ref.states[:, :: top // N]))
        return np.stack(out)

    stat = np.concatenate(_map_chunks(work, M, workers), axis=1)
    rows = []
    for N, Y in zip(Ns, stat):
        mean = float(np.mean(Y))
        err = math.sqrt(mean)
        se = float(np.std(Y, ddof=1)) / math.sqrt(M)
        rows.append(RateRow(N, M, err, Z95 * se / (2.0 * err) if err > 0 else 0.0))
    table = RateTable(rows)

    if model.exact is None and cfg.gate_paths > 0 and scheme != "exact":
        table.ref_gap, scheme_err = _reference_gate(model, scheme, top, master_seed, cfg)
        table.gate_ok = table.ref_gap < scheme_err
        if not table.gate_ok:
            log.warning(
                "reference gate failed: refinement %d vs %d differ by %.3g, scheme error %.3g",
                cfg.refinement, 2 * cfg.refinement, table.ref_gap, scheme_err,
            )
    try:
        table.slope, table.intercept, table.slope_ci = fit_rate(table)
    except DegenerateData:
        table.degenerate = True
    return table


def _reference_gate(model, scheme, N, master_seed, cfg) -> tuple[float, float]:
    """RMS gap between references at refinements r and 2r, and the scheme error, on a few paths."""
    idx = GATE_PATH_OFFSET + np.arange(cfg.gate_paths)
    grid = TimeGrid(model.T, N)
    path = make_path(master_seed, idx, model.d, grid.refined(2 * cfg.refinement))
    ref_r = reference_solution(model, grid, path, cfg)
    ref_2r = reference_solution(model, grid, path, RefConfig(2 * cfg.refinement, cfg.gate_paths))
    traj = run_scheme(scheme, model, grid, path)
    gap = math.sqrt(float(np.mean(_max_sq(ref_r.states, ref_2r.states))))
    err = math.sqrt(float(np.mean(_max_sq(traj.states, ref_2r.states))))
    return gap, err


def fit_rate(table: RateTable) -> tuple[float, float, float]:
    """Least-squares fit of log err against log N.

    Returns ``(order, intercept, ci_half)`` where ``order`` is the negated
    slope and ``ci_half`` the 95% half-width from the residual variance.
    """
    Ns, errs = table.Ns, table.errs
    if len(Ns) < 3:
        raise ConfigError(f"a rate fit needs at least 3 rows, got {len(Ns)}")
    if np.any(errs <= DEGENERACY_FLOOR):
        raise DegenerateData(f"errors at or below the floor {DEGENERACY_FLOOR:g}: {errs.tolist()}")
    x, y = np.log(Ns.astype(float)), np.log(errs)
    xc = x - x.mean()
    sxx = float(np.sum(xc ** 2))
    beta = float(np.sum(xc * (y - y.mean())) / sxx)
    intercept = float(y.mean() - beta * x.mean())
    resid = y - (intercept + beta * x)
    dof = len(Ns) - 2
    s2 = float(np.sum(resid ** 2)) / dof if dof > 0 else 0.0
    ci = float(stats.t.ppf(0.975, dof) * math.sqrt(s2 / sxx)) if dof > 0 else float("inf")
    return -beta, intercept, ci


def normalized_error_samples(
    model: SdeModel,
    N: int,
    M: int,
    master_seed: int,
    ref_cfg: RefConfig | None = None,
    kind: str = "U_N",
    workers: int = 1,
) -> ErrorSampleSet:
    """Terminal N(X - X^NV) (kind U_N) or sqrt(N)(X - X^{NV,eta}) (kind V_N)."""
    cfg = ref_cfg or RefConfig()
    if kind not in ("U_N", "V_N"):
        raise ConfigError(f"kind must be U_N or V_N, got {kind!r}")
    scheme, scale = ("nv", float(N)) if kind == "U_N" else ("nv-eta", math.sqrt(N))
    grid = TimeGrid(model.T, N)

    def work(idx):
        path = make_path(master_seed, idx, model.d, grid.refined(cfg.refinement))
        ref = reference_solution(model, grid, path, cfg)
        traj = run_scheme(scheme, model, grid, path)
        return scale * (ref.terminal - traj.terminal)

    samples = np.concatenate(_map_chunks(work, M, workers), axis=0)
    return ErrorSampleSet(kind, N, samples, master_seed)


def _limit_sde(model, M, fine_N, master_seed, source, n_aux, kind, workers, path_offset):
    grid = TimeGrid(model.T, fine_N)
    h = grid.h

    def work(idx):
        idx = idx + path_offset
        path = make_path(master_seed, idx, model.d, grid)
        if model.exact is not None:
            X = exact_trajectory(model, grid, path).states
        else:
            X = simulate_nv_commuting(model, grid, path, check=False).states
        dW = path.increments
        dB = math.sqrt(h) * gaussian_block(master_seed, idx, [AUX_STREAM + a for a in range(n_aux)], fine_N)
        U = np.zeros((idx.shape[0], model.n))
        for k in range(fine_N):
            x = X[:, k, :]
            nxt = U + source(x, dB[:, :, k]) + h * np.einsum("bik,bk->bi", jacobian(model.b, x), U)
            for j, s in enumerate(model.sigma):
                nxt = nxt + np.einsum("bik,bk->bi", jacobian(s, x), U) * dW[:, j, k, None]
            U = nxt
        return U

    samples = np.concatenate(_map_chunks(work, M, workers), axis=0)
    return ErrorSampleSet(kind, None, samples, master_seed, path_offset)


def simulate_limit_sde_u(
    model: SdeModel,
    M: int,
    fine_N: int,
    master_seed: int,
    source_scale: float = 1.0,
    workers: int = 1,
    path_offset: int = LIMIT_PATH_OFFSET,
) -> ErrorSampleSet:
    """Euler samples of the terminal value of the commuting-case limit error.

    dU = T/(2 sqrt 3) sum_j [s0, s_j](X) dB~^j + db(X) U dt + sum_j ds_j(X) U dW^j,
    U_0 = 0, with B~ independent of W.  ``source_scale`` multiplies the
    bracket source and exists for linearity checks.
    """
    s0 = model.strat_drift
    c = source_scale * model.T / (2.0 * math.sqrt(3.0))

    def source(x, dB):
        out = np.zeros_like(x)
        for j, s in enumerate(model.sigma):
            out = out + lie_bracket(s0, s, x) * dB[:, j, None]
        return c * out

    return _limit_sde(model, M, fine_N, master_seed, source, model.d, "U_limit", workers, path_offset)


def simulate_limit_sde_v(
    model: SdeModel,
    M: int,
    fine_N: int,
    master_seed: int,
    workers: int = 1,
    path_offset: int = LIMIT_PATH_OFFSET,
) -> ErrorSampleSet:
    """Euler samples of the terminal value of the general-case limit error.

    dV = sqrt(T/2) sum_{m<j} [s_j, s_m](X) dB^{j,m} + db(X) V dt + sum_j ds_j(X) V dW^j,
    with d(d-1)/2 auxiliary Brownian motions independent of W.
    """
    pairs = [(j, m) for j in range(model.d) for m in range(j)]
    c = math.sqrt(model.T / 2.0)

    def source(x, dB):
        out = np.zeros_like(x)
        for a, (j, m) in enumerate(pairs):
            out = out + lie_bracket(model.sigma[j], model.sigma[m], x) * dB[:, a, None]
        return c * out

    return _limit_sde(model, M, fine_N, master_seed, source, len(pairs), "V_limit", workers, path_offset)


def compare_distributions(
    a: ErrorSampleSet, b: ErrorSampleSet, alpha: float = 0.01, atol: float = 1e-6
) -> ComparisonReport:
    """Per-coordinate (and Euclidean-norm) two-sample comparison.

    Coordinates where both samples stay within ``atol`` of zero are treated
    as identical point masses at zero.  ``passed`` requires every KS p-value
    to be at least ``alpha``.
    """
    A, B = a.samples, b.samples
    if A.shape[1] != B.shape[1]:
        raise ConfigError(f"sample dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    cols = [(f"x{i + 1}", A[:, i], B[:, i]) for i in range(A.shape[1])]
    cols.append(("norm", np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)))
    rows = []
    for name, x, y in cols:
        ma, mb = float(np.mean(x)), float(np.mean(y))
        va, vb = float(np.var(x, ddof=1)), float(np.var(y, ddof=1))
        if max(np.max(np.abs(x)), np.max(np.abs(y))) <= atol:
            rows.append(CoordComparison(name, ma, mb, va, vb, 0.0, 1.0, 0.0, 0.0, degenerate=True))
            continue
        res = stats.ks_2samp(x, y)
        se_mean = math.sqrt(va / len(x) + vb / len(y))
        se_var = math.hypot(variance_se(x), variance_se(y))
        rows.append(
            CoordComparison(
                name, ma, mb, va, vb, float(res.statistic), float(res.pvalue),
                (ma - mb) / se_mean if se_mean > 0 else 0.0,
                (va - vb) / se_var if se_var > 0 else 0.0,
            )
        )
    return ComparisonReport(rows, alpha, passed=all(r.p >= alpha for r in rows))


def bracket_mn(t: float, N: int, T: float) -> float:
    """Predictable bracket of the normalized error martingale at time t.

    N^2/12 * (floor(N t / T) T^3 / N^3 + (t - tau)^3), with tau the grid point
    floor(N t / T) T / N.  The floor carries a relative guard of 1e-12 so a
    grid point t_k counts k full intervals; there the remainder vanishes and
    the value is t_k T^2 / 12.
    """
    N = int(N)
    if N < 1:
        raise DomainError(f"N must be >= 1, got {N}")
    if not (T > 0) or not (0.0 <= t <= T):
        raise DomainError(f"need 0 <= t <= T and T > 0, got t={t}, T={T}")
    k = min(math.floor((t / T) * N + 1e-12 * N), N)
    tau = k * T / N
    r = t - tau
    if r < 0.0:
        r = 0.0
    # N^2/12 * k T^3/N^3 regrouped as T^2/12 * (k T/N) so grid points reproduce t T^2/12
    return T * T * tau / 12.0 + N * N * r ** 3 / 12.0
