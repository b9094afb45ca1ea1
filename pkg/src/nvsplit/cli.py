"""Command-line experiment runner.

Settings come from built-in defaults, then an optional flat ``key=value``
file (``--config``), then command-line flags.  Every run writes its CSV
outputs plus ``manifest.csv`` with the fully resolved settings; figures are
rendered next to them unless ``--no-plot`` is given.

Exit codes: 0 success, 1 numerical or library failure, 2 degenerate rate
data, 64 configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import errorlab
from .errors import ConfigError, DegenerateData, NVError
from .models import build_model
from .paths import TimeGrid, make_path
from .schemes import SCHEMES, RefConfig, run_scheme
from .vecfield import check_commutativity

EXIT_OK, EXIT_FAIL, EXIT_DEGENERATE, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("nvsplit")

DEFAULTS = {
    "model": "bs",
    "scheme": "nv",
    "N": "16,32,64,128,256",
    "M": "1000",
    "T": "",
    "x0": "",
    "seed": "",
    "ref_refine": "16",
    "out": "out",
    "alpha": "0.01",
    "kind": "U_N",
    "fine_N": "1024",
    "t": "",
    "tol": "1e-9",
    "workers": "1",
    "path_index": "0",
    "plot": "1",
}

# flag spelling -> config key
FLAG_KEYS = {
    "--model": "model",
    "--scheme": "scheme",
    "--N": "N",
    "--M": "M",
    "--T": "T",
    "--x0": "x0",
    "--seed": "seed",
    "--ref-refine": "ref_refine",
    "--out": "out",
    "--alpha": "alpha",
    "--kind": "kind",
    "--fine-N": "fine_N",
    "--t": "t",
    "--tol": "tol",
    "--workers": "workers",
    "--path-index": "path_index",
}


class ConfigParseError(ConfigError):
    def __init__(self, source: str, line: int, col: int, msg: str):
        super().__init__(f"{source}:{line}:{col}: {msg}")
        self.line, self.col = line, col


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment.  Keys may use - or _."""
    known = set(DEFAULTS)
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        if "=" not in line:
            col = len(line) - len(line.lstrip()) + 1
            raise ConfigParseError(source, lineno, col, f"expected key=value, got {line.strip()!r}")
        key, value = line.split("=", 1)
        col = len(key) - len(key.lstrip()) + 1
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigParseError(source, lineno, col, "empty key")
        if key not in known and not key.startswith("param."):
            raise ConfigParseError(source, lineno, col, f"unknown key {key!r}")
        if key in out:
            raise ConfigParseError(source, lineno, col, f"duplicate key {key!r}")
        out[key] = value.strip()
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nvsplit", description="Ninomiya-Victoir splitting experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "converge": "strong-error ladder and fitted convergence order",
        "errordist": "normalized-error samples against the limit SDE",
        "check-commute": "sample-based Lie-bracket commutativity report",
        "bracket-check": "closed-form predictable bracket versus its limit",
        "simulate": "dump one trajectory of one scheme",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="flat key=value settings file")
        for flag in FLAG_KEYS:
            p.add_argument(flag, dest=FLAG_KEYS[flag], default=None)
        p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                       help="model parameter, repeatable")
        p.add_argument("--no-plot", dest="plot", action="store_const", const="0", default=None)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve(args: argparse.Namespace) -> dict[str, str]:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        cfg.update(parse_config_text(text, str(path)))
    for key in set(FLAG_KEYS.values()) | {"plot"}:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for i, item in enumerate(args.param, start=1):
        if "=" not in item:
            raise ConfigParseError("--param", i, 1, f"expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg[f"param.{k.strip()}"] = v.strip()
    return cfg


def _int(cfg, key) -> int:
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {cfg[key]!r}") from None


def _float(cfg, key) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {cfg[key]!r}") from None


def _int_list(cfg, key) -> list[int]:
    try:
        return [int(v) for v in cfg[key].split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {cfg[key]!r}") from None


def _seed(cfg) -> int:
    if cfg["seed"] == "":
        raise ConfigError("seed is required (--seed or seed= in the config file)")
    return _int(cfg, "seed")


def _powers_of_two(Ns, key="N"):
    for N in Ns:
        if N < 1 or N & (N - 1):
            raise ConfigError(f"{key}: every grid size must be a power of two, got {N}")


def _model(cfg):
    params = {k[len("param."):]: v for k, v in cfg.items() if k.startswith("param.")}
    if cfg["T"]:
        params["T"] = cfg["T"]
    if cfg["x0"]:
        params["x0"] = cfg["x0"]
    return build_model(cfg["model"], params)


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return path


def _kv_csv(items) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["key", "value"])
    for k, v in items:
        writer.writerow([k, f"{v:.17g}" if isinstance(v, float) else v])
    return buf.getvalue()


def _manifest(out: Path, command: str, cfg: dict, extra=()) -> None:
    items = [("command", command)] + sorted(cfg.items()) + list(extra)
    _write(out, "manifest.csv", _kv_csv(items))


def _plotting_enabled(cfg) -> bool:
    return cfg["plot"] not in ("0", "false", "no", "")


def cmd_converge(cfg: dict, out: Path) -> int:
    model = _model(cfg)
    Ns = _int_list(cfg, "N")
    _powers_of_two(Ns)
    if cfg["scheme"] not in SCHEMES:
        raise ConfigError(f"scheme: unknown {cfg['scheme']!r}; choose from {', '.join(SCHEMES)}")
    table = errorlab.strong_error(
        model, cfg["scheme"], Ns, _int(cfg, "M"), _seed(cfg),
        RefConfig(_int(cfg, "ref_refine")), workers=_int(cfg, "workers"),
    )
    _write(out, "rates.csv", table.to_csv())
    extra = [("degenerate", int(table.degenerate))]
    if table.ref_gap is not None:
        extra += [("ref_gap", table.ref_gap), ("ref_gate_ok", int(bool(table.gate_ok)))]
    _manifest(out, "converge", cfg, extra)
    if _plotting_enabled(cfg):
        from .plotting import plot_rates

        plot_rates(table, out / "rates.png", title=f"{model.name} / {cfg['scheme']}")
    for r in table.rows:
        print(f"N={r.N:6d}  err={r.err:.6e}  +/- {r.ci_half:.2e}")
    if table.degenerate:
        print("errors at the numerical floor: no rate fitted (degenerate)")
        return EXIT_DEGENERATE
    print(f"order = {table.slope:.4f} +/- {table.slope_ci:.4f}")
    return EXIT_OK


def cmd_errordist(cfg: dict, out: Path) -> int:
    model = _model(cfg)
    Ns = _int_list(cfg, "N")
    N = Ns[-1]
    _powers_of_two([N])
    kind = cfg["kind"]
    if kind not in ("U_N", "V_N"):
        raise ConfigError(f"kind: expected U_N or V_N, got {kind!r}")
    M, seed, workers = _int(cfg, "M"), _seed(cfg), _int(cfg, "workers")
    fine_N = _int(cfg, "fine_N")
    emp = errorlab.normalized_error_samples(
        model, N, M, seed, RefConfig(_int(cfg, "ref_refine")), kind=kind, workers=workers
    )
    if kind == "U_N":
        lim = errorlab.simulate_limit_sde_u(model, M, fine_N, seed, workers=workers)
    else:
        lim = errorlab.simulate_limit_sde_v(model, M, fine_N, seed, workers=workers)
    report = errorlab.compare_distributions(emp, lim, alpha=_float(cfg, "alpha"))
    _write(out, "empirical.csv", emp.to_csv())
    _write(out, "limit.csv", lim.to_csv())
    _write(out, "comparison.csv", report.to_csv())
    _manifest(out, "errordist", {**cfg, "N": str(N)}, [("passed", int(report.passed))])
    if _plotting_enabled(cfg):
        from .plotting import plot_distributions

        plot_distributions(emp, lim, out / "errordist.png", title=f"{model.name}, {kind}, N={N}")
    for r in report.rows:
        print(f"{r.coord:>5}: mean {r.mean_a:+.4f} vs {r.mean_b:+.4f}  var {r.var_a:.4f} vs {r.var_b:.4f}  "
              f"KS {r.ks:.4f} (p={r.p:.3f})")
    print("comparison", "passed" if report.passed else "FAILED", f"at alpha={report.alpha}")
    return EXIT_OK


def cmd_check_commute(cfg: dict, out: Path) -> int:
    model = _model(cfg)
    rep = check_commutativity(model, tol=_float(cfg, "tol"))
    items = [
        ("model", model.name),
        ("brownian_commute", int(rep.brownian_commute)),
        ("drift_commutes", int(rep.drift_commutes)),
        ("brownian_max", rep.brownian_max),
        ("drift_max", rep.drift_max),
        ("n_points", rep.n_points),
        ("tol", rep.tol),
    ]
    _write(out, "commute.csv", _kv_csv(items))
    _manifest(out, "check-commute", cfg)
    print(f"brownian fields commute: {rep.brownian_commute} (max |[s_j,s_m]| = {rep.brownian_max:.3e})")
    print(f"drift commutes:          {rep.drift_commutes} (max |[s_0,s_j]| = {rep.drift_max:.3e})")
    return EXIT_OK


def cmd_bracket_check(cfg: dict, out: Path) -> int:
    T = _float(cfg, "T") if cfg["T"] else 1.0
    Ns = _int_list(cfg, "N")
    ts = [float(v) for v in cfg["t"].split(",") if v.strip()] if cfg["t"] else [T / 3.0]
    lines = ["N,t,bracket,limit,gap,bound"]
    rows = []
    for N in Ns:
        for t in ts:
            val = errorlab.bracket_mn(t, N, T)
            lim = t * T * T / 12.0
            bound = T ** 3 / (12.0 * N)
            rows.append((N, t, val, lim))
            lines.append(",".join([str(N)] + [f"{v:.17g}" for v in (t, val, lim, val - lim, bound)]))
            print(f"N={N:6d} t={t:.6g}  bracket={val:.12g}  limit={lim:.12g}  gap={val - lim:+.3e}")
    _write(out, "bracket.csv", "\n".join(lines) + "\n")
    _manifest(out, "bracket-check", {**cfg, "T": repr(T)})
    if _plotting_enabled(cfg):
        from .plotting import plot_bracket

        plot_bracket(rows, T, out / "bracket.png")
    return EXIT_OK


def cmd_simulate(cfg: dict, out: Path) -> int:
    model = _model(cfg)
    N = _int_list(cfg, "N")[-1]
    r = _int(cfg, "ref_refine")
    grid = TimeGrid(model.T, N)
    path = make_path(_seed(cfg), [_int(cfg, "path_index")], model.d, grid.refined(r))
    traj = run_scheme(cfg["scheme"], model, grid, path)
    _write(out, "trajectory.csv", traj.to_csv(0))
    _manifest(out, "simulate", cfg)
    if _plotting_enabled(cfg):
        from .plotting import plot_trajectory

        plot_trajectory(traj, out / "trajectory.png", title=f"{model.name} / {cfg['scheme']}")
    print(f"terminal state: {np.array2string(traj.terminal[0], precision=10)}")
    return EXIT_OK


COMMANDS = {
    "converge": cmd_converge,
    "errordist": cmd_errordist,
    "check-commute": cmd_check_commute,
    "bracket-check": cmd_bracket_check,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"nvsplit: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateData as exc:
        print(f"nvsplit: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (NVError, ArithmeticError) as exc:
        print(f"nvsplit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
