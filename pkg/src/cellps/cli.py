"""Command-line surface: stationary solves, the balance fixed point,
sweeps, simulation, coupling and the invariant battery.

Configuration is plain ``key = value`` text (``[section]`` headers are
allowed for organization and ignored); command-line flags override file
values.  Every run writes a provenance header (version, resolved
configuration, its hash, seed) as CSV comments or JSON metadata, and the
same configuration and seed always produce byte-identical output.

Exit codes: 0 success, 1 usage or configuration error, 2 no solution to
the balance equation, 3 truncation failure, 4 invariant-audit failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .ctmc import (
    TruncationBox,
    TruncationFailureError,
    adapt_truncation,
    build_generator,
    f_empty,
    f_mean_x1,
    f_mean_x2,
    stationary_direct,
    stationary_power,
    tv_distance,
)
from .fixpoint import (
    NoSolution,
    flow_balance_report,
    solve_lambda_net,
)
from .htlab import (
    DEFAULT_LAMBDA_GRID,
    DEFAULT_RHO_GRID,
    LambdaSweepRow,
    RhoSweepRow,
    ThetaZeroRow,
    row_header,
    row_values,
    sweep_lambda_tot,
    sweep_rho,
    theta_zero_ht,
)
from .models import (
    ConstrainedParams,
    CouplingParams,
    FreeParams,
    alpha_rate,
    beta_rate,
    free_rates,
    mm1_rates,
    mm1_stationary,
    mminfty_rates,
    mminfty_stationary,
    z_empty_probability,
    z_rates,
)
from .simulate import SimConfig, cycle_statistics, simulate_coupled, simulate_path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NO_SOLUTION = 2
EXIT_TRUNCATION = 3
EXIT_AUDIT = 4

COMMANDS = ("stationary", "fixpoint", "sweep-rho", "sweep-lambda",
            "simulate", "couple", "cycles", "verify")

# key -> (type tag, default, requires-positive)
_SCHEMA = {
    "command": ("str", None, False),
    "lambda1": ("float", None, False),
    "lambda2": ("float", None, False),
    "lambda_net": ("float", None, False),
    "mu": ("float", None, True),
    "theta": ("float", None, False),
    "beta": ("float", 1.0, True),
    "epsilon": ("float", 0.1, True),
    "tol": ("float", 1e-8, True),
    "seed": ("int", 12345, False),
    "horizon": ("int", 100000, True),
    "warmup": ("int", None, False),
    "batches": ("int", 32, True),
    "seeds": ("int", 20, True),
    "cycles": ("int", 2000, True),
    "k": ("int", None, True),
    "rho_grid": ("floatlist", None, False),
    "lambda_grid": ("floatlist", None, False),
    "out": ("str", None, False),
    "format": ("str", "csv", False),
    "dump_trace": ("bool", False, False),
}

_NONNEG = ("lambda1", "lambda2", "lambda_net", "theta")

_REQUIRED = {
    "stationary": ("lambda1", "lambda2", "lambda_net", "mu", "theta"),
    "fixpoint": ("lambda1", "lambda2", "mu", "theta"),
    "sweep-rho": ("lambda1", "lambda2", "mu", "theta"),
    "sweep-lambda": ("lambda1", "lambda2", "mu", "theta"),
    "simulate": ("lambda1", "lambda2", "lambda_net", "mu", "theta"),
    "couple": ("lambda1", "lambda2", "lambda_net", "mu", "theta"),
    "cycles": ("lambda1", "lambda2", "lambda_net", "mu", "theta"),
    "verify": (),
}


class ConfigError(Exception):
    """Carries every validation error found, each with its location."""

    def __init__(self, errors):
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in errors))
        self.errors = errors


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)


def _coerce(key, raw, loc, errors):
    kind = _SCHEMA[key][0]
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            return int(raw)
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes"):
                return True
            if str(raw).lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "floatlist":
            if isinstance(raw, (list, tuple)):
                return [float(v) for v in raw]
            return [float(v) for v in str(raw).replace(";", ",").split(",") if v.strip()]
        return str(raw)
    except (TypeError, ValueError) as exc:
        errors.append((loc, f"key {key!r}: {exc}"))
        return None


def parse_config(path=None, overrides=None, command=None) -> RunConfig:
    """Resolve file values, flag overrides and defaults into a RunConfig.

    Range checks happen here (a negative service rate is a configuration
    error); model-level feasibility (for instance a saturated load under
    the fixpoint command) is deliberately left to run time.
    """
    errors = []
    values = {}
    seen = set()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError([(str(path), str(exc))])
        for ln, line in enumerate(lines, start=1):
            loc = f"{path}:{ln}"
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if stripped.startswith("[") and stripped.endswith("]"):
                continue  # organizational section header
            if "=" not in stripped:
                errors.append((loc, f"expected key = value, got {stripped!r}"))
                continue
            key, raw = (s.strip() for s in stripped.split("=", 1))
            if key not in _SCHEMA:
                errors.append((loc, f"unknown key {key!r}"))
                continue
            if key in seen:
                errors.append((loc, f"duplicate key {key!r}"))
                continue
            seen.add(key)
            val = _coerce(key, raw, loc, errors)
            if val is not None:
                values[key] = val
    for key, raw in (overrides or {}).items():
        loc = f"--{key.replace('_', '-')}"
        if key not in _SCHEMA:
            errors.append((loc, f"unknown key {key!r}"))
            continue
        val = _coerce(key, raw, loc, errors)
        if val is not None:
            values[key] = val

    cmd = command or values.get("command")
    if cmd is None:
        errors.append(("command", "no command given"))
    elif cmd not in COMMANDS:
        errors.append(("command", f"unknown command {cmd!r}"))
    elif "command" in values and values["command"] != cmd:
        errors.append(("command",
                       f"config says {values['command']!r}, invoked as {cmd!r}"))
    if errors:
        raise ConfigError(errors)

    for key, (kind, default, _pos) in _SCHEMA.items():
        if key not in values and default is not None:
            values[key] = default
    values["command"] = cmd

    for key in _REQUIRED[cmd]:
        if key not in values:
            errors.append((key, f"required by command {cmd!r} and missing"))
    for key, val in values.items():
        kind, _default, positive = _SCHEMA[key]
        if positive and isinstance(val, (int, float)) and val <= 0:
            errors.append((key, f"must be positive, got {val}"))
        if key in _NONNEG and val is not None and val < 0:
            errors.append((key, f"must be nonnegative, got {val}"))
    if values.get("format") not in ("csv", "json"):
        errors.append(("format", f"must be csv or json, got {values.get('format')!r}"))
    if errors:
        raise ConfigError(errors)
    return RunConfig(command=cmd, values=values)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if v is None:
        return ""
    # data rows must stay free of the CSV separator and comment marker
    return str(v).replace(",", ";").replace("#", "")


def config_hash(cfg: RunConfig) -> str:
    payload = "\n".join(f"{k}={_fmt(v)}" for k, v in sorted(cfg.values.items())
                        if k != "out")
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _meta(cfg: RunConfig) -> dict:
    meta = {"version": __version__, "config_hash": config_hash(cfg)}
    meta.update({k: cfg.values[k] for k in sorted(cfg.values) if k != "out"})
    return meta


def write_output(cfg: RunConfig, header, rows, stream=None):
    meta = _meta(cfg)
    out = cfg.get("out")
    if cfg.get("format") == "json":
        text = json.dumps(
            {"meta": meta,
             "rows": [dict(zip(header, row)) for row in rows]},
            sort_keys=True, indent=2, default=_fmt) + "\n"
    else:
        lines = [f"# {k}={_fmt(v)}" for k, v in meta.items()]
        lines.append(",".join(header))
        lines.extend(",".join(_fmt(v) for v in row) for row in rows)
        text = "\n".join(lines) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        (stream or sys.stdout).write(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _free_params(cfg) -> FreeParams:
    return FreeParams(cfg["lambda1"], cfg["lambda2"], cfg["lambda_net"],
                      cfg["mu"], cfg["theta"])


def _constrained(cfg) -> ConstrainedParams:
    return ConstrainedParams(cfg["lambda1"], cfg["lambda2"], cfg["mu"],
                             cfg["theta"], cfg.get("beta", 1.0))


def _sim_config(cfg) -> SimConfig:
    return SimConfig(seed=cfg["seed"], horizon_events=cfg["horizon"],
                     warmup_events=cfg.get("warmup"),
                     batch_count=cfg.get("batches", 32))


def _run_stationary(cfg, stream):
    p = _free_params(cfg)
    box, dist = adapt_truncation(
        free_rates(p), {"ex1": f_mean_x1, "ex2": f_mean_x2, "p00": f_empty},
        cfg["tol"])
    header = ["x1", "x2", "probability"]
    rows = [(int(a), int(b), float(q))
            for a, b, q in zip(dist.x1, dist.x2, dist.p)]
    cfg.values["n1_max"] = box.n1_max  # recorded provenance
    write_output(cfg, header, rows, stream)
    return EXIT_OK


def _run_fixpoint(cfg, stream):
    sol = solve_lambda_net(_constrained(cfg), tol=cfg["tol"])
    if isinstance(sol, NoSolution):
        write_output(cfg, ["status", "reason", "rho"],
                     [("no_solution", sol.reason, sol.rho)], stream)
        return EXIT_NO_SOLUTION
    header = ["lambda_net_star", "lambda_tot_star", "residual_prho",
              "residual_fp", "mean_x2", "p_empty", "n1_max", "n2_max",
              "boundary_mass", "evaluations", "bracket_history"]
    hist = ";".join(f"{lam:.17g}:{q:.17g}" for lam, q in sol.bracket_history)
    rows = [(sol.lambda_net_star, sol.lambda_tot_star, sol.residual_prho,
             sol.residual_fp, sol.mean_x2, sol.p_empty,
             sol.box_used.n1_max, sol.box_used.n2_max, sol.boundary_mass,
             len(sol.bracket_history), hist)]
    write_output(cfg, header, rows, stream)
    return EXIT_OK


def _run_sweep_rho(cfg, stream):
    grid = cfg.get("rho_grid") or list(DEFAULT_RHO_GRID)
    if cfg["theta"] == 0:
        # no-mobility branch: the exchange rate is identically zero and the
        # table reports the rescaled state against its exponential limit
        rows = theta_zero_ht(_constrained(cfg), grid)
        write_output(cfg, row_header(ThetaZeroRow),
                     [row_values(r) for r in rows], stream)
        return EXIT_OK if all(r.valid for r in rows) else EXIT_AUDIT
    rows = sweep_rho(_constrained(cfg), grid, tol=cfg["tol"])
    write_output(cfg, row_header(RhoSweepRow),
                 [row_values(r) for r in rows], stream)
    if any(r.note.startswith("no solution") for r in rows):
        return EXIT_NO_SOLUTION
    if any(r.note.startswith("solve failed") for r in rows):
        return EXIT_TRUNCATION
    return EXIT_OK if all(r.valid for r in rows) else EXIT_AUDIT


def _run_sweep_lambda(cfg, stream):
    grid = cfg.get("lambda_grid") or list(DEFAULT_LAMBDA_GRID)
    p = _free_params(cfg) if "lambda_net" in cfg.values else FreeParams(
        cfg["lambda1"], cfg["lambda2"], 0.0, cfg["mu"], cfg["theta"])
    rows = sweep_lambda_tot(p, grid, tol=cfg["tol"])
    write_output(cfg, row_header(LambdaSweepRow),
                 [row_values(r) for r in rows], stream)
    if any(r.note.startswith("solve failed") for r in rows):
        return EXIT_TRUNCATION
    return EXIT_OK if all(r.valid for r in rows) else EXIT_AUDIT


def _run_simulate(cfg, stream):
    p = _free_params(cfg)
    res = simulate_path(free_rates(p), (0, 0), _sim_config(cfg))
    header = ["functional", "estimate", "ci_half_width", "batches"]
    rows = [(name, est.value, est.half_width, est.batches)
            for name, est in res.estimates.items()]
    rows.append(("absorbed", float(res.absorbed), 0.0, 0))
    write_output(cfg, header, rows, stream)
    if cfg.get("dump_trace"):
        path = (cfg.get("out") or "trace") + ".events.txt"
        with open(path, "w", encoding="utf-8") as fh:
            for t, s in zip(res.times, res.states):
                fh.write(f"{t:.17g} " + " ".join(str(int(v)) for v in s) + "\n")
    return EXIT_OK


def _run_couple(cfg, stream):
    c = CouplingParams(_free_params(cfg), cfg["epsilon"])
    n_seeds = cfg["seeds"]
    sim = _sim_config(cfg)
    header = ["seed", "dominance_ok", "first_violation"]
    rows = []
    violations = 0
    for s in range(n_seeds):
        trace = simulate_coupled(
            c, SimConfig(seed=cfg["seed"] + s, horizon_events=sim.horizon_events,
                         warmup_events=sim.warmup_events,
                         batch_count=sim.batch_count))
        rows.append((cfg["seed"] + s, trace.dominance_ok,
                     -1 if trace.first_violation is None else trace.first_violation))
        if not trace.dominance_ok:
            violations += 1
    write_output(cfg, header, rows, stream)
    print(f"violations: {violations}", file=stream or sys.stdout)
    return EXIT_OK if violations == 0 else EXIT_AUDIT


def _run_cycles(cfg, stream):
    c = CouplingParams(_free_params(cfg), cfg["epsilon"])
    stats = cycle_statistics(c, cfg["cycles"], _sim_config(cfg))
    header = ["ell", "cycles", "partial", "mean_cycle_length", "mean_tau_leg",
              "mean_sigma_leg", "mean_delta", "max_delta",
              "mean_reward_small", "mean_reward_big", "events_used"]
    rows = [(stats.ell, len(stats.sigma), stats.partial,
             float(stats.cycle_length.mean()), float(stats.tau_leg.mean()),
             float(stats.sigma_leg.mean()), float(stats.delta.mean()),
             int(stats.delta.max()), float(stats.reward_small.mean()),
             float(stats.reward_big.mean()), stats.events_used)]
    write_output(cfg, header, rows, stream)
    return EXIT_OK


def _verify_checks(seed: int, tol: float):
    """The invariant battery: solver oracles, flow balance on randomized
    stable parameter sets, the service-split rate algebra, and the
    direct-versus-power cross-check."""
    checks = []

    gen = build_generator(mm1_rates(1.0, 2.0), TruncationBox(60, 0))
    dist = stationary_direct(gen)
    pmf = mm1_stationary(0.5)
    err = max(abs(dist.prob(j, 0) - float(pmf(j))) for j in range(61))
    checks.append(("mm1_geometric", err < 1e-10, f"max err {err:.3g}"))

    gen = build_generator(mminfty_rates(10.0, 1.0), TruncationBox(45, 0))
    dist = stationary_direct(gen)
    pmf = mminfty_stationary(10.0)
    err = max(abs(dist.prob(j, 0) - float(pmf(j))) for j in range(46))
    checks.append(("mminfty_poisson", err < 1e-10, f"max err {err:.3g}"))

    p = FreeParams(0.5, 10.0, 0.0, 1.0, 1.0)
    gen = build_generator(z_rates(p, 1), TruncationBox(0, 45, offset2=1))
    dist = stationary_direct(gen)
    err = abs(dist.prob(0, 0) - z_empty_probability(p, 1))
    checks.append(("z_closed_form", err < 1e-10, f"err {err:.3g}"))

    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for _ in range(8):
        theta = float(rng.uniform(0.0, 2.0))
        if theta < 0.05:
            theta = 0.0
        rho1 = float(rng.uniform(0.05, 0.7))
        rho2 = float(rng.uniform(0.05, 0.85 - rho1))
        lam_net = float(rng.uniform(0.0, 1.0))
        if theta == 0.0:
            lam_net = float(rng.uniform(0.0, 0.9 * (1.0 - rho1 - rho2)))
        rep = flow_balance_report(
            FreeParams(rho1, rho2, lam_net, 1.0, theta), tol=1e-10)
        worst = max(worst, rep["residual"] / rep["threshold"])
        ok = ok and rep["ok"]
    checks.append(("flow_balance_random", ok, f"worst residual ratio {worst:.3g}"))

    ells = np.arange(1, 101)
    worst = 0.0
    for ell in ells:
        y, d = np.meshgrid(np.arange(0, 101), np.arange(0, 101), indexing="ij")
        err = np.abs(beta_rate(y, d, ell) + alpha_rate(y, ell)
                     - alpha_rate(y + d, ell)).max()
        worst = max(worst, float(err))
    checks.append(("rate_algebra", worst < 2e-15, f"max err {worst:.3g}"))

    p = FreeParams(0.3, 0.3, 0.1, 1.0, 1.0)
    box, dd = adapt_truncation(
        free_rates(p), {"ex2": f_mean_x2, "p00": f_empty}, 1e-8)
    dp = stationary_power(build_generator(free_rates(p), box), 1e-9)
    tv = tv_distance(dd, dp)
    checks.append(("power_vs_direct", tv < 1e-8, f"tv {tv:.3g}"))
    return checks


def _run_verify(cfg, stream):
    checks = _verify_checks(cfg["seed"], cfg["tol"])
    header = ["check", "passed", "detail"]
    rows = [(name, ok, detail) for name, ok, detail in checks]
    write_output(cfg, header, rows, stream)
    out = stream or sys.stdout
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", file=out)
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_AUDIT


_RUNNERS = {
    "stationary": _run_stationary,
    "fixpoint": _run_fixpoint,
    "sweep-rho": _run_sweep_rho,
    "sweep-lambda": _run_sweep_lambda,
    "simulate": _run_simulate,
    "couple": _run_couple,
    "cycles": _run_cycles,
    "verify": _run_verify,
}


def run(cfg: RunConfig, stream=None) -> int:
    """Execute a validated configuration; returns the exit status."""
    try:
        return _RUNNERS[cfg.command](cfg, stream)
    except TruncationFailureError as exc:
        print(f"truncation failure: {exc}", file=sys.stderr)
        return EXIT_TRUNCATION
    except ValueError as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="cellps",
        description="Two-class processor-sharing cell with one mobile class")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="key = value configuration file")
    for key, (kind, _default, _pos) in _SCHEMA.items():
        if key == "command":
            continue
        flag = "--" + key.replace("_", "-")
        if kind == "bool":
            ap.add_argument(flag, dest=key, action="store_const", const=True,
                            default=None)
        else:
            ap.add_argument(flag, dest=key, default=None)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config") and v is not None}
    try:
        cfg = parse_config(args.config, overrides, command=args.command)
    except ConfigError as exc:
        for loc, msg in exc.errors:
            print(f"config error at {loc}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
