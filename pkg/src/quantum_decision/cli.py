"""``qdecide`` command-line front end.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric error,
4 infeasible Lyapunov weights, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ScenarioConfig, default_scenario, load_config
from .controller import (
    ExpectationKernel,
    lyapunov_batch,
    LyapunovSpec,
    check_control_constraints,
    curvature_report,
    select_sigma_for_action,
)
from .discretization import EXACT, MODES, average_map, build_kraus, convergence_order, drift_norm, population_drift
from .errors import ConfigError, InfeasibleWeights, QuantumDecisionError, ValidationError
from .model import check_density, random_density

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 2, 3, 4, 5
OUT_ENV = "QDECIDE_OUT"
SUITES = ("cptp", "martingale", "supermartingale", "curvature", "drift", "kushner", "residue", "constraints")


class CheckPrinter:
    """Prints ``check=<name> status=<PASS|FAIL|WARN> key=value ...`` lines and tracks failures."""

    def __init__(self, stream=None):
        self.stream = stream or sys.stdout
        self.failed = 0

    def __call__(self, name: str, ok, warn_only: bool = False, **values):
        if ok:
            status = "PASS"
        elif warn_only:
            status = "WARN"
        else:
            status = "FAIL"
            self.failed += 1
        parts = [f"check={name}", f"status={status}"]
        parts += [f"{k}={_fmt(v)}" for k, v in values.items()]
        print(" ".join(parts), file=self.stream)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, separators=(",", ":"))
    return str(v)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _load(path) -> ScenarioConfig:
    return default_scenario() if path is None else load_config(path)


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "qdecide-out")


def _write_manifest(out: Path, command: str, cfg_path, cfg: ScenarioConfig, seed, extra=None) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from exc
    manifest = {
        "command": command,
        "cfg_path": None if cfg_path is None else str(cfg_path),
        "cfg_hash": cfg.content_hash(),
        "seed": seed,
        "out_dir": str(out),
        "tool_version": __version__,
        "python": platform.python_version(),
        "started": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _finish_manifest(path: Path, started: float) -> None:
    data = json.loads(path.read_text(encoding="utf-8"))
    data["wall_clock_s"] = round(time.perf_counter() - started, 3)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def _spec_from_file(path, cfg: ScenarioConfig) -> LyapunovSpec:
    if path is None:
        return cfg.lyapunov_spec
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read spec file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse spec file {path}: {exc}") from exc
    try:
        return LyapunovSpec.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"spec file {path} lacks field {exc}") from exc


def _random_states(count: int, d: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [random_density(d, rng) for _ in range(count)]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .simulation import run_ensemble

    cfg = _load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.horizon is not None:
        overrides["horizon"] = args.horizon
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    n = cfg.ensemble_size if args.n is None else args.n
    out = _out_dir(args.out)
    started = time.perf_counter()
    manifest = _write_manifest(out, "simulate", args.config, cfg, cfg.seed, {"policy": args.policy, "N": n})
    result = run_ensemble(cfg, n, policy=args.policy, out_dir=out, threads=args.threads, debug=args.debug)
    _finish_manifest(manifest, started)
    s = result.summary
    print(f"N={s.N} converged={s.converged} conv_frac={s.conv_frac:.4f} records={result.records_path}")
    return EXIT_OK


def cmd_sigma_solve(args) -> int:
    cfg = _load(args.config)
    if args.eps is not None and not args.eps > 0:
        raise ConfigError(f"--eps must be strictly positive, got {args.eps}")
    eps = cfg.epsilon if args.eps is None else args.eps
    action = cfg.target_action if args.target is None else args.target - 1
    if not 0 <= action < cfg.m:
        raise ConfigError(f"--target must lie in 1..{cfg.m}, got {args.target}")
    model = cfg.controlled_model()
    spec = select_sigma_for_action(model, action, eps, cfg.piT)
    report = curvature_report(spec, model, cfg.piT, h=1e-4)
    payload = {**spec.to_dict(), "target_action": action + 1, "curvature": report.to_dict()}
    out = Path(args.out) if args.out else _out_dir(None) / "sigma.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"sigma={_fmt(list(spec.sigma))} epsilon={spec.epsilon:.6g} target={spec.target} spec={out}")
    return EXIT_OK


def _suite_cptp(cfg, args, out: CheckPrinter):
    model = cfg.controlled_model()
    rhos = _random_states(args.states or 100, cfg.dims.d, args.seed)
    bound = cfg.coupling.bound
    for u in (-bound, 0.0, bound):
        gen = model.generator(u)
        for tau, _ in cfg.piT.support:
            h = tau * cfg.dt
            exact = build_kraus(gen, tau, cfg.dt, EXACT)
            out(f"cptp.completeness.exact[u={u:g},tau={tau}]", exact.completeness_residual <= 1e-12,
                residual=exact.completeness_residual)
            first = build_kraus(gen, tau, cfg.dt, cfg.mode if cfg.mode != EXACT else "paper-faithful")
            limit = h * h * drift_norm(gen) ** 2 * (1 + 1e-9) + 1e-15
            out(f"cptp.completeness.second_order[u={u:g},tau={tau}]", first.completeness_residual <= limit,
                residual=first.completeness_residual, limit=limit)
            for ks in (exact, first):
                worst = max((len(check_density(average_map(r, ks))) for r in rhos), default=0)
                out(f"cptp.density[{ks.mode},u={u:g},tau={tau}]", worst == 0, states=len(rhos))


def _population_drift(model, rhos, piT, mode):
    worst = {}
    for tau, _ in piT.support:
        ks = model.kraus(0.0, tau, mode)
        worst[tau] = max(float(np.max(np.abs(population_drift(r, ks)))) for r in rhos)
    return worst


def _suite_martingale(cfg, args, out):
    model = cfg.controlled_model(mode=EXACT)
    rhos = _random_states(args.states or 100, cfg.dims.d, args.seed)
    for tau, dev in _population_drift(model, rhos, cfg.piT, EXACT).items():
        out(f"martingale.populations[tau={tau}]", dev <= 1e-10, max_deviation=dev, tol=1e-10)


def _suite_supermartingale(cfg, args, out):
    spec = _spec_from_file(args.spec, cfg)
    model = cfg.controlled_model()
    kernel = ExpectationKernel(model, cfg.piT, cfg.mode)
    rhos = np.array(_random_states(args.states or 200, cfg.dims.d, args.seed))
    drift = kernel(rhos, np.zeros(len(rhos)), spec) - lyapunov_batch(spec, rhos)
    out("supermartingale.open_loop", float(drift.max()) <= 1e-10, max_drift=float(drift.max()), tol=1e-10)


def _suite_curvature(cfg, args, out):
    spec = _spec_from_file(args.spec, cfg)
    rep = curvature_report(spec, cfg.controlled_model(), cfg.piT, h=1e-4)
    out("curvature.signs", rep.sign_ok(1e-6), curvature=[float(c) for c in rep.curvature],
        target=spec.target, violations=rep.violations(1e-6))


def _suite_drift(cfg, args, out):
    from .stability import closed_loop_states, drift_from_records, lindblad_adapter, random_interval_drift

    if args.records:
        reports = drift_from_records(args.records)
        for tau, rep in reports.items():
            out(f"drift.records[tau={tau}]", rep.passed, cells=len(rep.cells), violations=len(rep.violations))
        return
    states = closed_loop_states(cfg, args.states or 50, args.seed)
    adapter = lindblad_adapter(cfg, "closed")
    rep = random_interval_drift(adapter, cfg.piT, states, args.samples or 200, seed=args.seed)
    if args.report:
        rep.write(args.report)
    for tau, r in rep.per_tau.items():
        out(f"drift.closed_loop[tau={tau}]", r.passed, cells=len(r.cells), violations=len(r.violations))
    out("drift.closed_loop[mixture]", rep.mixture.passed, violations=len(rep.mixture.violations), warn_only=True)


def _suite_kushner(cfg, args, out):
    from .simulation import read_records, run_ensemble
    from .stability import kushner_bound_check

    if args.records:
        traces, v0 = [], None
        for header, rows in read_records(args.records):
            v0 = header["V0_offset"]
            traces.append([v0] + [r["V_offset"] for r in rows])
    else:
        res = run_ensemble(cfg, args.n or cfg.ensemble_size, policy="open", threads=args.threads)
        traces = [r.V_trace() for r in res.records]
        v0 = res.records[0].V0_offset
    for mult in cfg.kushner_multipliers:
        k = kushner_bound_check(traces, mult * v0, v0)
        out(f"kushner[lambda={mult:g}*V0]", k.passed, exceedance=k.exceedance, bound=k.bound,
            sigma=k.sigma_binomial, n=k.n)


def _suite_residue(cfg, args, out):
    from .simulation import run_trajectory
    from .stability import residue_convergence_check

    if args.trace:
        try:
            text = Path(args.trace).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read trace file {args.trace}: {exc.strerror}") from exc
        trace = [float(x) for x in text.split()]
    else:
        trace = run_trajectory(cfg, cfg.seed, "closed").V_trace()
    t_max = args.tmax or cfg.piT.t_max
    rep = residue_convergence_check(trace, t_max, args.tol)
    for k, m, ok in rep.per_residue:
        out(f"residue[{k}]", ok, tail_max=m, tol=args.tol)
    out("residue.full", rep.full_passed, tail_max=rep.full_tail_max, tol=args.tol)
    out("residue.overall", rep.overall)


def _suite_constraints(cfg, args, out):
    model = cfg.controlled_model()
    us = np.linspace(-cfg.coupling.bound, cfg.coupling.bound, 21)
    rep = check_control_constraints(model, us, T=1, mode=cfg.mode)
    warn = args.severity == "warn"
    out("constraints.completeness", rep["completeness"]["ok"], warn_only=warn,
        max_residual=rep["completeness"]["max_residual"])
    out("constraints.diagonal_at_zero", rep["diagonal_at_zero"]["ok"], warn_only=warn,
        n_offdiagonal=rep["diagonal_at_zero"]["n_offdiagonal"])
    out("constraints.distinguishability", rep["distinguishability"]["ok"], warn_only=warn,
        pairs=rep["distinguishability"]["indistinguishable_pairs"])
    out("constraints.smoothness", bool(rep["smoothness"]["ok"]), warn_only=warn,
        max_ratio=rep["smoothness"].get("max_ratio"))


_SUITE_FUNCS = {
    "cptp": _suite_cptp,
    "martingale": _suite_martingale,
    "supermartingale": _suite_supermartingale,
    "curvature": _suite_curvature,
    "drift": _suite_drift,
    "kushner": _suite_kushner,
    "residue": _suite_residue,
    "constraints": _suite_constraints,
}


def cmd_verify(args) -> int:
    cfg = _load(args.config)
    if args.mode:
        cfg = cfg.with_overrides(mode=args.mode)
    printer = CheckPrinter()
    _SUITE_FUNCS[args.suite](cfg, args, printer)
    return EXIT_VERIFY if printer.failed else EXIT_OK


def cmd_oracle_compare(args) -> int:
    cfg = _load(args.config)
    try:
        ladder = [float(x) for x in args.dt_ladder.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--dt-ladder must be a comma-separated list of numbers, got {args.dt_ladder!r}") from None
    if len(ladder) < 3:
        raise ConfigError(f"--dt-ladder needs at least 3 values, got {len(ladder)}")
    mode = args.mode or cfg.mode
    gen = cfg.controlled_model().generator(0.0)
    rhos = _random_states(10, cfg.dims.d, args.seed)
    errs, slope = convergence_order(gen, ladder, rhos, mode)
    table = {"mode": mode, "rows": [{"dt": dt, "error": float(e)} for dt, e in zip(sorted(ladder), errs)],
             "slope": slope}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_compare.json").write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    for row in table["rows"]:
        print(f"dt={row['dt']:.6g} error={row['error']:.6e}")
    ok = 1.8 <= slope
    print(f"check=oracle.slope status={'PASS' if ok else 'FAIL'} slope={slope:.4f}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_stp(args) -> int:
    from .simulation import stp_discrepancy

    cfg = _load(args.config)
    if args.alpha is not None:
        cfg = cfg.with_overrides(alpha=args.alpha)

    def event(text):
        if text is None:
            return None
        try:
            return {int(x) - 1 for x in text.split(",")}
        except ValueError:
            raise ConfigError(f"events are comma-separated 1-based actions, got {text!r}") from None

    res = stp_discrepancy(cfg, event(args.event_a), event(args.event_b), args.t_b, args.t_a)
    print(json.dumps(res.to_dict()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdecide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def cfg_arg(sp):
        sp.add_argument("config", nargs="?", help="YAML scenario file (default scenario if omitted)")

    sp = sub.add_parser("simulate", help="run a seeded ensemble and write records, summary and manifest")
    cfg_arg(sp)
    sp.add_argument("--policy", default="closed", help="closed | open | fixed=<u>")
    sp.add_argument("--n", type=int, help="ensemble size")
    sp.add_argument("--seed", type=int, help="base seed")
    sp.add_argument("--horizon", type=int, help="interactions per trajectory")
    sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./qdecide-out)")
    sp.add_argument("--debug", action="store_true", help="check density invariants at every step")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sigma-solve", help="solve for Lyapunov weights and write a spec file")
    cfg_arg(sp)
    sp.add_argument("--target", type=int, help="1-based target action")
    sp.add_argument("--eps", type=float, help="Lyapunov epsilon (> 0)")
    sp.add_argument("--out", help="spec file path")
    sp.set_defaults(func=cmd_sigma_solve)

    sp = sub.add_parser("verify", help="run a verification suite")
    cfg_arg(sp)
    sp.add_argument("--suite", required=True, choices=SUITES)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--spec", help="spec file from sigma-solve")
    sp.add_argument("--records", help="record file from simulate (drift, kushner)")
    sp.add_argument("--trace", help="whitespace-separated phi values (residue)")
    sp.add_argument("--tmax", type=int, help="residue classes (default: longest interval)")
    sp.add_argument("--tol", type=float, default=1e-3, help="residue tail tolerance")
    sp.add_argument("--states", type=int, help="number of test states")
    sp.add_argument("--samples", type=int, help="Monte Carlo samples per state")
    sp.add_argument("--n", type=int, help="ensemble size (kushner)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--severity", choices=("warn", "error"), default="warn", help="constraints suite severity")
    sp.add_argument("--report", help="write the drift report here")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("oracle-compare", help="one-step error of the Kraus step against the exact propagator")
    cfg_arg(sp)
    sp.add_argument("--dt-ladder", required=True, help="comma-separated time steps, at least 3")
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="directory for the convergence table")
    sp.set_defaults(func=cmd_oracle_compare)

    sp = sub.add_parser("stp", help="total-probability diagnostic")
    cfg_arg(sp)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--event-a", help="comma-separated 1-based actions (default: target)")
    sp.add_argument("--event-b", help="comma-separated 1-based actions (default: target)")
    sp.add_argument("--t-b", type=int, default=50)
    sp.add_argument("--t-a", type=int, default=100)
    sp.set_defaults(func=cmd_stp)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleWeights as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        for v in exc.violated:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except QuantumDecisionError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
