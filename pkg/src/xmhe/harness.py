"""Reproduction harness and command line interface.

Simulates the disturbed Chua benchmark once, feeds the identical
measurement stream to a naive and an excitation-aware estimator, and writes
per-step traces plus an RMSE/timing summary.  Subcommands also expose the
certificate validators, the minimal-horizon scan, and the error-bound trace
on the scalar affine benchmark.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import certificates as certs_mod
from .certificates import (
    CertificateSet, bound_constants, derive_chua_certificates,
    derive_scalar_certificates, horizon_condition_table, load_certificates,
    mhe_weights, min_horizon, save_certificates, theorem_bound,
    validate_gain, validate_ioss, weight_bounds,
)
from .mhe import EstimateRecord, MheConfig, MovingHorizonEstimator, rmse
from .model import ChuaParams, chua_model, scalar_benchmark_model
from .solver import SolverOptions

__all__ = [
    "RunConfig",
    "RunSummary",
    "RunResult",
    "gen_disturbance",
    "run",
    "emit_traces",
    "compare_variants",
    "main",
]

TRACE_HEADER = "t,x1,x2,x3,xh1,xh2,xh3,phat,ex_norm,ep_norm,alpha_t,pe,cost,status"


@dataclass
class RunConfig:
    """Benchmark configuration; defaults reproduce the reference experiment."""

    model: str = "chua"
    t_sim: int = 5000
    N: int = 150
    eta1: float = 0.934
    eta2: float = 0.9997
    alpha: float = 1e-3
    monitor_mu: float = 0.99
    x0: tuple = (1.0, 0.0, -1.0)
    xhat0: tuple = (-1.0, 0.1, 2.0)
    phat0: float = 0.2
    p_true: float = 0.45
    p_box: tuple = (0.2, 0.8)
    w_amplitudes: tuple = (1e-3, 1e-3, 1e-3, 0.1)
    seed: int = 1
    certs: str = "packaged"          # path, or "packaged", or "derive"
    variants: tuple = ("naive", "excitation_aware")
    w_mult: float = 2.0
    v_mult: float = 100.0
    q_mult: float = 2.0
    r_mult: float = 1.0
    state_penalty: float = 1e3
    max_iter: int = 12
    tol_g: float = 1e-6
    tol_step: float = 1e-9
    lambda0: float = 1e-3
    out_dir: str = "runs/latest"
    write_traces: bool = True
    dump_arrays: bool = False


@dataclass
class RunSummary:
    variant: str
    rmse_x: float
    rmse_p: float
    tau_avrg_ms: float
    pe_fraction: float
    longest_non_pe_streak: int
    failure_rate: float
    n_steps: int


@dataclass
class RunResult:
    config: RunConfig
    summaries: dict
    records: dict
    truth_x: np.ndarray
    w_seq: np.ndarray
    trace_paths: dict
    comparison: Optional[dict] = None
    failed: bool = False


def gen_disturbance(seed: int, t_sim: int, amplitudes) -> np.ndarray:
    """Seeded uniform disturbance draws, one row per step.

    Components are independent with |w_i| <= amplitudes[i]; the generator is
    a named PCG64 stream so realizations are reproducible across platforms.
    """
    amplitudes = np.asarray(amplitudes, dtype=float)
    if np.any(amplitudes < 0):
        raise ValueError("disturbance amplitudes must be nonnegative")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(-1.0, 1.0, size=(t_sim, amplitudes.size)) * amplitudes


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def emit_traces(records: Sequence[EstimateRecord], truth_x: np.ndarray,
                p_true: float, path) -> Path:
    """Write one delimited trace file with the fixed header; deterministic
    bytes for identical inputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [TRACE_HEADER]
    for rec in records:
        x = truth_x[rec.t]
        ex = float(np.linalg.norm(rec.xhat - x))
        ep = float(np.linalg.norm(np.atleast_1d(rec.phat) - p_true))
        vals = [str(rec.t)]
        vals += [_fmt(v) for v in x]
        vals += [_fmt(v) for v in rec.xhat]
        vals += [_fmt(float(np.atleast_1d(rec.phat)[0]))]
        vals += [_fmt(ex), _fmt(ep), _fmt(rec.alpha_t)]
        vals += [str(int(rec.pe)), _fmt(rec.cost_star), rec.solver_status]
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")
    return path


def compare_variants(summaries: dict) -> dict:
    """Cross-variant report: parameter-RMSE ratio, state-RMSE agreement,
    timing.  Requires both variants."""
    for v in ("naive", "excitation_aware"):
        if v not in summaries:
            raise ValueError(f"variant {v!r} missing from summaries")
    s1, s2 = summaries["naive"], summaries["excitation_aware"]
    if s1.rmse_p == 0.0 and s2.rmse_p == 0.0:
        ratio = 1.0
    elif s2.rmse_p == 0.0:
        ratio = float("inf")
    else:
        ratio = s1.rmse_p / s2.rmse_p
    denom = max(s1.rmse_x, s2.rmse_x, 1e-300)
    return {
        "rmse_p_ratio_naive_over_aware": ratio,
        "rmse_x_rel_difference": abs(s1.rmse_x - s2.rmse_x) / denom,
        "tau_avrg_ms": {"naive": s1.tau_avrg_ms,
                        "excitation_aware": s2.tau_avrg_ms},
    }


def _packaged_cert_path() -> Path:
    return Path(resources.files("xmhe").joinpath("data/chua_certificates.txt"))


def _load_run_certificates(cfg: RunConfig, model) -> CertificateSet:
    if cfg.certs == "derive":
        return derive_chua_certificates(model, alpha=cfg.alpha,
                                        monitor_mu=cfg.monitor_mu)
    path = _packaged_cert_path() if cfg.certs == "packaged" else Path(cfg.certs)
    return load_certificates(path, model)


def _summarize(variant: str, records, truth_x, p_true) -> RunSummary:
    ex = [rec.xhat - truth_x[rec.t] for rec in records]
    ep = [np.atleast_1d(rec.phat) - p_true for rec in records]
    solved = [rec for rec in records if rec.t > 0]
    n_fail = sum(1 for rec in solved if rec.solver_status == "stalled")
    flags = [rec.pe for rec in solved]
    longest = cur = 0
    for f in flags:
        cur = 0 if f else cur + 1
        longest = max(longest, cur)
    return RunSummary(
        variant=variant,
        rmse_x=rmse(ex),
        rmse_p=rmse(ep),
        tau_avrg_ms=1e3 * float(np.mean([rec.solve_time for rec in solved])),
        pe_fraction=float(np.mean(flags)) if flags else 0.0,
        longest_non_pe_streak=longest,
        failure_rate=n_fail / max(len(solved), 1),
        n_steps=len(solved),
    )


def run(cfg: RunConfig, verbose: bool = False) -> RunResult:
    """Simulate the benchmark once and estimate with every configured variant.

    The same disturbance realization and measurement stream feed all
    variants.  A variant with more than 10% hard solver failures marks the
    whole run as failed.
    """
    if cfg.model != "chua":
        raise ValueError(
            "the reproduction harness drives the chua benchmark; the scalar "
            "system is exercised through the `bound` subcommand"
        )
    model = chua_model(ChuaParams(), cfg.w_amplitudes)
    if tuple(model.P.lo) != (cfg.p_box[0],) or tuple(model.P.hi) != (cfg.p_box[1],):
        from .model import Box
        model = dataclasses.replace(
            model, P=Box([cfg.p_box[0]], [cfg.p_box[1]])
        )
    certs = _load_run_certificates(cfg, model)
    res_i = validate_ioss(certs.ioss, model, n_samples=1000, rng_seed=0)
    res_g = validate_gain(certs.gain, model, n_samples=1000, rng_seed=1)
    if not (res_i.passed and res_g.passed):
        raise RuntimeError(
            f"certificate validation failed (ioss worst {res_i.worst_violation:.3e}, "
            f"gain worst {res_g.worst_violation:.3e})"
        )

    W = cfg.w_mult * certs.pe.P_p
    V = cfg.v_mult * certs.pe.S_p
    Q = cfg.q_mult * (certs.ioss.Q_x + certs.pe.Q_p)
    R = cfg.r_mult * (certs.ioss.R_x + certs.pe.R_p)
    lam_gamma = certs_mod.gen_eig_max(certs.pe.P_p, certs.ioss.P_U)

    w_seq = gen_disturbance(cfg.seed, cfg.t_sim, cfg.w_amplitudes)
    truth = model.simulate(cfg.x0, [cfg.p_true], np.zeros((cfg.t_sim, 0)), w_seq)

    out_dir = Path(cfg.out_dir)
    summaries, all_records, trace_paths = {}, {}, {}
    for variant in cfg.variants:
        mcfg = MheConfig(
            N=cfg.N, eta1=cfg.eta1, eta2=cfg.eta2,
            eta_x=certs.ioss.eta_x, eta_p=certs.pe.eta_p,
            lambda_gamma=lam_gamma, W=W, V=V, Q=Q, R=R,
            variant=variant, alpha=cfg.alpha, monitor_mu=cfg.monitor_mu,
            state_penalty=cfg.state_penalty,
            solver=SolverOptions(tol_g=cfg.tol_g, tol_step=cfg.tol_step,
                                 max_iter=cfg.max_iter, lambda0=cfg.lambda0),
        )
        est = MovingHorizonEstimator(model, mcfg, cfg.xhat0, [cfg.phat0],
                                     gain=certs.gain)
        records = [est.initial_record()]
        t_wall = time.perf_counter()
        for t in range(1, cfg.t_sim + 1):
            records.append(est.estimate_step(truth.u_seq[t - 1], truth.y_seq[t - 1]))
            if verbose and t % 500 == 0:
                print(f"  [{variant}] step {t}/{cfg.t_sim} "
                      f"({time.perf_counter() - t_wall:.1f}s)", flush=True)
        summaries[variant] = _summarize(variant, records, truth.x_seq, cfg.p_true)
        all_records[variant] = records
        if cfg.write_traces:
            trace_paths[variant] = str(emit_traces(
                records, truth.x_seq, cfg.p_true,
                out_dir / f"trace_{variant}.csv"))

    comparison = None
    if "naive" in summaries and "excitation_aware" in summaries:
        comparison = compare_variants(summaries)
    failed = any(s.failure_rate > 0.10 for s in summaries.values())

    result = RunResult(cfg, summaries, all_records, truth.x_seq, w_seq,
                       trace_paths, comparison, failed)
    if cfg.write_traces:
        out_dir.mkdir(parents=True, exist_ok=True)
        summary_doc = {
            "config": dataclasses.asdict(cfg),
            "summaries": {k: dataclasses.asdict(v) for k, v in summaries.items()},
            "comparison": comparison,
            "failed": failed,
        }
        (out_dir / "summary.json").write_text(json.dumps(summary_doc, indent=2))
    if cfg.dump_arrays:
        arrays = {"truth_x": truth.x_seq, "w_seq": w_seq}
        for variant, records in all_records.items():
            arrays[f"xhat_{variant}"] = np.array([r.xhat for r in records])
            arrays[f"phat_{variant}"] = np.array(
                [np.atleast_1d(r.phat) for r in records])
            arrays[f"alpha_{variant}"] = np.array([r.alpha_t for r in records])
            arrays[f"pe_{variant}"] = np.array([r.pe for r in records])
        np.savez(out_dir / "arrays.npz", **arrays)
    return result


# ---------------------------------------------------------------------------
# scalar-benchmark bound trace (used by the `bound` subcommand and tests)


def scalar_bound_run(t_sim: int = 300, noise_amp: float = 1e-3, seed: int = 3,
                     x0: float = 1.5, xhat0: float = -0.5, p_true: float = 0.2,
                     phat0: float = 0.0, eta1: float = 0.8, eta2: float = 0.8,
                     N: Optional[int] = None, alpha: float = 1e-3):
    """Run the scalar affine benchmark and evaluate the certified bound.

    Returns (times, gamma1, bound, N, flags): gamma1 is the certified error
    measure U(xhat, x) + ||phat - p||^2_V and bound its theorem value;
    windows here are convex, so the solver attains global optima and the
    bound must dominate at every step.
    """
    model = scalar_benchmark_model(w_amplitude=max(noise_amp, 1e-8))
    certs = derive_scalar_certificates(model, alpha=alpha)
    W, V, Q, R = mhe_weights(certs)
    wb = weight_bounds(W, V, Q, R)
    if N is None:
        N = min_horizon(certs.ioss, certs.pe, wb, eta1, eta2, N_max=500)
    consts = bound_constants(certs.ioss, certs.pe, wb, eta1, eta2, N)

    w_seq = gen_disturbance(seed, t_sim, [noise_amp])
    truth = model.simulate([x0], [p_true], np.zeros((t_sim, 0)), w_seq)
    cfg = MheConfig(
        N=N, eta1=eta1, eta2=eta2, eta_x=certs.ioss.eta_x, eta_p=certs.pe.eta_p,
        lambda_gamma=certs_mod.gen_eig_max(certs.pe.P_p, certs.ioss.P_U),
        W=W, V=V, Q=Q, R=R, variant="excitation_aware", alpha=alpha,
        monitor_mu=certs.monitor_mu,
        solver=SolverOptions(tol_g=1e-10, tol_step=1e-14, max_iter=200),
    )
    est = MovingHorizonEstimator(model, cfg, [xhat0], [phat0], gain=certs.gain)
    records = [est.initial_record()]
    for t in range(1, t_sim + 1):
        records.append(est.estimate_step(truth.u_seq[t - 1], truth.y_seq[t - 1]))

    flags = [rec.pe for rec in records]
    gamma1 = np.array([
        certs.ioss.value(rec.xhat, truth.x_seq[rec.t])
        + float((np.atleast_1d(rec.phat) - p_true) @ V @ (np.atleast_1d(rec.phat) - p_true))
        for rec in records
    ])
    ex0 = np.atleast_1d(records[0].xhat) - truth.x_seq[0]
    ep0 = np.atleast_1d(records[0].phat) - p_true
    bound = theorem_bound(ex0, ep0, w_seq, flags, consts, wb, t_max=t_sim)
    times = np.arange(t_sim + 1)
    return times, gamma1, bound, N, flags


# ---------------------------------------------------------------------------
# CLI


def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=str, default=None,
                        help="JSON document with RunConfig fields")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("int", int):
            parser.add_argument(flag, type=int, default=None)
        elif f.type in ("float", float):
            parser.add_argument(flag, type=float, default=None)
        elif f.type in ("bool", bool):
            parser.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"),
                                default=None)
        elif f.name in ("x0", "xhat0", "w_amplitudes", "p_box"):
            parser.add_argument(flag, type=lambda s: tuple(float(v) for v in s.split(",")),
                                default=None)
        elif f.name == "variants":
            parser.add_argument(flag, type=lambda s: tuple(s.split(",")), default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def _config_from_args(args) -> RunConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    cfg = RunConfig(**base)
    for f in dataclasses.fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    result = run(cfg, verbose=not args.quiet)
    for variant, s in result.summaries.items():
        print(f"{variant}: RMSE(e_x) = {s.rmse_x:.4f}  RMSE(e_p) = {s.rmse_p:.4f}  "
              f"tau_avrg = {s.tau_avrg_ms:.1f} ms  PE fraction = {s.pe_fraction:.2f}")
    if result.comparison:
        print(f"parameter-RMSE ratio (naive/aware): "
              f"{result.comparison['rmse_p_ratio_naive_over_aware']:.2f}")
    if result.failed:
        print("run FAILED: solver hard-failure rate above 10%", file=sys.stderr)
        return 1
    return 0


def _cmd_validate_certs(args) -> int:
    model = chua_model()
    path = _packaged_cert_path() if args.certs == "packaged" else Path(args.certs)
    certs = load_certificates(path, model)
    res_i = validate_ioss(certs.ioss, model, n_samples=args.samples,
                          rng_seed=args.seed)
    res_g = validate_gain(certs.gain, model, n_samples=args.samples,
                          rng_seed=args.seed + 1)
    print(f"detectability dissipation: worst scaled violation = "
          f"{res_i.worst_violation:.3e} ({'pass' if res_i.passed else 'FAIL'})")
    print(f"gain contraction/bound:    worst violation = "
          f"{res_g.worst_violation:.3e} ({'pass' if res_g.passed else 'FAIL'})")
    return 0 if (res_i.passed and res_g.passed) else 1


def _cmd_min_horizon(args) -> int:
    if args.model == "scalar":
        model = scalar_benchmark_model()
        certs = derive_scalar_certificates(model)
    else:
        model = chua_model()
        certs = _load_run_certificates(RunConfig(certs=args.certs), model)
    W, V, Q, R = mhe_weights(certs)
    wb = weight_bounds(W, V, Q, R)
    try:
        N = min_horizon(certs.ioss, certs.pe, wb, args.eta1, args.eta2,
                        N_max=args.n_max)
    except certs_mod.HorizonSearchError as err:
        print(f"horizon search failed: {err}", file=sys.stderr)
        tab = err.table
        if tab is not None:
            for i in range(0, len(tab["N"]), max(1, len(tab["N"]) // 10)):
                print(f"  N={tab['N'][i]:4d}  boundedness={tab['boundedness'][i]:.3g}"
                      f"  state={tab['contraction_state'][i]:.3g}"
                      f"  param={tab['contraction_param'][i]:.3g}", file=sys.stderr)
        return 1
    print(f"minimal admissible horizon: N = {N}")
    return 0


def _cmd_bound(args) -> int:
    times, gamma1, bound, N, flags = scalar_bound_run(
        t_sim=args.t_sim, noise_amp=args.noise_amp, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["t,gamma1,bound,pe"]
    for t in times:
        lines.append(f"{t},{_fmt(gamma1[t])},{_fmt(bound[t])},{int(flags[t])}")
    out.write_text("\n".join(lines) + "\n")
    dominated = bool(np.all(bound >= gamma1 - 1e-12))
    print(f"horizon N = {N}; bound dominates measured error: {dominated}")
    print(f"trace written to {out}")
    return 0 if dominated else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="xmhe",
        description="excitation-aware moving horizon estimation benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the Chua reproduction experiment")
    _add_run_flags(p_run)
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate-certs", help="validate certificate fixture")
    p_val.add_argument("--certs", type=str, default="packaged")
    p_val.add_argument("--samples", type=int, default=10_000)
    p_val.add_argument("--seed", type=int, default=0)
    p_val.set_defaults(func=_cmd_validate_certs)

    p_min = sub.add_parser("min-horizon", help="scan the contraction conditions")
    p_min.add_argument("--model", choices=("chua", "scalar"), default="scalar")
    p_min.add_argument("--eta1", type=float, default=0.8)
    p_min.add_argument("--eta2", type=float, default=0.8)
    p_min.add_argument("--n-max", type=int, default=500)
    p_min.add_argument("--certs", type=str, default="packaged")
    p_min.set_defaults(func=_cmd_min_horizon)

    p_bound = sub.add_parser("bound", help="error-bound trace on the scalar benchmark")
    p_bound.add_argument("--t-sim", type=int, default=300)
    p_bound.add_argument("--noise-amp", type=float, default=1e-3)
    p_bound.add_argument("--seed", type=int, default=3)
    p_bound.add_argument("--out", type=str, default="runs/bound_trace.csv")
    p_bound.set_defaults(func=_cmd_bound)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
