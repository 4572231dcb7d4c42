"""Command-line entry point.

Subcommands mirror the library split: ``simulate`` and ``collect`` drive
plants, ``design`` runs the synthesis problems on ensemble files, ``bench``
reproduces the two benchmarks end to end and ``verify`` Monte-Carlo-checks a
gain schedule against its norm bound.

Exit codes: 0 success, 2 infeasible-by-design (an expected negative result),
3 numerical failure, 4 input error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .benchmarks import (
    ConverterBenchConfig,
    ScalarBenchConfig,
    bench_converter,
    bench_scalar,
    scalar_benchmark_plant,
)
from .converter import ConverterParams, build_converter_ltv
from .data_ensemble import (
    export_csv,
    load_ensemble,
    run_ensemble,
    save_ensemble,
    uniform_input_gen,
    uniform_x0_gen,
    SchemaError,
)
from .ltv_core import ContractViolation, LtvDynamics, NoiseModel, simulate
from .lqr_design import LqrWeights, lqr_data_finite, lqr_data_periodic
from .robust_design import (
    NoiseBound,
    PerformanceIndex,
    design_robust_bounded,
    design_robust_snr,
    design_robust_performance_periodic,
    hinf_gamma_search,
    BracketError,
)
from .sdp_backend import SdpStatus, SdpTolerances
from .stability_design import (
    GainSchedule,
    design_bounded,
    design_periodic_stabilizer,
    trajectory_bound,
)

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_NUMERICAL = 3
EXIT_INPUT = 4


class CliError(click.ClickException):
    exit_code = EXIT_INPUT


def _load_plant(spec: str) -> LtvDynamics:
    if spec == "scalar":
        return scalar_benchmark_plant()
    if spec == "converter":
        plant, _ = build_converter_ltv(ConverterParams())
        return plant
    path = Path(spec)
    if not path.exists():
        raise CliError(f"plant {spec!r} is neither a builtin nor an existing file")
    try:
        return LtvDynamics.load(path)
    except (ContractViolation, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot load plant file {spec!r}: {exc}")


def _status_exit(status: SdpStatus) -> int:
    if status.ok:
        return EXIT_OK
    if status is SdpStatus.INFEASIBLE:
        return EXIT_INFEASIBLE
    return EXIT_NUMERICAL


def _tolerances(feas, max_iter, solver) -> SdpTolerances:
    # environment variables provide defaults; explicit flags win
    import os

    feas = float(os.environ.get("DDLTV_FEAS_TOL", feas)) if feas == 1e-8 else feas
    max_iter = int(os.environ.get("DDLTV_MAX_ITER", max_iter)) if max_iter == 200 else max_iter
    solver = os.environ.get("DDLTV_SOLVER", solver) if solver == "clarabel" else solver
    return SdpTolerances(check_feas=feas, max_iter=max_iter, solver=solver)


def _emit_design(result, out, manifest_extra):
    payload = {
        "status": result.status.value,
        **manifest_extra,
    }
    if result.ok:
        result.schedule.save(out)
        payload["schedule"] = str(out)
    manifest = Path(str(out) + ".manifest.json")
    with open(manifest, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    click.echo(f"status: {result.status.value}")
    sys.exit(_status_exit(result.status))


@click.group()
def main():
    """Data-driven state-feedback design for linear time-varying systems."""


@main.command("simulate")
@click.option("--plant", required=True, help="builtin name (scalar, converter) or plant JSON file")
@click.option("--x0", required=True, help="comma-separated initial state")
@click.option("--steps", type=int, required=True)
@click.option("--schedule", type=click.Path(exists=True), default=None,
              help="gain schedule JSON; zero input when omitted")
@click.option("--process-noise", default=None, help="uniform process noise 'lo,hi'")
@click.option("--measurement-noise", default=None, help="uniform measurement noise 'lo,hi'")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True, help="trajectory CSV output")
def simulate_cmd(plant, x0, steps, schedule, process_noise, measurement_noise, seed, out):
    """Simulate a plant under a gain schedule or zero input."""
    sys_ = _load_plant(plant)
    try:
        x0_vec = np.array([float(v) for v in x0.split(",")])
    except ValueError:
        raise CliError(f"cannot parse x0 {x0!r}")
    if schedule is not None:
        sched = GainSchedule.load(schedule)
        policy = sched.policy()
    else:
        policy = lambda k, z: np.zeros(sys_.m)
    noise = None
    if process_noise or measurement_noise:
        parse = lambda s: ("uniform", *[float(v) for v in s.split(",")]) if s else None
        noise = NoiseModel(n=sys_.n, seed=seed, process=parse(process_noise),
                           measurement=parse(measurement_noise))
    try:
        traj = simulate(sys_, x0_vec, policy, T=steps, noise=noise)
    except ContractViolation as exc:
        raise CliError(str(exc))
    header = ["k"] + [f"x{i}" for i in range(sys_.n)] + [f"u{i}" for i in range(sys_.m)]
    with open(out, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(steps + 1):
            u = traj.u[k] if k < steps else np.full(sys_.m, np.nan)
            fh.write(",".join(str(v) for v in [k, *traj.x[k], *u]) + "\n")
    click.echo(f"wrote {out}")


@main.command()
@click.option("--plant", required=True)
@click.option("--experiments", "-L", type=int, required=True)
@click.option("--window", required=True, help="data window 'start:end'")
@click.option("--seed", type=int, default=0)
@click.option("--input-range", default="-1,1", help="uniform exploring input 'lo,hi'")
@click.option("--x0-range", default="-1,1", help="uniform initial condition 'lo,hi'")
@click.option("--process-noise", default=None)
@click.option("--measurement-noise", default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--csv", type=click.Path(), default=None, help="also export plotting CSV")
def collect(plant, experiments, window, seed, input_range, x0_range,
            process_noise, measurement_noise, out, csv):
    """Run an ensemble of open-loop experiments and save the data file."""
    sys_ = _load_plant(plant)
    try:
        k0, k1 = (int(v) for v in window.split(":"))
        in_lo, in_hi = (float(v) for v in input_range.split(","))
        x0_lo, x0_hi = (float(v) for v in x0_range.split(","))
    except ValueError:
        raise CliError("cannot parse --window/--input-range/--x0-range")
    noise = None
    if process_noise or measurement_noise:
        parse = lambda s: ("uniform", *[float(v) for v in s.split(",")]) if s else None
        noise = NoiseModel(n=sys_.n, seed=seed + 1000, process=parse(process_noise),
                           measurement=parse(measurement_noise))
    try:
        ens = run_ensemble(
            sys_, experiments, (k0, k1),
            input_gen=uniform_input_gen(seed, sys_.m, in_lo, in_hi),
            x0_gen=uniform_x0_gen(seed + 1, sys_.n, x0_lo, x0_hi),
            noise=noise,
        )
    except ContractViolation as exc:
        raise CliError(str(exc))
    ens.provenance.update({"seed": seed, "input_range": [in_lo, in_hi],
                           "x0_range": [x0_lo, x0_hi], "plant_spec": plant})
    save_ensemble(ens, out)
    with open(str(out) + ".manifest.json", "w") as fh:
        json.dump({"command": "collect", "plant": plant, "L": experiments,
                   "window": [k0, k1], "seed": seed,
                   "process_noise": process_noise,
                   "measurement_noise": measurement_noise}, fh, indent=1,
                  sort_keys=True)
    if csv:
        export_csv(ens, csv)
    click.echo(f"wrote {out} (L={experiments}, window [{k0}, {k1}])")


def _load_ens(path):
    try:
        return load_ensemble(path)
    except (SchemaError, FileNotFoundError) as exc:
        raise CliError(str(exc))


@main.group()
def design():
    """Run a synthesis problem on a saved ensemble."""


@design.command("bound")
@click.option("--ensemble", type=click.Path(exists=True), required=True)
@click.option("--eta", type=float, default=1.0, show_default=True)
@click.option("--rho", type=float, default=10.0, show_default=True)
@click.option("--periodic", is_flag=True, help="periodic stabilization over one period of data")
@click.option("--feas-tol", type=float, default=1e-8, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--solver", type=click.Choice(["clarabel", "cvxopt"]), default="clarabel")
@click.option("--out", type=click.Path(), required=True)
def design_bound(ensemble, eta, rho, periodic, feas_tol, max_iter, solver, out):
    """Bounded-trajectory (or periodic stabilizing) state feedback."""
    ens = _load_ens(ensemble)
    tol = _tolerances(feas_tol, max_iter, solver)
    try:
        if periodic:
            result = design_periodic_stabilizer(ens, eta, rho, tol=tol)
        else:
            result = design_bounded(ens, eta, rho, tol=tol)
    except ContractViolation as exc:
        raise CliError(str(exc))
    _emit_design(result, out, {"design": "bound", "eta": eta, "rho": rho,
                               "periodic": periodic, "ensemble": ensemble})


@design.command("lqr")
@click.option("--ensemble", type=click.Path(exists=True), required=True)
@click.option("--weights", type=click.Path(exists=True), required=True,
              help="JSON with q, r, and horizon or period (qf for finite)")
@click.option("--feas-tol", type=float, default=1e-8, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--solver", type=click.Choice(["clarabel", "cvxopt"]), default="clarabel")
@click.option("--out", type=click.Path(), required=True)
def design_lqr(ensemble, weights, feas_tol, max_iter, solver, out):
    """Finite-horizon or periodic LQR from data."""
    ens = _load_ens(ensemble)
    try:
        with open(weights) as fh:
            w = LqrWeights.from_json(json.load(fh))
    except (KeyError, ContractViolation, json.JSONDecodeError) as exc:
        raise CliError(f"bad weights file: {exc}")
    tol = _tolerances(feas_tol, max_iter, solver)
    try:
        if w.period is not None:
            result = lqr_data_periodic(ens, w, tol=tol)
        else:
            result = lqr_data_finite(ens, w, tol=tol)
    except ContractViolation as exc:
        raise CliError(str(exc))
    if result.ok:
        result.gains.save(out)
        click.echo(f"status: {result.status.value}  objective: {result.objective}")
        with open(str(out) + ".manifest.json", "w") as fh:
            json.dump({"design": "lqr", "status": result.status.value,
                       "objective": result.objective, "ensemble": ensemble,
                       "weights": weights}, fh, indent=1, sort_keys=True)
        sys.exit(EXIT_OK)
    click.echo(f"status: {result.status.value}")
    sys.exit(_status_exit(result.status))


@design.command("robust")
@click.option("--ensemble", type=click.Path(exists=True), required=True)
@click.option("--eta", type=float, default=1.0, show_default=True)
@click.option("--rho", type=float, default=10.0, show_default=True)
@click.option("--noise-bound", type=click.Choice(["snr", "ball"]), default="ball",
              show_default=True)
@click.option("--gamma", type=float, default=None, help="fixed SNR level for --noise-bound snr")
@click.option("--radius", type=float, default=None, help="residual norm bound for --noise-bound ball")
@click.option("--minimize-snr", is_flag=True,
              help="solve the minimal-SNR program instead of a fixed bound")
@click.option("--feas-tol", type=float, default=1e-8, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--solver", type=click.Choice(["clarabel", "cvxopt"]), default="clarabel")
@click.option("--out", type=click.Path(), required=True)
def design_robust(ensemble, eta, rho, noise_bound, gamma, radius, minimize_snr,
                  feas_tol, max_iter, solver, out):
    """Robust boundedness from noisy data under a residual bound."""
    ens = _load_ens(ensemble)
    tol = _tolerances(feas_tol, max_iter, solver)
    try:
        if minimize_snr:
            result, a_map = design_robust_snr(ens, eta, rho, tol=tol)
            extra = {"design": "robust-snr", "sum_a": sum(a_map.values()) if a_map else None}
        else:
            if noise_bound == "snr":
                if gamma is None:
                    raise CliError("--noise-bound snr needs --gamma")
                bound = NoiseBound.snr(gamma)
            else:
                if radius is None:
                    raise CliError("--noise-bound ball needs --radius")
                bound = NoiseBound.ball(radius)
            result = design_robust_bounded(ens, bound, eta, rho, tol=tol)
            extra = {"design": "robust", "noise_bound": noise_bound,
                     "gamma": gamma, "radius": radius}
    except ContractViolation as exc:
        raise CliError(str(exc))
    _emit_design(result, out, {**extra, "eta": eta, "rho": rho, "ensemble": ensemble})


@design.command("hinf")
@click.option("--ensemble", type=click.Path(exists=True), required=True)
@click.option("--gamma", type=float, default=None, help="fixed attenuation level")
@click.option("--gamma-search", is_flag=True, help="bisect for the smallest feasible level")
@click.option("--bracket", default="0.01:1000", show_default=True, help="bisection bracket 'lo:hi'")
@click.option("--search-tol", type=float, default=0.05, show_default=True)
@click.option("--radius", type=float, required=True, help="residual norm-ball radius")
@click.option("--bound-scale", type=float, default=None, help="multiplier scale of the bound")
@click.option("--process-noise-only", is_flag=True)
@click.option("--condensed", is_flag=True, help="square-data parametrization (L = n+m)")
@click.option("--maps", type=click.Path(exists=True), default=None,
              help="output maps JSON {c, du, dd}; identity state output when omitted")
@click.option("--feas-tol", type=float, default=1e-8, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--solver", type=click.Choice(["clarabel", "cvxopt"]), default="clarabel")
@click.option("--out", type=click.Path(), required=True)
def design_hinf(ensemble, gamma, gamma_search, bracket, search_tol, radius, bound_scale,
                process_noise_only, condensed, maps, feas_tol, max_iter, solver, out):
    """Periodic disturbance-attenuation synthesis from (noisy) data."""
    ens = _load_ens(ensemble)
    if (gamma is None) == (not gamma_search):
        raise CliError("pass exactly one of --gamma or --gamma-search")
    tol = _tolerances(feas_tol, max_iter, solver)
    from .robust_design import OutputMaps

    if maps is not None:
        with open(maps) as fh:
            doc = json.load(fh)
        out_maps = OutputMaps.constant(doc["c"], doc["du"], doc["dd"],
                                       doc.get("c_terminal"))
    else:
        out_maps = OutputMaps.constant(np.eye(ens.n), np.zeros((ens.n, ens.m)),
                                       np.zeros((ens.n, ens.n)))
    n_w = ens.n if process_noise_only else ens.n + ens.m
    bound = NoiseBound.ball(radius, scale=bound_scale)

    def factory(g):
        perf = PerformanceIndex.hinf(g, n_w=n_w, q=out_maps.q)
        return design_robust_performance_periodic(
            ens, out_maps, perf, bound, process_noise_only=process_noise_only,
            condensed=condensed, tol=tol)

    try:
        if gamma_search:
            lo, hi = (float(v) for v in bracket.split(":"))
            search = hinf_gamma_search(factory, lo, hi, search_tol)
            result = search.result
            extra = {"design": "hinf-search", "gamma_star": search.gamma,
                     "trace": [[g, s] for g, s in search.trace]}
            click.echo(f"gamma* = {search.gamma}")
        else:
            result = factory(gamma)
            extra = {"design": "hinf", "gamma": gamma}
    except BracketError as exc:
        click.echo(f"bracket error: {exc}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    except ContractViolation as exc:
        raise CliError(str(exc))
    _emit_design(result, out, {**extra, "ensemble": ensemble, "radius": radius})


@main.group()
def bench():
    """Run the end-to-end benchmark studies."""


@bench.command("scalar")
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--eta", type=float, default=1.0, show_default=True)
@click.option("--rho", type=float, default=20.0, show_default=True)
def bench_scalar_cmd(out_dir, seed, eta, rho):
    """Full-horizon failure versus three successive ensembles."""
    cfg = ScalarBenchConfig(seed=seed, eta=eta, rho=rho)
    report = bench_scalar(cfg, out_dir=out_dir)
    ok = (report["metrics"]["full_horizon_failed_as_expected"]
          and all(s == "Feasible" for s in report["statuses"]["joint"])
          and report["metrics"].get("joint_bound_satisfied", False))
    click.echo(json.dumps(report["metrics"], indent=1, sort_keys=True))
    sys.exit(EXIT_OK if ok else EXIT_NUMERICAL)


@bench.command("converter")
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--theta", type=float, default=0.0, show_default=True,
              help="phase of the periodic state weights")
@click.option("--r-scale", type=float, default=1.0, show_default=True,
              help="scales the input weight R")
@click.option("--skip-noise-free", is_flag=True, help="skip the noise-free oracle comparison")
def bench_converter_cmd(out_dir, theta, r_scale, skip_noise_free):
    """Periodic LQR reproduction and disturbance-attenuation level search."""
    cfg = ConverterBenchConfig(theta=theta, r_weight=0.001 * r_scale,
                               run_noise_free_comparison=not skip_noise_free)
    report = bench_converter(cfg, out_dir=out_dir)
    m = report["metrics"]
    ok = (m["lqr"]["status"] == "Optimal"
          and m["lqr"].get("mean_gain_error", 1.0) <= 1e-4
          and m["hinf"]["bound"]["holds"])
    click.echo(json.dumps({"lqr": m["lqr"], "hinf": {
        "gamma_star": m["hinf"]["gamma_star"],
        "model_gamma_star": m["hinf"].get("model_gamma_star"),
        "step_response": m["hinf"]["step_response"],
    }}, indent=1, sort_keys=True))
    sys.exit(EXIT_OK if ok else EXIT_NUMERICAL)


@main.command()
@click.argument("schedule", type=click.Path(exists=True))
@click.option("--plant", required=True)
@click.option("--samples", type=int, default=100, show_default=True)
@click.option("--x0-scale", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--slack", type=float, default=1e-8, show_default=True,
              help="relative slack allowed on the bound")
@click.option("--out", type=click.Path(), default=None, help="verification report JSON")
def verify(schedule, plant, samples, x0_scale, seed, slack, out):
    """Monte-Carlo check of a schedule's trajectory bound on a known plant."""
    sys_ = _load_plant(plant)
    sched = GainSchedule.load(schedule)
    if sched.eta is None or sched.rho is None:
        raise CliError("schedule carries no (eta, rho) bound to verify")
    k0, k1 = sched.window
    if k0 != 0:
        raise CliError("verification expects a schedule starting at k = 0")
    horizon = k1 if sched.periodic is None else 5 * sched.periodic
    rng = np.random.default_rng(seed)
    worst = 0.0
    violations = 0
    for j in range(samples):
        x0 = x0_scale * rng.uniform(-1, 1, sys_.n)
        traj = simulate(sys_, x0, sched.policy(), T=horizon)
        bounds = np.array([
            trajectory_bound(sched.eta, sched.rho, float(np.linalg.norm(x0)), k)
            for k in range(horizon + 1)
        ])
        ratio = float((traj.norms() / np.maximum(bounds, 1e-300)).max())
        worst = max(worst, ratio)
        if ratio > 1.0 + slack:
            violations += 1
    result = {"samples": samples, "violations": violations,
              "worst_norm_over_bound": worst, "schedule": str(schedule)}
    click.echo(json.dumps(result, indent=1, sort_keys=True))
    if out:
        with open(out, "w") as fh:
            json.dump(result, fh, indent=1, sort_keys=True)
    sys.exit(EXIT_OK if violations == 0 else EXIT_NUMERICAL)


if __name__ == "__main__":
    main()
