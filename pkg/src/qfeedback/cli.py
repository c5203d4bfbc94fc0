"""Reproducible experiment runner.

Every subcommand accepts an optional JSON config file whose keys are the
flag destinations; explicit flags win over config values. All randomness
flows from one ``--seed`` through the documented split scheme (scenario
to trial to step), so serial runs, parallel runs, and reruns write
byte-identical CSV files. Artifacts land atomically (temp file plus
rename) in ``--out`` or the directory named by the QFEEDBACK_OUT
environment variable.

Summary schema: one JSON object per run on stdout with at least
``scenario`` and ``seed``; scenario-specific numeric fields sit next to
``csv``/``svg`` paths when files were written.

Exit codes: 0 success, 2 configuration error, 3 numerical abort with a
module diagnostic, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .chaos import (
    finite_time_lyapunov,
    random_kick,
    schrodinger_microscope,
    trajectory_divergence,
)
from .feedback import (
    IntegrationError,
    Trajectory,
    builtin_policies,
    drive_to_target,
    integrate_nls,
    make_policy,
    run_closed_loop,
)
from .linalg import (
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    DensityMatrix,
    Observable,
    density_from_json,
    expectation,
    observable_from_json,
    sup_distance,
    trace_distance,
)
from .measurement import (
    WeakMeasurementConfig,
    averaged_channel,
    collective_outcomes,
    default_observable_set,
    estimator_accuracy,
    weak_tomography,
)
from .pointer import (
    CouplingConfig,
    couple_and_evolve,
    density_moments,
    make_gaussian_pointer,
    pointer_marginal,
    system_reduced,
)
from .seeding import spawn_seeds

OUT_ENV_VAR = "QFEEDBACK_OUT"

_NAMED_OBSERVABLES = {
    "sigma_x": PAULI_X,
    "sigma_y": PAULI_Y,
    "sigma_z": PAULI_Z,
}

_POLICY_ALIASES = {"kicked_top": "kicked_nonlinear_top"}


# ---------------------------------------------------------------------------
# I/O helpers


def _load_state(spec: str) -> DensityMatrix:
    with open(spec) as f:
        return density_from_json(json.load(f))


def _load_observable(spec: str) -> Observable:
    if spec in _NAMED_OBSERVABLES:
        return Observable(_NAMED_OBSERVABLES[spec])
    with open(spec) as f:
        return observable_from_json(json.load(f))


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _write_csv(path: str, header, rows) -> str:
    """RFC-4180-style CSV written atomically: temp file then rename."""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\r\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(x) for x in row])
        os.chmod(tmp, 0o644)  # mkstemp defaults to 0600, too tight for artifacts
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _trajectory_rows(traj: Trajectory):
    d = traj.states[0].dim
    header = ["t"]
    for i in range(d):
        for j in range(d):
            header += [f"rho_{i}{j}_re", f"rho_{i}{j}_im"]
    rows = []
    for t, state in zip(traj.times, traj.states):
        row = [float(t)]
        for z in state.matrix.ravel():
            row += [float(z.real), float(z.imag)]
        rows.append(row)
    return header, rows


def _render_svg(csv_path: str, svg_path: str) -> str:
    """Line plot of every numeric column against the first one."""
    try:
        import matplotlib
    except ImportError as exc:
        raise ValueError(
            "SVG output needs matplotlib; install the 'plots' extra"
        ) from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        cols = [[] for _ in header]
        for row in reader:
            for c, v in zip(cols, row):
                c.append(float(v))
    fig, ax = plt.subplots(figsize=(6, 4))
    x = cols[0]
    for name, col in zip(header[1:], cols[1:]):
        ax.plot(x, col, label=name, linewidth=1)
    ax.set_xlabel(header[0])
    if len(header) <= 9:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return svg_path


def _run_trials(fn, seeds, threads: int) -> list:
    """Map fn over per-trial seeds; results keep trial order regardless
    of pool size, so outputs cannot depend on scheduling."""
    if threads <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, seeds))


def _out_path(args, name: str) -> str:
    return os.path.join(args.out, name)


def _meas_cfg(args, obs: Observable) -> WeakMeasurementConfig:
    return WeakMeasurementConfig(observable=obs, delta=args.delta, n_systems=args.n_systems)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_measure(args) -> dict:
    rho = _load_state(args.rho)
    obs = _load_observable(args.obs)
    cfg = _meas_cfg(args, obs)
    seeds = spawn_seeds(args.seed, args.trials)
    outcomes = _run_trials(lambda s: float(collective_outcomes(rho, cfg, 1, s)[0]), seeds, args.threads)
    abar = expectation(rho, obs)
    rmse = float(np.sqrt(np.mean((np.array(outcomes) - abar) ** 2)))
    path = _write_csv(_out_path(args, "measure.csv"), ["trial", "outcome"], list(enumerate(outcomes)))
    return {
        "scenario": "measure",
        "trials": args.trials,
        "mean_outcome": float(np.mean(outcomes)),
        "expectation": abar,
        "empirical_rmse": rmse,
        "predicted_accuracy": estimator_accuracy(cfg, rho),
        "csv": path,
    }


def _cmd_tomo(args) -> dict:
    rho = _load_state(args.rho)
    obs_set = default_observable_set(rho.dim)
    cfg = _meas_cfg(args, obs_set[0])
    seeds = spawn_seeds(args.seed, args.trials)

    def one(seed):
        result = weak_tomography(rho, obs_set, cfg, seed, exact=args.exact)
        coords = [expectation(result.estimate, o) for o in obs_set]
        return coords + [trace_distance(result.estimate, rho)]

    rows = _run_trials(one, seeds, args.threads)
    k = len(obs_set)
    header = ["trial"] + [f"coord_{i}" for i in range(k)] + ["trace_distance"]
    path = _write_csv(_out_path(args, "tomo.csv"), header, [[i] + r for i, r in enumerate(rows)])
    tds = np.array([r[-1] for r in rows])
    return {
        "scenario": "tomo",
        "trials": args.trials,
        "median_trace_distance": float(np.median(tds)),
        "predicted_accuracy": max(
            estimator_accuracy(WeakMeasurementConfig(o, args.delta, args.n_systems), rho)
            for o in obs_set
        ),
        "csv": path,
    }


def _cmd_pointer(args) -> dict:
    rho = _load_state(args.rho)
    obs = _load_observable(args.obs)
    amax = float(np.max(np.abs(obs.eigenvalues)))
    pointer = make_gaussian_pointer(args.dq, m=args.grid, max_shift=args.gamma_t * args.n_systems * amax)
    cfg = CouplingConfig(observable=obs, gamma_t=args.gamma_t, n_systems=args.n_systems)
    joint = couple_and_evolve(rho, pointer, cfg)
    marginal = pointer_marginal(joint, rng_seed=args.seed)
    mean, var = density_moments(marginal.grid, marginal.density)
    spread2 = expectation(rho, Observable(obs.matrix @ obs.matrix)) - expectation(rho, obs) ** 2
    path = _write_csv(
        _out_path(args, "pointer.csv"),
        ["q", "density"],
        zip(marginal.grid.tolist(), marginal.density.tolist()),
    )
    return {
        "scenario": "pointer",
        "sample": marginal.sample,
        "estimate": marginal.estimate,
        "marginal_mean": mean,
        "marginal_variance": var,
        "predicted_variance": args.dq**2 + args.gamma_t**2 * args.n_systems * spread2,
        "csv": path,
    }


def _cmd_oracle_compare(args) -> dict:
    rho = (
        _load_state(args.rho)
        if args.rho
        else DensityMatrix.pure(np.array([1.0, 1.0]) / math.sqrt(2))
    )
    obs = _load_observable(args.obs)
    amax = float(np.max(np.abs(obs.eigenvalues)))
    pointer = make_gaussian_pointer(args.dq, m=args.grid, max_shift=args.gamma_t * args.n_systems * amax)
    cfg = CouplingConfig(observable=obs, gamma_t=args.gamma_t, n_systems=args.n_systems)
    reduced = system_reduced(couple_and_evolve(rho, pointer, cfg))
    channel = averaged_channel(rho, obs, args.dq / args.gamma_t)
    sup = sup_distance(reduced, channel)
    rows = []
    d = rho.dim
    for i in range(d):
        for j in range(d):
            a, b = reduced.matrix[i, j], channel.matrix[i, j]
            rows.append([i, j, a.real, a.imag, b.real, b.imag, abs(a - b)])
    path = _write_csv(
        _out_path(args, "oracle_compare.csv"),
        ["i", "j", "pointer_re", "pointer_im", "channel_re", "channel_im", "abs_diff"],
        rows,
    )
    return {
        "scenario": "oracle-compare",
        "n_systems": args.n_systems,
        "grid": args.grid,
        "sup_distance": sup,
        "csv": path,
    }


def _build_policy(args):
    policy_id = _POLICY_ALIASES.get(args.policy, args.policy)
    if policy_id == "mean_field_bloch":
        return make_policy(policy_id, args.gx, args.gy, args.gz)
    if policy_id == "kicked_nonlinear_top":
        return make_policy(policy_id, args.k, args.period)
    if policy_id == "identity":
        return make_policy(policy_id)
    raise ValueError(f"subcommand cannot build policy {args.policy!r}")


def _cmd_feedback(args) -> dict:
    rho = _load_state(args.rho)
    policy = _build_policy(args)
    cfg = None if args.exact else _meas_cfg(args, default_observable_set(rho.dim)[0])
    traj = run_closed_loop(rho, policy, args.t_final, args.dt, meas_cfg=cfg, rng_seed=args.seed)
    header, rows = _trajectory_rows(traj)
    path = _write_csv(_out_path(args, "feedback.csv"), header, rows)
    return {
        "scenario": "feedback",
        "policy": policy.name,
        "steps": len(traj.times) - 1,
        "final_purity": traj.states[-1].purity(),
        "csv": path,
    }


def _cmd_steer(args) -> dict:
    rho = _load_state(args.rho)
    target_state = _load_state(args.target)
    w, v = np.linalg.eigh(target_state.matrix)
    if w[-1] < 1.0 - 1e-9:
        raise ValueError("steering target must be a pure state")
    target = v[:, -1]
    obs_set = default_observable_set(rho.dim)
    cfg = _meas_cfg(args, obs_set[0])
    seeds = spawn_seeds(args.seed, args.trials)

    def one(seed):
        traj = drive_to_target(
            rho,
            target,
            cfg,
            seed,
            threshold=args.threshold,
            max_iterations=args.iterations,
            exact=args.exact,
        )
        return [traj.metadata["iterations"], traj.metadata["final_infidelity"]]

    # aggregate the per-trial purity warnings instead of printing dozens
    import warnings

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = _run_trials(one, seeds, args.threads)
    path = _write_csv(
        _out_path(args, "steer.csv"),
        ["trial", "iterations", "final_infidelity"],
        [[i] + r for i, r in enumerate(rows)],
    )
    return {
        "scenario": "steer",
        "trials": args.trials,
        "median_final_infidelity": float(np.median([r[1] for r in rows])),
        "estimate_purity_warnings": len(caught),
        "csv": path,
    }


def _cmd_nls(args) -> dict:
    rho = _load_state(args.rho)
    policy = make_policy("mean_field_bloch", args.gx, args.gy, args.gz)
    traj = integrate_nls(rho, policy, args.t_final, args.dt, sample_every=args.sample_every)
    header, rows = _trajectory_rows(traj)
    path = _write_csv(_out_path(args, "nls.csv"), header, rows)
    return {"scenario": "nls", "csv": path, **traj.diagnostics}


def _chaos_initial(args):
    state_seed, kick_seed = spawn_seeds(args.seed, 2)
    rng = np.random.default_rng(state_seed)
    vec = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    return DensityMatrix.pure(vec / np.linalg.norm(vec)), kick_seed


def _cmd_chaos(args) -> dict:
    policy = _build_policy(args)
    rho0, kick_seed = _chaos_initial(args)
    series = trajectory_divergence(
        rho0, args.s0, policy, args.t_final, dt=args.dt, metric=args.metric, rng_seed=kick_seed
    )
    fit = finite_time_lyapunov(series)
    path = _write_csv(
        _out_path(args, "chaos.csv"),
        ["t", "separation"],
        zip(series.times.tolist(), series.separations.tolist()),
    )
    return {
        "scenario": "chaos",
        "policy": policy.name,
        "lyapunov": fit.rate,
        "r_squared": fit.r_squared,
        "window_found": fit.window_found,
        "csv": path,
    }


def _cmd_microscope(args) -> dict:
    policy = _build_policy(args)
    rho_a, kick_seed = _chaos_initial(args)
    rho_b = random_kick(rho_a, args.s0, metric=args.metric, rng_seed=kick_seed)
    t_detect, series = schrodinger_microscope(
        rho_a, rho_b, policy, threshold=args.threshold, t_max=args.t_final, dt=args.dt, metric=args.metric
    )
    path = _write_csv(
        _out_path(args, "microscope.csv"),
        ["t", "separation"],
        zip(series.times.tolist(), series.separations.tolist()),
    )
    return {
        "scenario": "microscope",
        "s0": args.s0,
        "threshold": args.threshold,
        "t_detect": t_detect,
        "csv": path,
    }


def _cmd_list_policies(args) -> dict:
    return {"scenario": "list-policies", "policies": builtin_policies()}


# ---------------------------------------------------------------------------
# Parser


def _add_common(sp):
    sp.add_argument("--config", help="JSON config file; explicit flags override its values")
    sp.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker pool size for independent trials")
    sp.add_argument("--out", default=os.environ.get(OUT_ENV_VAR, "."), help=f"output directory (default ${OUT_ENV_VAR} or cwd)")
    sp.add_argument("--svg", action="store_true", help="also render the CSV to an SVG line plot")


def _add_ensemble(sp, delta_default: float):
    sp.add_argument("--rho", default="fixtures/qubit_mixed.json", help="density matrix JSON file")
    sp.add_argument("--N", dest="n_systems", type=int, default=1000, help="ensemble size")
    sp.add_argument("--delta", type=float, default=delta_default, help="readout resolution")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="qfeedback",
        description="ensemble weak-measurement and feedback experiments",
    )
    subs = parser.add_subparsers(dest="scenario", required=True)
    registry = {}

    sp = subs.add_parser("measure", help="repeated collective readouts of one observable")
    _add_ensemble(sp, math.sqrt(1000.0))
    sp.add_argument("--obs", default="sigma_z", help="sigma_x|sigma_y|sigma_z or an observable JSON file")
    sp.add_argument("--trials", type=int, default=1000)
    _add_common(sp)
    registry["measure"] = (sp, _cmd_measure)

    sp = subs.add_parser("tomo", help="full state reconstruction from collective readouts")
    _add_ensemble(sp, 100.0)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--exact", action="store_true", help="infinite-ensemble limit: no noise, no back-action")
    _add_common(sp)
    registry["tomo"] = (sp, _cmd_tomo)

    sp = subs.add_parser("pointer", help="explicit meter model: marginal density and moments")
    sp.add_argument("--rho", default="fixtures/qubit_plus.json")
    sp.add_argument("--obs", default="sigma_z")
    sp.add_argument("--N", dest="n_systems", type=int, default=1)
    sp.add_argument("--gamma-t", dest="gamma_t", type=float, default=1.0, help="integrated coupling strength")
    sp.add_argument("--dq", type=float, default=1.0, help="pointer packet width")
    sp.add_argument("--grid", type=int, default=2048, help="pointer grid points")
    _add_common(sp)
    registry["pointer"] = (sp, _cmd_pointer)

    sp = subs.add_parser("oracle-compare", help="pointer-model reduced state vs averaged channel")
    sp.add_argument("--rho", default=None, help="density matrix JSON (default: equal superposition qubit)")
    sp.add_argument("--obs", default="sigma_z")
    sp.add_argument("--N", dest="n_systems", type=int, default=2)
    sp.add_argument("--gamma-t", dest="gamma_t", type=float, default=0.5)
    sp.add_argument("--dq", type=float, default=1.0)
    sp.add_argument("--grid", type=int, default=2048)
    _add_common(sp)
    registry["oracle-compare"] = (sp, _cmd_oracle_compare)

    sp = subs.add_parser("feedback", help="closed-loop measure-then-act trajectory")
    _add_ensemble(sp, 100.0)
    sp.add_argument("--policy", default="mean_field_bloch")
    sp.add_argument("--gx", type=float, default=0.0)
    sp.add_argument("--gy", type=float, default=0.0)
    sp.add_argument("--gz", type=float, default=1.0)
    sp.add_argument("--k", type=float, default=3.0)
    sp.add_argument("--period", type=float, default=1.0)
    sp.add_argument("--t", dest="t_final", type=float, default=2.0)
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--exact", action="store_true", help="exact estimates, no measurement back-action")
    _add_common(sp)
    registry["feedback"] = (sp, _cmd_feedback)

    sp = subs.add_parser("steer", help="drive an unknown pure state onto a target")
    _add_ensemble(sp, 100.0)
    sp.set_defaults(rho="fixtures/qubit_zero.json")
    sp.add_argument("--target", default="fixtures/qubit_plus.json", help="pure target state JSON")
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--iterations", type=int, default=5, help="feedback cycles per trial")
    sp.add_argument("--threshold", type=float, default=0.0, help="stop once estimated infidelity drops here")
    sp.add_argument("--exact", action="store_true")
    _add_common(sp)
    registry["steer"] = (sp, _cmd_steer)

    sp = subs.add_parser("nls", help="deterministic nonlinear flow (exact-feedback limit)")
    sp.add_argument("--rho", default="fixtures/qubit_plus.json")
    sp.add_argument("--gx", type=float, default=0.0)
    sp.add_argument("--gy", type=float, default=0.0)
    sp.add_argument("--gz", type=float, default=1.0)
    sp.add_argument("--t", dest="t_final", type=float, default=5.0)
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--sample-every", dest="sample_every", type=int, default=10)
    _add_common(sp)
    registry["nls"] = (sp, _cmd_nls)

    sp = subs.add_parser("chaos", help="trajectory divergence and finite-time exponent")
    sp.add_argument("--policy", default="kicked_top")
    sp.add_argument("--k", type=float, default=3.0)
    sp.add_argument("--period", type=float, default=1.0)
    sp.add_argument("--gx", type=float, default=0.0)
    sp.add_argument("--gy", type=float, default=0.0)
    sp.add_argument("--gz", type=float, default=1.0)
    sp.add_argument("--s0", type=float, default=1e-6, help="initial separation")
    sp.add_argument("--t", dest="t_final", type=float, default=50.0)
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--metric", default="trace", choices=["trace", "sup"])
    _add_common(sp)
    registry["chaos"] = (sp, _cmd_chaos)

    sp = subs.add_parser("microscope", help="detection time for a tiny preparation difference")
    sp.add_argument("--policy", default="kicked_top")
    sp.add_argument("--k", type=float, default=3.0)
    sp.add_argument("--period", type=float, default=1.0)
    sp.add_argument("--gx", type=float, default=0.0)
    sp.add_argument("--gy", type=float, default=0.0)
    sp.add_argument("--gz", type=float, default=1.0)
    sp.add_argument("--s0", type=float, default=1e-4)
    sp.add_argument("--threshold", type=float, default=0.3)
    sp.add_argument("--t", dest="t_final", type=float, default=80.0)
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--metric", default="trace", choices=["trace", "sup"])
    _add_common(sp)
    registry["microscope"] = (sp, _cmd_microscope)

    sp = subs.add_parser("list-policies", help="print the builtin policy catalog")
    _add_common(sp)
    registry["list-policies"] = (sp, _cmd_list_policies)

    return parser, registry


def _apply_config(argv, parser, registry):
    """First pass finds the subcommand and config file; config values
    become that subparser's defaults so explicit flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    scenario = next((a for a in argv if a in registry), None)
    if scenario is None:
        raise ValueError("--config requires a subcommand")
    with open(known.config) as f:
        values = json.load(f)
    if not isinstance(values, dict):
        raise ValueError("config file must hold a JSON object")
    sp = registry[scenario][0]
    valid = {action.dest for action in sp._actions}
    unknown = sorted(set(values) - valid)
    if unknown:
        raise ValueError(f"config keys not recognized by {scenario!r}: {unknown}")
    sp.set_defaults(**values)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    try:
        _apply_config(argv, parser, registry)
        args = parser.parse_args(argv)
        summary = registry[args.scenario][1](args)
        if getattr(args, "svg", False) and summary.get("csv"):
            summary["svg"] = _render_svg(summary["csv"], summary["csv"][:-4] + ".svg")
        summary["seed"] = args.seed
        print(json.dumps(summary, separators=(",", ":"), sort_keys=True))
        return 0
    except IntegrationError as exc:
        print(json.dumps({"error": str(exc), "diagnostics": exc.diagnostics}), file=sys.stderr)
        return 3
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
