"""Command-line pipeline: sample optimal metrics, train the network
approximator, and reproduce the estimation / planning / control runs.

Each subcommand reads one JSON config file; common flags override config
values.  All outputs are plain CSV/JSON so runs can be diffed and
re-plotted; identical configs and seeds produce identical files.
"""

from __future__ import annotations

import argparse
import json
import sys as _sys
from pathlib import Path

import numpy as np

from .control import lqr_gain, ncm_controller, simulate_control
from .cvstem import CvstemConfig, build_dataset
from .dynamics import Trajectory, ball_disturbance, get_system, integrate
from .estimation import EkfEstimator, simulate_estimation, stable_substeps
from .lstm import DeepLstmModel, load_checkpoint
from .metric import load_dataset, tube_radius
from .planning import PlanningFailedError, plan_nominal
from .sources import NcmMetricSource, SampledMetricSource
from .training import TrainConfig, train


class CliError(Exception):
    """Carries an exit code alongside the message."""

    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def _load_config(path):
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}", code=2)
    try:
        with open(p) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {p} is not valid JSON: {exc}", code=2)


def _require_file(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", code=2)
    return p


def _out_dir(cfg, args):
    out = Path(args.out if args.out else cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(cfg, args, default=0):
    if args.seed is not None:
        return int(args.seed)
    return int(cfg.get("seed", default))


def _alpha_grid(cfg):
    grid = cfg.get("alpha_grid")
    if grid is None:
        return None
    if isinstance(grid, dict):
        return np.arange(grid["start"], grid["stop"] + 1e-12, grid["step"])
    return np.asarray(grid, dtype=float)


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _write_plan_csv(path, plan):
    n = plan.states.shape[1]
    m = plan.inputs.shape[1]
    header = ("t," + ",".join(f"x{i}" for i in range(n)) + ","
              + ",".join(f"u{i}" for i in range(m)))
    rows = np.column_stack([plan.times, plan.states, plan.inputs])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _read_plan_csv(path, n):
    with open(path) as fh:
        fh.readline()
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    times = data[:, 0]
    states = data[:, 1:1 + n]
    inputs = data[:, 1 + n:]
    return Trajectory(times=times, states=states,
                      inputs=inputs if inputs.size else None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_sample(args):
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    sys = get_system(cfg.get("system", "lorenz"))
    S = int(cfg.get("S", 10))
    N = int(cfg.get("N", 50))
    dt = float(cfg.get("dt", 0.1))
    cvcfg = CvstemConfig(
        variant=cfg.get("variant", "estimator"),
        alpha_grid=_alpha_grid(cfg) if cfg.get("alpha_grid") is not None
        else CvstemConfig().alpha_grid,
        delta_t=dt,
        gamma_ratio=float(cfg.get("gamma_ratio", 1.0)),
        lam=float(cfg.get("lam", 0.01)),
        chunk=int(cfg.get("chunk", 0)),
        alpha_fixed=cfg.get("alpha_fixed"),
        pointwise=bool(cfg.get("pointwise", False)))

    if cfg.get("plan"):
        plan_path = _require_file(cfg["plan"], "plan file")
        base = _read_plan_csv(plan_path, sys.n)
        trajs = [base] * S if S > 1 else [base]
    else:
        lo = np.asarray(cfg.get("ic_low", [-10.0] * sys.n), dtype=float)
        hi = np.asarray(cfg.get("ic_high", [10.0] * sys.n), dtype=float)
        burn_in = int(cfg.get("burn_in", 0))
        rng = np.random.default_rng(seed)
        trajs = []
        for _ in range(S):
            x0 = rng.uniform(lo, hi)
            if burn_in > 0:
                x0 = integrate(sys, x0, dt=dt, n_steps=burn_in).states[-1]
            trajs.append(integrate(sys, x0, dt=dt, n_steps=N))

    curves = []
    detail = {}
    samples, J_cv = build_dataset(trajs, sys, cvcfg,
                                  out_path=out / "dataset.csv",
                                  curves_out=curves, detail_out=detail)
    for s, curve in enumerate(curves):
        with open(out / f"alpha_curve_{s}.csv", "w") as fh:
            fh.write("alpha,J,status\n")
            for alpha, J, status in curve:
                fh.write(f"{alpha:.17g},{J:.17g},{status}\n")
    _write_json(out / "sample_report.json", {
        "J_cv": J_cv,
        "pooled_alpha": detail["pooled_alpha"],
        "alpha_star": detail["alpha_star"].tolist(),
        "J_star": detail["J_star"].tolist(),
        "chi": detail["chi"].tolist(),
        "nu": detail["nu"].tolist(),
        "worst": detail["worst"],
        "samples": len(samples),
        "seed": seed,
    })
    print(f"sample: wrote {len(samples)} rows, J_cv={J_cv:.6g}, "
          f"pooled_alpha={detail['pooled_alpha']}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    dataset = _require_file(cfg.get("dataset", "dataset.csv"), "dataset file")
    samples, n = load_dataset(dataset)

    def make_tc(layers, hidden, epochs=None):
        return TrainConfig(
            hidden=hidden, layers=layers,
            epochs=int(epochs if epochs is not None else cfg.get("epochs", 500)),
            lr=float(cfg.get("lr", 1e-2)),
            batch_size=int(cfg.get("batch_size", 1)),
            test_fraction=float(cfg.get("test_fraction", 0.2)),
            epsilon=float(cfg.get("epsilon", 1e-2)),
            seed=seed,
            time_input=bool(cfg.get("time_input", False)))

    if cfg.get("grid"):
        grid = cfg["grid"]
        rows = []
        for L in grid.get("layers", [1, 2, 3]):
            for H in grid.get("hidden", [16, 32, 64]):
                tc = make_tc(int(L), int(H), grid.get("epochs"))
                _, hist = train(samples, tc)
                rows.append((int(L), int(H), hist["test_mse"][-1],
                             hist["epochs"], hist["stopped_early"]))
        with open(out / "grid.csv", "w") as fh:
            fh.write("layers,hidden,test_mse,epochs,stopped_early\n")
            for L, H, mse, ep, early in rows:
                fh.write(f"{L},{H},{mse:.17g},{ep},{int(early)}\n")
        best = min(rows, key=lambda r: r[2])
        _write_json(out / "train_report.json", {
            "mode": "grid", "rows": len(rows),
            "best": {"layers": best[0], "hidden": best[1], "test_mse": best[2]},
            "seed": seed})
        print(f"train: grid of {len(rows)} configs, best layers={best[0]} "
              f"hidden={best[1]} test_mse={best[2]:.4g}")
        return 0

    tc = make_tc(int(cfg.get("layers", 2)), int(cfg.get("hidden", 64)))
    model, hist = train(samples, tc)
    model.save(out / "checkpoint.txt")
    with open(out / "history.csv", "w") as fh:
        fh.write("epoch,train_mse,test_mse\n")
        for ep, (a, b) in enumerate(zip(hist["train_mse"], hist["test_mse"]), 1):
            fh.write(f"{ep},{a:.17g},{b:.17g}\n")
    _write_json(out / "train_report.json", {
        "mode": "single", "epochs": hist["epochs"],
        "stopped_early": hist["stopped_early"],
        "train_mse": hist["train_mse"][-1], "test_mse": hist["test_mse"][-1],
        "train_trajectories": hist["train_trajectories"],
        "test_trajectories": hist["test_trajectories"], "seed": seed})
    print(f"train: {hist['epochs']} epochs, final test MSE "
          f"{hist['test_mse'][-1]:.4g}, checkpoint written")
    return 0


def _estimation_sources(cfg, sys, methods):
    sources = {}
    for method in methods:
        if method == "cvstem":
            path = _require_file(cfg.get("dataset", "dataset.csv"), "dataset file")
            samples, _ = load_dataset(path)
            sources[method] = SampledMetricSource(samples)
        elif method == "ncm":
            path = _require_file(cfg.get("checkpoint", "checkpoint.txt"),
                                 "checkpoint file")
            sources[method] = NcmMetricSource(load_checkpoint(path))
        elif method == "ekf":
            q = float(cfg.get("ekf_q", 10.0))
            r = float(cfg.get("ekf_r", 20.0))
            sources[method] = EkfEstimator(sys, q * np.eye(sys.n), r * np.eye(sys.p))
        else:
            raise CliError(f"unknown estimation method {method!r}")
    return sources


def cmd_estimate(args):
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    sys = get_system(cfg.get("system", "lorenz"))
    methods = (args.method.split(",") if args.method
               else cfg.get("methods", ["cvstem", "ekf"]))
    x0 = np.asarray(cfg.get("x0", [-1.0, 2.0, 3.0]), dtype=float)
    x_hat0 = np.asarray(cfg.get("x_hat0", [150.1, -1.5, -6.0]), dtype=float)
    dt = float(cfg.get("dt", 0.1))
    n_steps = int(cfg.get("n_steps", 200))
    d1_max = float(cfg.get("d1_max", sys.bounds.d1_max))
    d2_max = float(cfg.get("d2_max", sys.bounds.d2_max))

    bound = cfg.get("bound")
    if bound is None and cfg.get("sample_report"):
        report = _load_config(cfg["sample_report"])
        bound = report["worst"]
    bound_params = None
    if bound:
        bound_params = {"chi": float(bound["chi"]), "nu": float(bound["nu"]),
                        "gamma": float(bound["gamma"]),
                        "d1_max": d1_max, "d2_max": d2_max}

    sources = _estimation_sources(cfg, sys, methods)
    summary = {}
    for method, source in sources.items():
        d1 = ball_disturbance(sys.B(x0, 0.0).shape[1], d1_max, seed)
        d2 = ball_disturbance(sys.G(x0, 0.0).shape[1], d2_max, seed + 1)
        if method == "ekf":
            substeps = int(cfg.get("substeps", 10))
        else:
            eig_max = max(float(np.linalg.eigvalsh(
                source.metric(x_hat0, 0.0)).max()), 1.0)
            substeps = int(cfg.get("substeps", stable_substeps(eig_max, dt)))
        run = simulate_estimation(sys, source, x0, x_hat0, d1, d2, dt, n_steps,
                                  bound_params=bound_params, substeps=substeps)
        run.to_csv(out / f"run_{method}.csv")
        entry = run.summary()
        if bound_params:
            t_ss = 5.0 / bound_params["gamma"]
            entry["steady_state_smoothed_error"] = run.steady_state_error(t_ss)
        summary[method] = entry
    _write_json(out / "estimate_summary.json", {"seed": seed, "runs": summary})
    for method, entry in summary.items():
        print(f"estimate[{method}]: final error {entry['final_error']:.4g}, "
              f"max {entry['max_error']:.4g}")
    return 0


def cmd_plan(args):
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args)
    sys = get_system(cfg.get("system", "spacecraft"))
    x_start = np.asarray(cfg["x_start"], dtype=float)
    x_goal = np.asarray(cfg["x_goal"], dtype=float)
    obstacles = [tuple(map(float, ob)) for ob in cfg.get("obstacles", [])]
    tube = cfg.get("tube")
    if tube is None and cfg.get("tube_from"):
        tf = cfg["tube_from"]
        tube = tube_radius(float(tf["d_max"]), float(tf["chi"]), float(tf["alpha"]))
    tube = float(tube) if tube is not None else 0.0
    plan = plan_nominal(
        sys, x_start, x_goal, obstacles or None,
        horizon=float(cfg.get("horizon", 50.0)), dt=float(cfg.get("dt", 0.5)),
        input_box=tuple(cfg.get("input_box", (0.0, 1.0))), tube=tube,
        w_terminal=float(cfg.get("w_terminal", 100.0)),
        w_obstacle=float(cfg.get("w_obstacle", 10.0)),
        terminal_tol=float(cfg.get("terminal_tol", 1e-2)))
    _write_plan_csv(out / "plan.csv", plan)
    from .control import obstacle_clearances
    min_clear = (float(obstacle_clearances(plan.states, obstacles).min())
                 if obstacles else float("inf"))
    effort = float(np.sum(plan.inputs[:-1] ** 2) * (plan.times[1] - plan.times[0]))
    _write_json(out / "plan_report.json", {
        "terminal_error": float(np.linalg.norm(plan.states[-1] - x_goal)),
        "min_clearance": min_clear, "tube": tube, "effort": effort})
    print(f"plan: terminal error "
          f"{np.linalg.norm(plan.states[-1] - x_goal):.4g}, "
          f"min clearance {min_clear:.4g}, effort {effort:.4g}")
    return 0


def cmd_control(args):
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    sys = get_system(cfg.get("system", "spacecraft"))
    plan_path = _require_file(cfg.get("plan", "plan.csv"), "plan file")
    plan = _read_plan_csv(plan_path, sys.n)
    methods = (args.method.split(",") if args.method
               else cfg.get("methods", ["cvstem", "lqr"]))
    d_max = float(cfg.get("d_max", sys.bounds.d_max))
    tube = cfg.get("tube")
    tube = float(tube) if tube is not None else None
    obstacles = [tuple(map(float, ob)) for ob in cfg.get("obstacles", [])] or None
    substeps = int(cfg.get("substeps", 2))

    summary = {}
    for method in methods:
        if method == "cvstem":
            path = _require_file(cfg.get("dataset", "dataset.csv"), "dataset file")
            samples, _ = load_dataset(path)
            gain_source = SampledMetricSource(samples)
        elif method == "ncm":
            path = _require_file(cfg.get("checkpoint", "checkpoint.txt"),
                                 "checkpoint file")
            gain_source = NcmMetricSource(load_checkpoint(path))
        elif method == "lqr":
            q = float(cfg.get("lqr_q", 2.4))
            r = float(cfg.get("lqr_r", 1.0))
            x_ref = plan.states[-1]
            gain_source = lqr_gain(sys.A(x_ref, 0.0), sys.B1(x_ref, 0.0),
                                   q * np.eye(sys.n), r * np.eye(sys.m))
        else:
            raise CliError(f"unknown control method {method!r}")
        d = ball_disturbance(sys.B(plan.states[0], 0.0).shape[1], d_max, seed)
        run = simulate_control(sys, plan, gain_source, d, tube=tube,
                               obstacles=obstacles, substeps=substeps)
        run.to_csv(out / f"run_{method}.csv")
        summary[method] = run.summary()
    _write_json(out / "control_summary.json", {"seed": seed, "runs": summary})
    for method, entry in summary.items():
        print(f"control[{method}]: effort {entry['effort']:.4g}, "
              f"max deviation {entry['max_deviation']:.4g}")
    return 0


def cmd_check(args):
    failures = []

    def check(name, fn):
        try:
            ok, info = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, info = False, f"{type(exc).__name__}: {exc}"
        print(f"check {name}: {'pass' if ok else 'FAIL'} ({info})")
        if not ok:
            failures.append(name)

    def chol_roundtrip():
        from .metric import cholesky_upper, pack_theta, theta_size, unpack_theta
        rng = np.random.default_rng(0)
        worst = 0.0
        for n in (2, 5, 9):
            F = rng.standard_normal((n, n))
            M = F @ F.T + n * np.eye(n)
            U = cholesky_upper(M)
            worst = max(worst, float(abs(U.T @ U - M).max()))
            theta = pack_theta(U)
            if theta.size != theta_size(n) or abs(unpack_theta(theta, n) - U).max() > 0:
                return False, "pack/unpack mismatch"
        return worst < 1e-10, f"max residual {worst:.2e}"

    def rk4_order():
        from .dynamics import rk4_step
        errs = []
        for h in (0.1, 0.05):
            x = np.array([1.0])
            t, e = 0.0, 0.0
            while t < 1.0 - 1e-12:
                x = rk4_step(lambda x, t: -x, x, t, h)
                t += h
            errs.append(abs(x[0] - np.exp(-1.0)))
        order = np.log2(errs[0] / errs[1])
        return order > 3.8, f"observed order {order:.2f}"

    def bptt_check():
        from .training import gradient_check
        rng = np.random.default_rng(7)
        model = DeepLstmModel(3, hidden=4, layers=2, seed=7)
        x_seq = rng.standard_normal((5, 3))
        th_seq = rng.standard_normal((5, model.k))
        err = gradient_check(model, x_seq, th_seq, n_checks=60, seed=1)
        return err < 1e-5, f"max rel err {err:.2e}"

    def scalar_cvstem():
        from .cvstem import line_search
        sys = get_system("linear:-1")
        traj = integrate(sys, np.array([1.0]), dt=0.1, n_steps=3)
        cfg = CvstemConfig(variant="contraction", alpha_grid=[0.25, 0.5, 0.75],
                           delta_t=0.1)
        alpha, _, _ = line_search(traj, sys, cfg)
        return abs(alpha - 0.75) < 1e-12, f"alpha*={alpha}"

    def ekf_are():
        from scipy.linalg import solve_continuous_are
        sysl = get_system("linear:-0.5")
        Q, R = 2.0 * np.eye(1), 0.5 * np.eye(1)
        ekf = EkfEstimator(sysl, Q, R)
        x = np.zeros(1)
        for _ in range(3000):
            x = ekf.step(x, np.zeros(1), 0.0, 0.01)
        P_are = solve_continuous_are(sysl.A(x, 0.0).T, sysl.C(x, 0.0).T, Q, R)
        resid = float(abs(ekf.P - P_are).max())
        return resid < 1e-4, f"ARE residual {resid:.2e}"

    def checkpoint_identity():
        import tempfile
        model = DeepLstmModel(2, hidden=3, layers=1, seed=3)
        with tempfile.TemporaryDirectory() as td:
            p1, p2 = Path(td) / "a.txt", Path(td) / "b.txt"
            model.save(p1)
            load_checkpoint(p1).save(p2)
            same = p1.read_bytes() == p2.read_bytes()
        return same, "byte-identical" if same else "mismatch"

    check("cholesky-roundtrip", chol_roundtrip)
    check("rk4-order", rk4_order)
    check("bptt-gradient", bptt_check)
    check("scalar-cvstem", scalar_cvstem)
    check("ekf-are", ekf_are)
    check("checkpoint-identity", checkpoint_identity)
    if failures:
        raise CliError("self-check failures: " + ", ".join(failures))
    return 0


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="ncmkit",
        description="contraction-metric pipeline: sample, train, run")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {"sample": cmd_sample, "train": cmd_train,
                "estimate": cmd_estimate, "plan": cmd_plan,
                "control": cmd_control, "check": cmd_check}
    for name in handlers:
        p = sub.add_parser(name)
        if name != "check":
            p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--method", default=None,
                       help="comma-separated method list override")
    args = parser.parse_args(argv)
    try:
        return handlers[args.command](args)
    except CliError as exc:
        print(f"error:CliError: {exc}", file=_sys.stderr)
        return exc.code
    except PlanningFailedError as exc:
        print(f"error:PlanningFailedError: {exc}", file=_sys.stderr)
        return 1
    except Exception as exc:
        print(f"error:{type(exc).__name__}: {exc}", file=_sys.stderr)
        return 1


if __name__ == "__main__":
    _sys.exit(main())
