"""Command-line entry point: ``principal-flow {gen,fit,simulate,ftle,prc}``.

Every command writes its artifacts plus one ``manifest.json`` into the
``--out`` directory. Exit codes: 0 success, 1 runtime or I/O failure,
2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .data import SHAPES, ShapeSpec, data_diameter, generate, load_cloud, save_cloud
from .diffcore import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, ContractError, PrincipalFlowError
from .field import ANALYTIC_FIELDS, VelocityField
from .ftle import ftle_field, write_ftle_csv
from .integrate import SCHEMES, IntegratorSpec, simulate_batch, write_trajectories_csv
from .prc import (
    DEFAULT_DELTA_A, DEFAULT_LAMBDA_CIRCLE, DEFAULT_N_PHASES, RELAX_PERIODS, PRCParams, default_relax_spec, fit_prc,
    WARM_START_ATTRACTION, phase_grid, simulate_prc, target_prc, write_prc_csv,
)
from .train import TrainConfig, fit_principal_flow

log = logging.getLogger("principal_flow")

MANIFEST = "manifest.json"
# PRC fitting defaults differ from the trajectory fit (see README)
PRC_DEFAULTS = {"learning_rate": 5e-4, "n_iterations": 2000, "grad_clip": 1e4, "dt": 0.1}


class UsageError(Exception):
    pass


# --- helpers -----------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict, seed, artifacts: list[str]) -> None:
    doc = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "artifacts": sorted(artifacts),
    }
    (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path}: expected a JSON object")
    return doc


def _load_model(spec: str):
    """A checkpoint path, or ``analytic:<name>`` for a built-in test field."""
    if spec.startswith("analytic:"):
        name = spec.split(":", 1)[1]
        if name not in ANALYTIC_FIELDS:
            raise UsageError(f"unknown analytic field {name!r}; choose from {sorted(ANALYTIC_FIELDS)}")
        return ANALYTIC_FIELDS[name]()
    return VelocityField(load_checkpoint(spec))


def _load_inits(args) -> np.ndarray:
    if args.inits is not None:
        return load_cloud(args.inits).points
    if args.init:
        return np.array(args.init, dtype=np.float64)
    raise UsageError("give initial conditions with --inits FILE or --init X Y")


def _train_log_writer(path: Path, columns: list[str]):
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    return fh, w


def _wall(elapsed: float, enabled: bool) -> str:
    return repr(round(elapsed * 1000.0, 3)) if enabled else ""


# --- commands ----------------------------------------------------------------

def cmd_gen(args) -> None:
    out = _out_dir(args.out)
    spec = ShapeSpec(args.shape, args.n, args.noise, args.seed)
    cloud = generate(spec)
    save_cloud(cloud, out / "cloud.csv")
    cfg = {"shape": args.shape, "n": args.n, "noise": args.noise, "seed": args.seed}
    _write_manifest(out, "gen", cfg, args.seed, ["cloud.csv"])


def _fit_config(args) -> TrainConfig:
    d = TrainConfig().to_dict()
    d.update(_read_config(args.config))
    flags = {
        "n_iterations": args.iterations, "seed": args.seed, "learning_rate": args.lr,
        "n_trajectories": args.n_trajectories, "dt": args.dt, "init_sigma": args.init_sigma,
        "noise_sigma": args.noise_inject, "horizon_warmup": args.horizon_warmup,
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    if args.init_mean is not None:
        d["init_mean"] = list(args.init_mean)
    if args.hidden is not None:
        d["arch"] = {"layer_widths": [2, *args.hidden, 2], "activation": "tanh"}
    if args.steps is not None:
        d["integrator"] = {"scheme": args.scheme or "rk4", "dt": d["dt"], "n_steps": args.steps}
    elif args.scheme is not None:
        raise UsageError("--scheme needs --steps (the default horizon uses rk4)")
    return TrainConfig.from_dict(d)


def cmd_fit(args) -> None:
    cloud = load_cloud(args.data)
    cfg = _fit_config(args)
    out = _out_dir(args.out)
    artifacts = ["model.json", "train_log.csv"]
    fh, w = _train_log_writer(out / "train_log.csv", ["iteration", "term1", "term2", "total", "wall_ms"])
    ckpt_dir = out / "checkpoints"

    def callback(it, lb, params, elapsed):
        w.writerow([it, repr(lb.traj_to_data), repr(lb.data_to_traj), repr(lb.total), _wall(elapsed, args.wall_clock)])
        if args.checkpoint_every and it > 0 and it % args.checkpoint_every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            save_checkpoint(params, ckpt_dir / f"iter_{it:06d}.json")
            artifacts.append(f"checkpoints/iter_{it:06d}.json")
        if it % 100 == 0:
            log.info("iter %d  loss %.5f", it, lb.total)

    try:
        rep = fit_principal_flow(cfg, cloud, callback)
    finally:
        fh.close()
    save_checkpoint(rep.final_params, out / "model.json")
    resolved = cfg.to_dict()
    resolved["integrator"] = {"scheme": rep.integrator.scheme, "dt": rep.integrator.dt,
                              "n_steps": rep.integrator.n_steps}
    resolved["data"] = str(args.data)
    resolved["noise_inject"] = cfg.noise_sigma
    resolved["wall_clock"] = args.wall_clock
    _write_manifest(out, "fit", resolved, cfg.seed, artifacts)


def cmd_simulate(args) -> None:
    f = _load_model(args.model)
    X0 = _load_inits(args)
    spec = IntegratorSpec(args.scheme, args.dt, args.steps)
    if spec.n_steps < 1:
        raise UsageError("--steps must be at least 1")
    trajs = simulate_batch(f, X0, spec, args.noise, args.seed)
    out = _out_dir(args.out)
    write_trajectories_csv(trajs, out / "trajectories.csv")
    cfg = {"model": args.model, "n_inits": len(X0), "inits": X0.tolist(), "scheme": args.scheme, "dt": args.dt,
           "steps": args.steps, "noise": args.noise, "seed": args.seed}
    _write_manifest(out, "simulate", cfg, args.seed, ["trajectories.csv"])


def cmd_ftle(args) -> None:
    f = _load_model(args.model)
    if args.nx < 3 or args.ny < 3:
        raise UsageError("--nx and --ny must be at least 3")
    T = args.T
    if T is None:
        # one crossing of the data at unit speed
        T = data_diameter(load_cloud(args.data).points) if args.data else 1.0
    if not T > 0:
        raise UsageError(f"horizon must be positive, got {T}")
    spec = IntegratorSpec.for_horizon(T, args.dt, args.scheme)
    grid = ftle_field(f, tuple(args.bounds), args.nx, args.ny, spec)
    out = _out_dir(args.out)
    write_ftle_csv(grid, out / "ftle.csv")
    cfg = {"model": args.model, "bounds": list(args.bounds), "nx": args.nx, "ny": args.ny, "T": T, "data": args.data,
           "dt": args.dt, "scheme": args.scheme, "n_steps": spec.n_steps}
    _write_manifest(out, "ftle", cfg, None, ["ftle.csv"])


_PRC_KEYS = ("n_phases", "delta_a", "lambda_circle", "units", "periods", "warm_start_iterations",
             "warm_start_attraction", "target")


def _prc_settings(args) -> tuple[dict, dict]:
    """Split merged file+flag settings into (prc options, train-config dict)."""
    file_cfg = _read_config(args.config)
    prc = {"n_phases": DEFAULT_N_PHASES, "delta_a": DEFAULT_DELTA_A, "lambda_circle": DEFAULT_LAMBDA_CIRCLE,
           "units": "deg", "periods": RELAX_PERIODS, "warm_start_iterations": 500,
           "warm_start_attraction": WARM_START_ATTRACTION, "target": {}}
    prc.update({k: file_cfg.pop(k) for k in _PRC_KEYS if k in file_cfg})
    flags = {"n_phases": args.n_phases, "delta_a": args.delta_a, "units": args.units, "periods": args.periods,
             "lambda_circle": getattr(args, "lambda_circle", None),
             "warm_start_iterations": getattr(args, "warm_start", None),
             "warm_start_attraction": getattr(args, "attraction", None)}
    prc.update({k: v for k, v in flags.items() if v is not None})
    target = dict(prc["target"])
    for name in ("sigma_phi", "A1", "A2", "xi1", "xi2", "scale"):
        v = getattr(args, name)
        if v is not None:
            target[name] = v
    prc["target"] = target
    if prc["n_phases"] < 1:
        raise UsageError(f"--n-phases must be at least 1, got {prc['n_phases']}")
    if prc["units"] not in ("deg", "rad"):
        raise UsageError("--units must be deg or rad")
    if prc["periods"] < 1:
        raise UsageError("--periods must be at least 1")
    train = TrainConfig().to_dict()
    train.update(PRC_DEFAULTS)
    train.update(file_cfg)
    return prc, train


def cmd_prc(args) -> None:
    prc, train = _prc_settings(args)
    phases = phase_grid(prc["n_phases"])
    try:
        target = target_prc(phases, PRCParams(**prc["target"]))
    except TypeError as exc:
        raise UsageError(f"bad target parameters: {exc}") from exc
    out = _out_dir(args.out)
    artifacts = ["prc.csv"]
    if args.prc_command == "fit":
        flags = {"n_iterations": args.iterations, "seed": args.seed, "learning_rate": args.lr, "dt": args.dt}
        train.update({k: v for k, v in flags.items() if v is not None})
        cfg = TrainConfig.from_dict(train)
        relax = default_relax_spec(cfg.dt, periods=prc["periods"])
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "integrator": {"scheme": relax.scheme, "dt": relax.dt,
                                                                     "n_steps": relax.n_steps}})
        fh, w = _train_log_writer(out / "train_log.csv", ["iteration", "total", "mse", "circle", "wall_ms"])

        def callback(it, total, mse, circle, params, elapsed):
            w.writerow([it, repr(total), repr(mse), repr(circle), _wall(elapsed, args.wall_clock)])
            if it % 25 == 0:
                log.info("iter %d  mse %.4f  circle %.2e", it, mse, circle)

        try:
            rep = fit_prc(cfg, target, prc["delta_a"], prc["lambda_circle"], prc["units"],
                          prc["warm_start_iterations"], callback=callback,
                          warm_start_attraction=prc["warm_start_attraction"])
        finally:
            fh.close()
        save_checkpoint(rep.final_params, out / "model.json")
        artifacts += ["model.json", "train_log.csv"]
        f = VelocityField(rep.final_params, cfg.epsilon)
        resolved = {**cfg.to_dict(), **prc, "target": vars(PRCParams(**prc["target"])),
                    "wall_clock": args.wall_clock}
        seed = cfg.seed
    else:
        if args.model is None:
            raise UsageError("prc eval needs --model")
        f = _load_model(args.model)
        relax = default_relax_spec(args.dt or PRC_DEFAULTS["dt"], periods=prc["periods"])
        resolved = {**prc, "target": vars(PRCParams(**prc["target"])), "model": args.model, "dt": relax.dt}
        seed = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        sim = simulate_prc(f, phases, prc["delta_a"], relax, prc["units"])
    for wmsg in caught:
        log.warning("%s", wmsg.message)
    write_prc_csv(target, sim, out / "prc.csv")
    _write_manifest(out, f"prc {args.prc_command}", resolved, seed, artifacts)


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="principal-flow", description="Principal flows: fit, simulate, FTLE, PRC.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic point cloud")
    g.add_argument("shape", choices=SHAPES)
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit a principal flow to a point cloud")
    f.add_argument("--data", required=True, help="point-cloud CSV with header x,y")
    f.add_argument("--out", required=True)
    f.add_argument("--config", help="JSON file of TrainConfig fields; flags override it")
    f.add_argument("--iterations", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--n-trajectories", type=int)
    f.add_argument("--dt", type=float)
    f.add_argument("--steps", type=int, help="fixed rollout length (default: cover the data at unit speed)")
    f.add_argument("--scheme", choices=SCHEMES)
    f.add_argument("--init-mean", type=float, nargs=2, metavar=("X", "Y"))
    f.add_argument("--init-sigma", type=float)
    f.add_argument("--noise-inject", type=float, metavar="SIGMA", help="noise std added after every step")
    f.add_argument("--horizon-warmup", type=float)
    f.add_argument("--hidden", type=int, nargs="+", metavar="WIDTH", help="hidden layer widths")
    f.add_argument("--checkpoint-every", type=int, default=0, metavar="K")
    f.add_argument("--no-wall-clock", dest="wall_clock", action="store_false",
                   help="leave wall_ms empty so the log is byte-reproducible")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="integrate trajectories through a field")
    s.add_argument("--model", required=True, help="checkpoint path or analytic:<name>")
    s.add_argument("--inits", help="CSV of initial conditions with header x,y")
    s.add_argument("--init", type=float, nargs=2, action="append", metavar=("X", "Y"))
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--dt", type=float, default=0.05)
    s.add_argument("--scheme", choices=SCHEMES, default="rk4")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("ftle", help="finite-time Lyapunov exponents on a grid")
    t.add_argument("--model", required=True, help="checkpoint path or analytic:<name>")
    t.add_argument("--bounds", type=float, nargs=4, default=[-1.5, 1.5, -1.5, 1.5],
                   metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    t.add_argument("--nx", type=int, default=100)
    t.add_argument("--ny", type=int, default=100)
    t.add_argument("--T", type=float, help="horizon (default: diameter of --data, else 1)")
    t.add_argument("--data", help="point cloud whose diameter sets the default horizon")
    t.add_argument("--dt", type=float, default=0.05)
    t.add_argument("--scheme", choices=SCHEMES, default="rk4")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_ftle)

    p = sub.add_parser("prc", help="phase response curves")
    psub = p.add_subparsers(dest="prc_command", required=True)
    for name in ("fit", "eval"):
        q = psub.add_parser(name)
        q.add_argument("--out", required=True)
        q.add_argument("--config", help="JSON file; PRC keys plus TrainConfig fields")
        q.add_argument("--n-phases", type=int)
        q.add_argument("--delta-a", type=float)
        q.add_argument("--units", choices=("deg", "rad"))
        q.add_argument("--periods", type=int, help="relaxation horizon in periods of 2*pi")
        q.add_argument("--dt", type=float)
        for par in ("sigma_phi", "A1", "A2", "xi1", "xi2", "scale"):
            q.add_argument(f"--{par.replace('_', '-')}", dest=par, type=float)
        if name == "fit":
            q.add_argument("--iterations", type=int)
            q.add_argument("--seed", type=int)
            q.add_argument("--lr", type=float)
            q.add_argument("--lambda-circle", type=float)
            q.add_argument("--warm-start", type=int, metavar="ITERS")
            q.add_argument("--attraction", type=float, help="radial pull of the warm-start cycle")
            q.add_argument("--no-wall-clock", dest="wall_clock", action="store_false")
        else:
            q.add_argument("--model", required=True, help="checkpoint path or analytic:<name>")
        q.set_defaults(func=cmd_prc)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (UsageError, ConfigurationError, ContractError) as exc:
        ap.print_usage(sys.stderr)
        print(f"{ap.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, PrincipalFlowError) as exc:
        print(f"{ap.prog}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
