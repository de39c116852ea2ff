"""``tendon-forge`` command line: extract-loa, retarget, track, metrics, demo.

Every subcommand accepts ``--config FILE`` (JSON object keyed by option
name); explicit flags override config values. Exit codes: 0 success,
2 input error, 3 solver divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import GeometryError, build_bone_index, load_mesh, principal_axis
from .limbdyn import DivergenceError, ModelError, load_model
from .loa import LoaConfig, LoaError, extract_loa, save_tendon
from .planner import (
    ILQGOptions, PlannerError, RESIDUALS, ilqg_solve, kinematic_error, load_problem, receding_solve,
)
from .retarget import RetargetError, load_clip, retarget
from .tables import read_markers, write_csv, write_markers

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
THREADS_ENV = "TENDON_FORGE_THREADS"
MESH_SUFFIXES = (".obj", ".stl")

INPUT_ERRORS = (OSError, ValueError, KeyError, TypeError)


class InputError(Exception):
    pass


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_INPUT


def resolve_threads(value) -> int:
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if value < 1:
        raise InputError("thread count must be >= 1")
    return value


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


# -- extract-loa ------------------------------------------------------------------


def _bone_paths(args) -> list[Path]:
    paths = [_existing(p, "bone mesh") for p in args.bone or []]
    if args.bones_dir:
        d = _existing(args.bones_dir, "bone directory")
        paths += sorted(p for p in d.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
    if not paths:
        raise InputError("no bone meshes given (use --bone or --bones-dir)")
    return paths


def cmd_extract_loa(args) -> int:
    muscles = [_existing(p, "muscle mesh") for p in args.muscle]
    bones = [load_mesh(p) for p in _bone_paths(args)]
    index = build_bone_index(bones)
    cfg = LoaConfig(args.max_dist, args.min_dist_new_bone, args.slices_per_meter)
    out = _out_dir(args.out)

    def run(path):
        mesh = load_mesh(path)
        axis = principal_axis(mesh) if args.axis is None else np.asarray(args.axis, dtype=float)
        return extract_loa(index, mesh, axis, cfg)

    with ThreadPoolExecutor(max_workers=resolve_threads(args.threads)) as pool:
        paths = list(pool.map(run, muscles))
    for tp in paths:
        save_tendon(tp, out / f"{tp.muscle_name}.tendon.json")
        print(f"{tp.muscle_name}: {len(tp.sites)} sites ({tp.metadata['n_slices']} slices)")
    return EXIT_OK


# -- retarget ---------------------------------------------------------------------


def cmd_retarget(args) -> int:
    model = load_model(_existing(args.model, "model"))
    clip = load_clip(_existing(args.clip, "clip"), args.frame_rate)
    warm = args.warm_start or ("previous-iteration" if args.parallel else "previous-frame")
    threads = resolve_threads(args.threads) if args.parallel else 1
    res = retarget(model, clip, tolerance=args.tolerance, max_outer=args.max_outer, damping=args.damping,
                   forward_only=args.forward_only, warm_start=warm, threads=threads)
    out = _out_dir(args.out)
    n = model.n_links
    write_csv(out / "joint_angles.csv", ["frame"] + [f"q{i}" for i in range(n)] + ["root_offset"],
              ([f] + list(q) + [r] for f, (q, r) in enumerate(zip(res.q, res.root_offset))))
    meta = {
        "scale": res.scale,
        "residuals": [float(r) for r in res.residuals],
        "iterations": len(res.log) - 1,
        "converged": res.converged,
        "warm_start": warm,
        "log": res.log,
    }
    (out / "retarget.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"scale {res.scale:.10g}  mean residual {np.mean(res.residuals):.3e} m  "
          f"outer iterations {meta['iterations']}")
    return EXIT_OK


# -- track ------------------------------------------------------------------------


def _weights(args):
    if args.weights is None:
        return None
    if isinstance(args.weights, dict):
        return args.weights
    w = list(args.weights)
    if len(w) != len(RESIDUALS):
        raise InputError(f"--weights takes {len(RESIDUALS)} values")
    return dict(zip(RESIDUALS, map(float, w)))


def cmd_track(args) -> int:
    try:
        problem = load_problem(_existing(args.problem, "problem"), args.mode, args.horizon, args.dt, _weights(args))
    except PlannerError as exc:
        raise InputError(str(exc)) from None
    opts = ILQGOptions(max_iter=args.max_iter)
    try:
        if args.receding:
            traj = receding_solve(problem, args.receding, options=opts)
        else:
            traj = ilqg_solve(problem, options=opts)
    except (PlannerError, DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if not np.all(np.isfinite(traj.states)) or not np.isfinite(traj.cost):
        print("error: solver diverged: non-finite trajectory", file=sys.stderr)
        return EXIT_DIVERGED

    model = problem.model
    out = _out_dir(args.out)
    N = problem.horizon
    t = np.arange(N + 1) * problem.dt
    q, qd, a = model.split(traj.states)
    n, m = model.n_links, model.n_muscles
    header = (["t"] + [f"q{i}" for i in range(n)] + [f"qdot{i}" for i in range(n)]
              + [f"a{j}" for j in range(m)] + [f"u{j}" for j in range(m)])
    u_rows = np.vstack([traj.controls, np.full((1, m), np.nan)])
    write_csv(out / "trajectory.csv", header,
              (np.concatenate([[t[k]], q[k], qd[k], a[k], u_rows[k]]) for k in range(N + 1)))

    write_csv(out / "cost.csv", ["iteration", "cost"], enumerate(traj.cost_log))
    terms = problem.term_costs(traj.states, traj.controls)
    names = list(terms)
    write_csv(out / "cost_terms.csv", ["step", "t"] + names + ["total"],
              ([k, t[k]] + [terms[nm][k] for nm in names] + [sum(terms[nm][k] for nm in names)]
               for k in range(N + 1)))

    sim = model.marker_positions(q)
    err = kinematic_error(sim, problem.ref_pos)
    write_csv(out / "kinematic_error.csv", ["step", "t", "error"], ([k, t[k], e] for k, e in enumerate(err)))
    write_markers(out / "markers.csv", t, model.marker_names, sim)
    write_markers(out / "reference_markers.csv", t, model.marker_names, problem.ref_pos)

    frac = float(np.mean(err < 0.05 * model.total_length))
    print(f"status {traj.status}  iterations {traj.iterations}  final cost {traj.cost:.10g}")
    print(f"kinematic error mean {err.mean():.4e} m  max {err.max():.4e} m  "
          f"steps under 5% of limb length {100 * frac:.1f}%")
    return EXIT_OK


# -- metrics ----------------------------------------------------------------------


def cmd_metrics(args) -> int:
    t_sim, names_sim, sim = read_markers(_existing(args.sim, "simulated marker CSV"))
    t_ref, names_ref, ref = read_markers(_existing(args.ref, "reference marker CSV"))
    if set(names_sim) != set(names_ref):
        raise InputError(f"marker sets differ: {sorted(set(names_sim) ^ set(names_ref))}")
    if len(t_sim) != len(t_ref) or sim.shape[-1] != ref.shape[-1]:
        raise InputError("marker CSVs differ in length or dimension")
    ref = ref[:, [names_ref.index(n) for n in names_sim]]
    err = kinematic_error(sim, ref)
    write_csv(args.out, ["step", "t", "error"], ([k, t, e] for k, (t, e) in enumerate(zip(t_sim, err))))
    print(f"kinematic error mean {err.mean():.6g}  max {err.max():.6g}")
    return EXIT_OK


# -- demo -------------------------------------------------------------------------


def cmd_demo(args) -> int:
    from .fixtures import HORIZON, write_demo_inputs

    out = _out_dir(args.out)
    horizon = args.horizon or HORIZON
    paths = write_demo_inputs(out / "inputs", horizon)
    print(f"fixtures written to {out / 'inputs'}")
    threads = [] if args.threads is None else ["--threads", str(args.threads)]
    steps = [
        ["extract-loa", "--muscle", str(paths["muscle"]), "--bones-dir", str(paths["bones"]),
         "--out", str(out / "loa")] + threads,
        ["retarget", "--model", str(paths["model"]), "--clip", str(paths["clip"]),
         "--out", str(out / "retarget")] + threads,
        ["track", "--problem", str(paths["problem"]), "--max-iter", str(args.max_iter),
         "--out", str(out / "track")],
        ["metrics", "--sim", str(out / "track" / "markers.csv"), "--ref", str(paths["reference_markers"]),
         "--out", str(out / "track" / "metrics.csv")],
    ]
    for argv in steps:
        print(f"$ tendon-forge {argv[0]}")
        code = main(argv)
        if code:
            return code
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="tendon-forge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of option defaults; flags win")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("extract-loa", cmd_extract_loa, "extract tendon paths from muscle meshes")
    p.add_argument("--muscle", action="append", required=False, default=None, help="muscle mesh (repeatable)")
    p.add_argument("--bone", action="append", help="bone mesh (repeatable)")
    p.add_argument("--bones-dir", help="directory of bone meshes (.obj/.stl)")
    p.add_argument("--axis", type=float, nargs=3, help="slicing axis (default: principal axis)")
    p.add_argument("--max-dist", type=float, default=LoaConfig.max_dist)
    p.add_argument("--min-dist-new-bone", type=float, default=LoaConfig.min_dist_new_bone)
    p.add_argument("--slices-per-meter", type=float, default=LoaConfig.n_slices_per_meter)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", default="loa_out")

    p = add("retarget", cmd_retarget, "fit joint angles and scale to a marker clip")
    p.add_argument("--model")
    p.add_argument("--clip")
    p.add_argument("--frame-rate", type=float, default=100.0, help="frame rate for CSV clips")
    p.add_argument("--tolerance", type=float, default=1e-6, help="stop when |delta scale| falls below")
    p.add_argument("--max-outer", type=int, default=20)
    p.add_argument("--damping", type=float, default=0.05)
    p.add_argument("--forward-only", action="store_true", help="one-sided scale fit")
    p.add_argument("--parallel", action="store_true", help="solve frames independently on worker threads")
    p.add_argument("--warm-start", choices=("previous-frame", "previous-iteration"))
    p.add_argument("--threads", type=int)
    p.add_argument("--out", default="retarget_out")

    p = add("track", cmd_track, "track a reference with iLQG")
    p.add_argument("--problem")
    p.add_argument("--mode", choices=("smoothed", "switched"))
    p.add_argument("--horizon", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--weights", type=float, nargs=len(RESIDUALS), metavar="W",
                   help="weights for " + ", ".join(RESIDUALS))
    p.add_argument("--max-iter", type=int, default=ILQGOptions.max_iter)
    p.add_argument("--receding", type=int, default=0, metavar="N", help="re-plan every N steps")
    p.add_argument("--out", default="track_out")

    p = add("metrics", cmd_metrics, "per-step kinematic error between two marker CSVs")
    p.add_argument("--sim")
    p.add_argument("--ref")
    p.add_argument("--out", default="kinematic_error.csv")

    p = add("demo", cmd_demo, "write bundled fixtures and run the whole pipeline")
    p.add_argument("--out", default="demo_out")
    p.add_argument("--horizon", type=int)
    p.add_argument("--max-iter", type=int, default=ILQGOptions.max_iter)
    p.add_argument("--threads", type=int)
    return parser, subs


REQUIRED = {
    "extract-loa": ("muscle",),
    "retarget": ("model", "clip"),
    "track": ("problem",),
    "metrics": ("sim", "ref"),
}


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise InputError("config must be a JSON object")
        sp = subs[args.command]
        known = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise InputError(f"unknown config keys: {unknown}")
        if isinstance(cfg.get("muscle"), str):
            cfg["muscle"] = [cfg["muscle"]]
        if isinstance(cfg.get("bone"), str):
            cfg["bone"] = [cfg["bone"]]
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED.get(args.command, ()) if not getattr(args, k)]
    if missing:
        raise InputError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except InputError as exc:
        return _fail(str(exc))
    except (GeometryError, LoaError, ModelError, RetargetError) as exc:
        return _fail(str(exc))
    except INPUT_ERRORS as exc:
        return _fail(f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
