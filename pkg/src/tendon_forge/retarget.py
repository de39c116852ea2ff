"""Marker-trajectory retargeting onto a :class:`LimbModel`.

Alternates damped-least-squares IK (scale held fixed) with a uniform scale
fit (joint angles held fixed). The planar model lives in the x-y plane with
y up; model markers are lifted to 3D with z = 0.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .limbdyn import LimbModel

UP = 1  # vertical axis index
MAX_HALVINGS = 20


class RetargetError(ValueError):
    pass


@dataclass
class MocapClip:
    frame_rate: float
    frames: list  # [{marker name: (3,) array}]

    def __post_init__(self):
        if not self.frames:
            raise RetargetError("clip has no frames")
        if not self.frame_rate > 0:
            raise RetargetError("frame rate must be positive")
        frames = []
        for fr in self.frames:
            f = {k: np.asarray(v, dtype=float).reshape(3) for k, v in fr.items()}
            if not all(np.all(np.isfinite(v)) for v in f.values()):
                raise RetargetError("non-finite marker position")
            frames.append(f)
        self.frames = frames

    def __len__(self):
        return len(self.frames)

    def scaled(self, k: float) -> "MocapClip":
        return MocapClip(self.frame_rate, [{n: k * p for n, p in fr.items()} for fr in self.frames])

    @property
    def marker_names(self) -> list[str]:
        names = []
        for fr in self.frames:
            names.extend(n for n in fr if n not in names)
        return names


@dataclass
class RetargetResult:
    q: np.ndarray  # (F, n)
    scale: float
    residuals: np.ndarray  # (F,) RMS marker distance (m)
    log: list = field(default_factory=list)
    root_offset: np.ndarray | None = None  # (F,) vertical root translation (m)
    converged: bool = False

    def __post_init__(self):
        if self.root_offset is None:
            self.root_offset = np.zeros(len(self.q))

    def marker_positions(self, model: LimbModel) -> np.ndarray:
        """Model marker positions (F, M, 3) including the root offset."""
        p = lift(model.marker_positions(self.q))
        p[..., UP] += self.root_offset[:, None]
        return p


def lift(p2) -> np.ndarray:
    p2 = np.asarray(p2, dtype=float)
    return np.concatenate([p2, np.zeros(p2.shape[:-1] + (1,))], axis=-1)


def _marker_index(model: LimbModel, names) -> list[int]:
    lookup = {n: i for i, n in enumerate(model.marker_names)}
    try:
        return [lookup[n] for n in names]
    except KeyError as exc:
        raise RetargetError(f"unknown marker {exc.args[0]!r}") from None


def _frame_arrays(model: LimbModel, frame: dict):
    names = [n for n in model.marker_names if n in frame]
    return _marker_index(model, names), np.array([frame[n] for n in names]).reshape(-1, 3)


def _ik(model: LimbModel, idx, targets, q, damping, iterations, history=None):
    q = np.clip(np.array(q, dtype=float), model.lower, model.upper)
    n = model.n_links
    lam2 = damping * damping
    it = 0
    for it in range(1, iterations + 1):
        p = lift(model.marker_positions(q)[idx])
        e = (targets - p).reshape(-1)
        err = float(np.linalg.norm(e))
        if history is not None:
            history.append(err)
        if err < 1e-6:
            break
        J2 = model.marker_jacobians(q)[idx]  # (k, 2, n)
        J = np.concatenate([J2, np.zeros((len(idx), 1, n))], axis=1).reshape(-1, n)
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(len(e)), e)
        # halve steps that overshoot (large errors near the reach boundary)
        for _ in range(MAX_HALVINGS):
            q_new = np.clip(q + dq, model.lower, model.upper)
            if np.linalg.norm(targets - lift(model.marker_positions(q_new)[idx])) <= err:
                break
            dq = 0.5 * dq
        else:
            q_new = q
        step = float(np.linalg.norm(q_new - q))
        q = q_new
        if step < 1e-9:
            break
    return q, it


def ik_solve(model: LimbModel, targets: dict, q_init=None, damping: float = 0.05,
             iterations: int = 100, history: list | None = None) -> np.ndarray:
    """Damped least-squares IK on marker positions.

    ``targets`` maps marker name to a 2D or 3D position. The update is
    ``dq = J^T (J J^T + damping^2 I)^-1 e``; after each update q is clamped to
    the joint limits, and a step that would raise the error is halved
    until it does not. ``history`` (if given) collects the error norm at the
    start of every iteration.
    """
    if damping <= 0:
        raise RetargetError("damping must be positive")
    names = list(targets)
    idx = _marker_index(model, names)
    tg = np.array([np.append(np.asarray(targets[n], dtype=float), [0.0])[:3] for n in names])
    q0 = model.rest_pose if q_init is None else q_init
    return _ik(model, idx, tg, q0, damping, iterations, history)[0]


def _centered(model: LimbModel, q, clip: MocapClip):
    """Per-frame centred mocap and model clouds, stacked over frames."""
    xs, ys = [], []
    model_pts = lift(model.marker_positions(np.asarray(q)))
    for f, frame in enumerate(clip.frames):
        idx, x = _frame_arrays(model, frame)
        if not idx:
            continue
        y = model_pts[f, idx]
        xs.append(x - x.mean(axis=0))
        ys.append(y - y.mean(axis=0))
    if not xs:
        raise RetargetError("degenerate clip")
    return np.vstack(xs), np.vstack(ys)


def fit_scale(model: LimbModel, q, clip: MocapClip, forward_only: bool = False) -> float:
    """Uniform scale s minimising sum ||s x_mocap - x_model(q)||^2.

    Clouds are centred per frame. The forward fit regresses the model onto
    scaled mocap, the reverse fit regresses mocap onto the model; the
    symmetric estimate is their geometric mean ``sqrt(s_fwd / s_rev)``.
    """
    x, y = _centered(model, q, clip)
    sxx = float(np.sum(x * x))
    syy = float(np.sum(y * y))
    sxy = float(np.sum(x * y))
    if sxx < 1e-300:
        raise RetargetError("degenerate clip")
    if forward_only:
        return sxy / sxx
    if syy < 1e-300 or sxy <= 0:
        raise RetargetError("degenerate clip")
    s_fwd = sxy / sxx
    s_rev = sxy / syy
    return math.sqrt(s_fwd / s_rev)


def frame_errors(model: LimbModel, q, clip: MocapClip, scale: float) -> list[np.ndarray]:
    model_pts = lift(model.marker_positions(np.asarray(q)))
    out = []
    for f, frame in enumerate(clip.frames):
        idx, x = _frame_arrays(model, frame)
        out.append(np.linalg.norm(scale * x - model_pts[f, idx], axis=-1))
    return out


def total_sq_residual(model, q, clip, scale) -> float:
    return float(sum(np.sum(e * e) for e in frame_errors(model, q, clip, scale)))


def _solve_frames(model, clip, scale, q_prev, damping, iterations, warm_start, threads):
    F = len(clip)
    out = np.empty_like(q_prev)

    def solve(f, q_init):
        idx, x = _frame_arrays(model, clip.frames[f])
        if not idx:
            return q_init
        return _ik(model, idx, scale * x, q_init, damping, iterations)[0]

    if warm_start == "previous-frame":
        q = q_prev[0]
        for f in range(F):
            q = solve(f, q)
            out[f] = q
        return out
    if warm_start != "previous-iteration":
        raise RetargetError(f"unknown warm-start policy {warm_start!r}")
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            res = list(pool.map(solve, range(F), q_prev))
        return np.array(res)
    for f in range(F):
        out[f] = solve(f, q_prev[f])
    return out


def retarget(model: LimbModel, clip: MocapClip, tolerance: float = 1e-6, max_outer: int = 20,
             damping: float = 0.05, ik_iterations: int = 100, forward_only: bool = False,
             warm_start: str = "previous-frame", threads: int | None = None,
             initial_scale: float = 1.0, clearance: bool = True) -> RetargetResult:
    """Alternate per-frame IK and scale fitting until the scale settles.

    A candidate (q, s) pair is accepted only if the total squared marker
    residual does not increase; a rejected candidate ends the loop.
    ``warm_start="previous-iteration"`` makes frames independent within a
    pass, which is what allows ``threads > 1``.
    """
    F = len(clip)
    q = np.tile(model.rest_pose, (F, 1))
    s = float(initial_scale)
    q = _solve_frames(model, clip, s, q, damping, ik_iterations, warm_start, threads)
    R = total_sq_residual(model, q, clip, s)
    log = [{"iteration": 0, "scale": s, "residual": R}]
    converged = False
    for it in range(1, max_outer + 1):
        s_new = fit_scale(model, q, clip, forward_only)
        q_new = _solve_frames(model, clip, s_new, q, damping, ik_iterations, warm_start, threads)
        R_new = total_sq_residual(model, q_new, clip, s_new)
        if R_new > R:
            log.append({"iteration": it, "scale": s_new, "residual": R_new, "rejected": True})
            converged = True
            break
        delta = abs(s_new - s)
        q, s, R = q_new, s_new, R_new
        log.append({"iteration": it, "scale": s, "residual": R})
        if delta < tolerance:
            converged = True
            break
    errs = frame_errors(model, q, clip, s)
    resid = np.array([math.sqrt(np.mean(e * e)) if len(e) else 0.0 for e in errs])
    result = RetargetResult(q, s, resid, log, converged=converged)
    return ground_clearance(result, model) if clearance else result


def ground_clearance(result: RetargetResult, model: LimbModel) -> RetargetResult:
    """Raise the root per frame so no model marker sits below height 0."""
    p = result.marker_positions(model)
    lowest = p[..., UP].min(axis=-1)
    lift_by = np.maximum(0.0, -lowest)
    return replace(result, root_offset=result.root_offset + lift_by)


# -- I/O -------------------------------------------------------------------------


def load_clip_csv(path, frame_rate: float = 100.0) -> MocapClip:
    """Rows ``frame, marker, x, y, z``; absent rows are missing markers."""
    frames: dict[int, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            f = int(row["frame"])
            frames.setdefault(f, {})[row["marker"]] = [float(row["x"]), float(row["y"]), float(row["z"])]
    if not frames:
        raise RetargetError("clip has no frames")
    n = max(frames) + 1
    return MocapClip(frame_rate, [frames.get(i, {}) for i in range(n)])


def save_clip_csv(clip: MocapClip, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "marker", "x", "y", "z"])
        for f, frame in enumerate(clip.frames):
            for name, p in frame.items():
                w.writerow([f, name] + [f"{v:.17g}" for v in p])


def load_clip_json(path) -> MocapClip:
    doc = json.loads(Path(path).read_text())
    return MocapClip(float(doc["frame_rate"]), doc["frames"])


def save_clip_json(clip: MocapClip, path) -> None:
    doc = {
        "frame_rate": clip.frame_rate,
        "frames": [{n: [float(v) for v in p] for n, p in fr.items()} for fr in clip.frames],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_clip(path, frame_rate: float = 100.0) -> MocapClip:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return load_clip_json(path)
    return load_clip_csv(path, frame_rate)


def clip_from_model(model: LimbModel, q_traj, scale: float = 1.0, frame_rate: float = 100.0,
                    noise: float = 0.0, rng=None) -> MocapClip:
    """Synthetic clip whose markers, multiplied by ``scale``, reproduce the model."""
    p = lift(model.marker_positions(np.asarray(q_traj, dtype=float))) / scale
    if noise:
        rng = rng if rng is not None else np.random.default_rng(0)
        p = p + rng.normal(scale=noise, size=p.shape)
    frames = [{n: p[f, i] for i, n in enumerate(model.marker_names)} for f in range(len(p))]
    return MocapClip(frame_rate, frames)
