"""Deterministic generators for the bundled demo inputs.

Each generator is the oracle for the values the CLI tests check: the demo
reference is a forward simulation of a known excitation sequence, and the
demo clip is the model's own marker trajectory divided by ``CLIP_SCALE``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .geometry import TriMesh, make_box, make_cylinder, save_obj
from .limbdyn import LimbModel, load_demo_model, save_model
from .muscle import force_length
from .planner import reference_from_states, reference_to_dict, simulate
from .retarget import clip_from_model, save_clip_csv
from .tables import write_markers

DT = 1e-3
HORIZON = 300
PERIOD = 0.3
EXCITATION_AMPLITUDE = 0.25
# antagonists in anti-phase: hip flexor/extensor, vastus/biceps, gastroc/tibialis
EXCITATION_PHASE = np.array([0.0, np.pi, 0.5 * np.pi, 1.5 * np.pi, np.pi, 0.0])
CLIP_SCALE = 1.25
CLIP_FRAMES = 40
CLIP_RATE = 100.0


def holding_activations(model: LimbModel, q=None, prior: float = 0.1, weight: float = 1e-2) -> np.ndarray:
    """Non-negative activations that roughly cancel gravity at ``q``."""
    q = model.rest_pose if q is None else np.asarray(q, dtype=float)
    zeros_m = np.zeros(model.n_muscles)
    qdd, _ = model.forward_dynamics(q, np.zeros(model.n_links), zeros_m, zeros_m)
    tau_passive = model.mass_matrix(q) @ qdd
    L, dL = model.muscle_geometry(q)
    per_unit = -(dL * (model._mp.f0 * force_length(L / model.rest_lengths))[:, None]).T
    A = np.vstack([per_unit, np.sqrt(weight) * np.eye(model.n_muscles)])
    b = np.concatenate([-tau_passive, np.full(model.n_muscles, np.sqrt(weight) * prior)])
    a, _ = nnls(A, b)
    return np.clip(a, 0.0, 1.0)


def reference_excitations(model: LimbModel, horizon: int = HORIZON, dt: float = DT) -> tuple[np.ndarray, np.ndarray]:
    """Initial activations and the known excitation sequence (horizon, m)."""
    a0 = holding_activations(model)
    t = np.arange(horizon) * dt
    phase = EXCITATION_PHASE[: model.n_muscles]
    U = a0 + EXCITATION_AMPLITUDE * np.sin(2 * np.pi * t[:, None] / PERIOD + phase)
    return a0, np.clip(U, 0.0, 1.0)


def demo_reference(model: LimbModel | None = None, horizon: int = HORIZON, dt: float = DT, mode: str = "smoothed"):
    """(x0, controls, states, ref_pos, ref_vel) for the demo tracking task."""
    model = model or load_demo_model()
    a0, U = reference_excitations(model, horizon, dt)
    x0 = np.concatenate([model.rest_pose, np.zeros(model.n_links), a0])
    X = simulate(model, x0, U, dt, mode)
    pos, vel = reference_from_states(model, X)
    return x0, U, X, pos, vel


def demo_joint_trajectory(model: LimbModel, frames: int = CLIP_FRAMES) -> np.ndarray:
    t = np.linspace(0.0, 1.0, frames)
    q = model.rest_pose + np.column_stack([
        0.3 * np.sin(2 * np.pi * t),
        0.4 * np.sin(2 * np.pi * t + 1.0) - 0.2,
        0.3 * np.sin(2 * np.pi * t + 2.0),
    ])[:, : model.n_links]
    return np.clip(q, model.lower + 0.05, model.upper - 0.05)


def demo_clip(model: LimbModel | None = None, frames: int = CLIP_FRAMES):
    model = model or load_demo_model()
    q = demo_joint_trajectory(model, frames)
    return q, clip_from_model(model, q, CLIP_SCALE, CLIP_RATE)


def cylinder_fixture() -> tuple[TriMesh, list[TriMesh]]:
    """A 0.3 m straight muscle along +z beside two box bones."""
    muscle = make_cylinder(radius=0.02, length=0.3, n_around=24, n_rings=31, name="cylinder_muscle")
    femur = make_box((0.04, -0.01, -0.01), (0.06, 0.01, 0.16), name="femur")
    tibia = make_box((0.04, -0.01, 0.17), (0.06, 0.01, 0.31), name="tibia")
    return muscle, [femur, tibia]


def offset_marker_pair(steps: int = 10):
    """Two marker tracks where one marker is displaced by (3, 4)."""
    t = np.arange(steps) * 0.01
    ref = np.stack([np.column_stack([t, 0 * t]), np.column_stack([t, 1 + 0 * t])], axis=1)
    sim = ref.copy()
    sim[:, 0] += (3.0, 4.0)
    return t, ["a", "b"], sim, ref


def write_demo_inputs(out, horizon: int = HORIZON) -> dict:
    """Write every bundled input into ``out`` and return their paths."""
    out = Path(out)
    (out / "meshes" / "bones").mkdir(parents=True, exist_ok=True)
    model = load_demo_model()
    save_model(model, out / "demo_limb.json")

    x0, U, X, pos, vel = demo_reference(model, horizon)
    (out / "reference.json").write_text(json.dumps(reference_to_dict(model, DT, x0, pos, vel, U)) + "\n")
    problem = {
        "model_path": "demo_limb.json",
        "reference_path": "reference.json",
        "horizon": horizon,
        "dt": DT,
        "terms": [
            {"residual": "joint_velocity", "norm": "quadratic", "weight": 0.01},
            {"residual": "control", "norm": "cosh", "p": 0.3, "weight": 0.1},
            {"residual": "marker_pos", "norm": "smooth_abs", "p": 0.1, "weight": 1.0},
            {"residual": "marker_vel", "norm": "smooth_abs", "p": 0.3, "weight": 0.1},
        ],
    }
    (out / "problem.json").write_text(json.dumps(problem, indent=2) + "\n")
    write_markers(out / "reference_markers.csv", np.arange(horizon + 1) * DT, model.marker_names, pos)

    _, clip = demo_clip(model)
    save_clip_csv(clip, out / "clip.csv")

    muscle, bones = cylinder_fixture()
    save_obj(muscle, out / "meshes" / f"{muscle.name}.obj")
    for b in bones:
        save_obj(b, out / "meshes" / "bones" / f"{b.name}.obj")

    t, names, sim, ref = offset_marker_pair()
    write_markers(out / "offset_sim.csv", t, names, sim)
    write_markers(out / "offset_ref.csv", t, names, ref)
    return {
        "model": out / "demo_limb.json",
        "problem": out / "problem.json",
        "reference_markers": out / "reference_markers.csv",
        "clip": out / "clip.csv",
        "muscle": out / "meshes" / f"{muscle.name}.obj",
        "bones": out / "meshes" / "bones",
        "offset_sim": out / "offset_sim.csv",
        "offset_ref": out / "offset_ref.csv",
    }
