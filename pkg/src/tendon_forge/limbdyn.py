"""Planar muscle-actuated linkage.

Joint angles are relative; link ``i`` points along the absolute angle
``theta_i = q_0 + ... + q_i`` measured counter-clockwise from +x, and gravity
acts along -y. Attachment and marker sites are given in link-local frames
(x along the link, y to its left); link id -1 is the fixed base frame.

Every kinematic and dynamic function broadcasts over leading axes of
``q``/``qdot``/``act``/``u`` so whole trajectories (or batches of finite-
difference perturbations) are evaluated in one call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .muscle import MODES, MuscleParams, estimate_f0, flv, sigmoid

DEFAULT_DAMPING = 0.1
DEFAULT_LIMIT_STIFFNESS = 1e3
BASE = -1


class ModelError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class MuscleSpec:
    name: str
    params: MuscleParams
    sites: tuple  # ((link id, (x, y)), ...)


@dataclass(frozen=True)
class Marker:
    name: str
    link: int
    offset: tuple


@dataclass(frozen=True)
class LimbModel:
    lengths: np.ndarray
    masses: np.ndarray
    inertias: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    muscles: tuple = ()
    markers: tuple = ()
    com: np.ndarray | None = None
    rest_pose: np.ndarray | None = None
    base: np.ndarray = field(default_factory=lambda: np.zeros(2))
    gravity: float = 9.81
    damping: float = DEFAULT_DAMPING
    limit_stiffness: float = DEFAULT_LIMIT_STIFFNESS
    activation_mode: str = "smoothed"

    def __post_init__(self):
        arr = lambda x: np.array(x, dtype=float).reshape(-1)
        n = len(arr(self.lengths))
        for name in ("lengths", "masses", "inertias", "lower", "upper"):
            v = arr(getattr(self, name))
            if len(v) != n:
                raise ModelError(f"{name} must have one entry per link")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "com", 0.5 * self.lengths if self.com is None else arr(self.com))
        object.__setattr__(self, "rest_pose", np.zeros(n) if self.rest_pose is None else arr(self.rest_pose))
        object.__setattr__(self, "base", arr(self.base))
        object.__setattr__(self, "muscles", tuple(self.muscles))
        object.__setattr__(self, "markers", tuple(self.markers))
        if np.any(self.masses <= 0) or np.any(self.inertias < 0):
            raise ModelError("masses must be positive and inertias non-negative")
        if np.any(self.lower >= self.upper):
            raise ModelError("joint limits need lower < upper")
        if self.activation_mode not in MODES:
            raise ModelError(f"unknown activation mode {self.activation_mode!r}")
        for m in self.muscles:
            links = {s[0] for s in m.sites}
            if len(m.sites) < 2 or len(links) < 2:
                raise ModelError(f"muscle {m.name} must span at least one joint")
            if any(not BASE <= k < n for k in links):
                raise ModelError(f"muscle {m.name} references an unknown link")
        for mk in self.markers:
            if not BASE <= mk.link < n:
                raise ModelError(f"marker {mk.name} references an unknown link")
        # cached per-muscle constants
        p = [m.params for m in self.muscles]
        object.__setattr__(self, "_mp", SimpleNamespace(
            f0=np.array([x.f0 for x in p]),
            v_max=np.array([x.v_max for x in p]),
            tau_a=np.array([x.tau_a for x in p]),
            tau_d=np.array([x.tau_d for x in p]),
            tau_smooth=np.array([x.tau_smooth for x in p]),
        ))
        if self.muscles:
            object.__setattr__(self, "_rest_len", np.atleast_1d(self.muscle_lengths(self.rest_pose)))
        else:
            object.__setattr__(self, "_rest_len", np.zeros(0))

    # -- sizes --------------------------------------------------------------

    @property
    def n_links(self) -> int:
        return len(self.lengths)

    @property
    def n_muscles(self) -> int:
        return len(self.muscles)

    @property
    def nx(self) -> int:
        return 2 * self.n_links + self.n_muscles

    @property
    def marker_names(self) -> list[str]:
        return [m.name for m in self.markers]

    @property
    def total_length(self) -> float:
        return float(self.lengths.sum())

    @property
    def rest_lengths(self) -> np.ndarray:
        return self._rest_len

    def with_mode(self, mode: str) -> "LimbModel":
        return replace(self, activation_mode=mode)

    # -- kinematics ---------------------------------------------------------

    def joint_origins(self, q) -> tuple[np.ndarray, np.ndarray]:
        """Absolute link angles (..., n) and joint origins (..., n+1, 2)."""
        q = np.asarray(q, dtype=float)
        theta = np.cumsum(q, axis=-1)
        steps = self.lengths[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        origins = np.concatenate(
            [np.broadcast_to(self.base, q.shape[:-1] + (1, 2)), self.base + np.cumsum(steps, axis=-2)],
            axis=-2,
        )
        return theta, origins

    def site_position(self, theta, origins, link: int, offset) -> np.ndarray:
        c = np.asarray(offset, dtype=float)
        if link == BASE:
            return np.broadcast_to(self.base + c, theta.shape[:-1] + (2,))
        ct, st = np.cos(theta[..., link]), np.sin(theta[..., link])
        rot = np.stack([ct * c[0] - st * c[1], st * c[0] + ct * c[1]], axis=-1)
        return origins[..., link, :] + rot

    def site_jacobian(self, origins, link: int, p) -> np.ndarray:
        """d p / d q as (..., 2, n): column j is perp(p - o_j) for j <= link."""
        n = self.n_links
        J = np.zeros(p.shape[:-1] + (2, n))
        if link == BASE:
            return J
        r = p[..., None, :] - origins[..., : link + 1, :]
        J[..., 0, : link + 1] = -r[..., 1]
        J[..., 1, : link + 1] = r[..., 0]
        return J

    # -- muscle geometry ------------------------------------------------------

    def muscle_geometry(self, q) -> tuple[np.ndarray, np.ndarray]:
        """Muscle lengths (..., m) and dL/dq (..., m, n)."""
        theta, origins = self.joint_origins(q)
        lead = theta.shape[:-1]
        L = np.zeros(lead + (self.n_muscles,))
        dL = np.zeros(lead + (self.n_muscles, self.n_links))
        for k, m in enumerate(self.muscles):
            pts = [self.site_position(theta, origins, link, off) for link, off in m.sites]
            jac = [self.site_jacobian(origins, link, p) for (link, _), p in zip(m.sites, pts)]
            for s in range(len(pts) - 1):
                seg = pts[s + 1] - pts[s]
                length = np.linalg.norm(seg, axis=-1)
                unit = seg / length[..., None]
                L[..., k] += length
                dL[..., k, :] += np.einsum("...i,...ij->...j", unit, jac[s + 1] - jac[s])
        return L, dL

    def muscle_lengths(self, q) -> np.ndarray:
        return self.muscle_geometry(q)[0]

    def moment_arms(self, q) -> np.ndarray:
        """-dL/dq (..., m, n)."""
        return -self.muscle_geometry(q)[1]

    def normalized_lengths(self, q) -> np.ndarray:
        return self.muscle_lengths(q) / self._rest_len

    # -- dynamics -------------------------------------------------------------

    def _com_terms(self, q, qdot):
        theta, origins = self.joint_origins(q)
        n = self.n_links
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        com = origins[..., :n, :] + self.com[:, None] * dirs
        Jv = []
        for i in range(n):
            Jv.append(self.site_jacobian(origins, i, com[..., i, :]))
        Jv = np.stack(Jv, axis=-3)  # (..., n_links, 2, n)
        if qdot is None:
            return com, Jv, None
        thetadot = np.cumsum(qdot, axis=-1)
        # centripetal COM acceleration with qddot = 0
        cent = -(self.lengths * thetadot**2)[..., None] * dirs
        acc0 = np.cumsum(cent, axis=-2) - cent  # sum over k < i
        acc0 = acc0 - (self.com * thetadot**2)[..., None] * dirs
        return com, Jv, acc0

    def mass_matrix(self, q) -> np.ndarray:
        _, Jv, _ = self._com_terms(q, None)
        M = np.einsum("i,...iaj,...iak->...jk", self.masses, Jv, Jv)
        tri = np.tril(np.ones((self.n_links, self.n_links)))  # row i: joints <= i
        M = M + np.einsum("i,ij,ik->jk", self.inertias, tri, tri)
        return M

    def limit_torque(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        over = np.clip(q - self.upper, 0.0, None)
        under = np.clip(self.lower - q, 0.0, None)
        return self.limit_stiffness * (under**3 - over**3)

    def muscle_tension(self, q, qdot, act) -> tuple[np.ndarray, np.ndarray]:
        """Tendon tension (N, >= 0) and dL/dq."""
        L, dL = self.muscle_geometry(q)
        Ldot = np.einsum("...mj,...j->...m", dL, qdot)
        ln = L / self._rest_len
        vn = Ldot / self._rest_len
        return flv(ln, vn, act, self._mp.v_max) * self._mp.f0, dL

    def time_constant(self, u, act, mode=None) -> np.ndarray:
        mode = mode or self.activation_mode
        mp = self._mp
        if mode == "smoothed":
            x = u - act
            safe = np.where(mp.tau_smooth > 0, mp.tau_smooth, 1.0)
            smooth = mp.tau_d + (mp.tau_a - mp.tau_d) * sigmoid(x / safe + 0.5)
            return np.where(mp.tau_smooth > 0, smooth, np.where(x > 0, mp.tau_a, mp.tau_d))
        k = 0.5 + 1.5 * act
        return np.where(u > act, mp.tau_a * k, mp.tau_d / k)

    def forward_dynamics(self, q, qdot, act, u, mode=None) -> tuple[np.ndarray, np.ndarray]:
        """Joint accelerations and activation rates."""
        q = np.asarray(q, dtype=float)
        qdot = np.asarray(qdot, dtype=float)
        com, Jv, acc0 = self._com_terms(q, qdot)
        M = np.einsum("i,...iaj,...iak->...jk", self.masses, Jv, Jv)
        tri = np.tril(np.ones((self.n_links, self.n_links)))
        M = M + np.einsum("i,ij,ik->jk", self.inertias, tri, tri)
        g = np.array([0.0, -self.gravity])
        force = self.masses[:, None] * (g - acc0)  # (..., n_links, 2)
        tau = np.einsum("...ia,...iaj->...j", force, Jv)
        tau = tau - self.damping * qdot + self.limit_torque(q)
        if self.n_muscles:
            act = np.asarray(act, dtype=float)
            u = np.asarray(u, dtype=float)
            tension, dL = self.muscle_tension(q, qdot, act)
            tau = tau - np.einsum("...m,...mj->...j", tension, dL)
            adot = (u - act) / self.time_constant(u, act, mode)
        else:
            adot = np.zeros(q.shape[:-1] + (0,))
        qddot = np.linalg.solve(M, tau[..., None])[..., 0]
        return qddot, adot

    def step_arrays(self, q, qdot, act, u, dt, mode=None):
        """Semi-implicit Euler step; activations clamped to [0, 1]."""
        qddot, adot = self.forward_dynamics(q, qdot, act, u, mode)
        qdot_new = qdot + dt * qddot
        q_new = q + dt * qdot_new
        act_new = np.clip(act + dt * adot, 0.0, 1.0) if self.n_muscles else np.asarray(act, dtype=float)
        return q_new, qdot_new, act_new

    # -- flat state helpers (planner) -----------------------------------------

    def split(self, x):
        n = self.n_links
        x = np.asarray(x, dtype=float)
        return x[..., :n], x[..., n : 2 * n], x[..., 2 * n :]

    def join(self, q, qdot, act):
        return np.concatenate([q, qdot, act], axis=-1)

    def step_x(self, x, u, dt, mode=None):
        q, qd, a = self.split(x)
        return self.join(*self.step_arrays(q, qd, a, np.asarray(u, dtype=float), dt, mode))

    # -- markers --------------------------------------------------------------

    def marker_positions(self, q) -> np.ndarray:
        """(..., M, 2)."""
        theta, origins = self.joint_origins(q)
        return np.stack([self.site_position(theta, origins, m.link, m.offset) for m in self.markers], axis=-2)

    def marker_jacobians(self, q) -> np.ndarray:
        """(..., M, 2, n)."""
        theta, origins = self.joint_origins(q)
        out = []
        for m in self.markers:
            p = self.site_position(theta, origins, m.link, m.offset)
            out.append(self.site_jacobian(origins, m.link, p))
        return np.stack(out, axis=-3)

    def marker_velocities(self, q, qdot) -> np.ndarray:
        return np.einsum("...maj,...j->...ma", self.marker_jacobians(q), qdot)

    def marker_velocity_q_jacobians(self, q, qdot) -> np.ndarray:
        """d(marker velocity)/dq as (..., M, 2, n)."""
        theta, origins = self.joint_origins(q)
        n = self.n_links
        qdot = np.asarray(qdot, dtype=float)
        # d o_j / d q_k = perp(o_j - o_k) for k < j
        rel = origins[..., :, None, :] - origins[..., None, :n, :]  # (..., n+1, n, 2)
        mask = np.tril(np.ones((n + 1, n)), -1)
        dO = np.stack([-rel[..., 1], rel[..., 0]], axis=-2) * mask[:, None, :]  # (..., n+1, 2, n)
        out = []
        for m in self.markers:
            if m.link == BASE:
                out.append(np.zeros(q.shape[:-1] + (2, n)))
                continue
            p = self.site_position(theta, origins, m.link, m.offset)
            Jp = self.site_jacobian(origins, m.link, p)
            acc = np.zeros(q.shape[:-1] + (2, n))
            for j in range(m.link + 1):
                d = Jp - dO[..., j, :, :]  # d(p - o_j)/dq
                perp = np.stack([-d[..., 1, :], d[..., 0, :]], axis=-2)
                acc = acc + perp * qdot[..., j, None, None]
            out.append(acc)
        return np.stack(out, axis=-3)

    # -- diagnostics ----------------------------------------------------------

    def energy(self, q, qdot) -> np.ndarray:
        com, _, _ = self._com_terms(q, None)
        M = self.mass_matrix(q)
        kin = 0.5 * np.einsum("...j,...jk,...k->...", qdot, M, qdot)
        pot = self.gravity * np.einsum("i,...i->...", self.masses, com[..., 1])
        return kin + pot

    def actuator_acc0(self, muscle: int, q=None) -> float:
        """Norm of joint acceleration produced by unit tendon force."""
        q = self.rest_pose if q is None else np.asarray(q, dtype=float)
        _, dL = self.muscle_geometry(q)
        return float(np.linalg.norm(np.linalg.solve(self.mass_matrix(q), dL[muscle])))


@dataclass
class LimbState:
    q: np.ndarray
    qdot: np.ndarray
    activations: np.ndarray

    def __post_init__(self):
        self.q = np.array(self.q, dtype=float)
        self.qdot = np.array(self.qdot, dtype=float)
        self.activations = np.array(self.activations, dtype=float)

    @classmethod
    def rest(cls, model: LimbModel) -> "LimbState":
        return cls(model.rest_pose.copy(), np.zeros(model.n_links), np.zeros(model.n_muscles))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot, self.activations])

    @classmethod
    def from_vector(cls, model: LimbModel, x) -> "LimbState":
        return cls(*model.split(x))


def _check(model: LimbModel, state: LimbState):
    if len(state.q) != model.n_links or len(state.qdot) != model.n_links:
        raise ModelError("state dimension does not match model")
    if len(state.activations) != model.n_muscles:
        raise ModelError("activation dimension does not match model")


def muscle_geometry(model: LimbModel, q):
    """Normalized lengths and moment arms (-dL/dq) at ``q``."""
    L, dL = model.muscle_geometry(q)
    return L / model.rest_lengths, -dL


def forward_dynamics(model: LimbModel, state: LimbState, u, mode=None):
    _check(model, state)
    return model.forward_dynamics(state.q, state.qdot, state.activations, np.asarray(u, dtype=float), mode)


def step(model: LimbModel, state: LimbState, u, dt: float, mode=None) -> LimbState:
    if dt <= 0:
        raise ModelError("dt must be positive")
    _check(model, state)
    q, qd, a = model.step_arrays(state.q, state.qdot, state.activations, np.asarray(u, dtype=float), dt, mode)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise DivergenceError("diverged")
    return LimbState(q, qd, a)


def marker_positions(model: LimbModel, state: LimbState) -> dict:
    pos = model.marker_positions(state.q)
    return {name: pos[i] for i, name in enumerate(model.marker_names)}


def marker_velocities(model: LimbModel, state: LimbState) -> dict:
    vel = model.marker_velocities(state.q, state.qdot)
    return {name: vel[i] for i, name in enumerate(model.marker_names)}


# -- model files ---------------------------------------------------------------


def model_from_dict(doc: dict) -> LimbModel:
    links = doc["links"]
    kw = dict(
        lengths=[lk["length"] for lk in links],
        masses=[lk["mass"] for lk in links],
        inertias=[lk.get("inertia", lk["mass"] * lk["length"] ** 2 / 12.0) for lk in links],
        lower=[lk["lower"] for lk in links],
        upper=[lk["upper"] for lk in links],
        com=[lk.get("com", 0.5 * lk["length"]) for lk in links],
        rest_pose=[lk.get("rest", 0.0) for lk in links],
        base=doc.get("base", [0.0, 0.0]),
        gravity=doc.get("gravity", 9.81),
        damping=doc.get("damping", DEFAULT_DAMPING),
        limit_stiffness=doc.get("limit_stiffness", DEFAULT_LIMIT_STIFFNESS),
        activation_mode=doc.get("activation_mode", "smoothed"),
        markers=[Marker(m["name"], int(m["link"]), tuple(m["offset"])) for m in doc.get("markers", [])],
    )
    muscle_docs = doc.get("muscles", [])
    specs = []
    for md in muscle_docs:
        p = {k: md[k] for k in ("tau_a", "tau_d", "tau_smooth", "v_max") if k in md}
        # placeholder f0 until acc0 is known
        f0 = md.get("f0", 1.0)
        sites = tuple((int(s["link"]), tuple(s["offset"])) for s in md["sites"])
        specs.append(MuscleSpec(md["name"], MuscleParams(f0=f0, **p), sites))
    model = LimbModel(muscles=specs, **kw)
    if any("f0" not in md for md in muscle_docs):
        resolved = []
        for i, (md, spec) in enumerate(zip(muscle_docs, specs)):
            if "f0" in md:
                resolved.append(spec)
                continue
            if "scale" not in md:
                raise ModelError(f"muscle {md['name']} needs f0 or scale")
            f0 = estimate_f0(md["scale"], model.actuator_acc0(i))
            resolved.append(replace(spec, params=replace(spec.params, f0=f0)))
        model = replace(model, muscles=tuple(resolved))
    return model


def model_to_dict(model: LimbModel) -> dict:
    return {
        "links": [
            {
                "length": float(model.lengths[i]),
                "mass": float(model.masses[i]),
                "inertia": float(model.inertias[i]),
                "com": float(model.com[i]),
                "lower": float(model.lower[i]),
                "upper": float(model.upper[i]),
                "rest": float(model.rest_pose[i]),
            }
            for i in range(model.n_links)
        ],
        "muscles": [
            {
                "name": m.name,
                "f0": m.params.f0,
                "tau_a": m.params.tau_a,
                "tau_d": m.params.tau_d,
                "tau_smooth": m.params.tau_smooth,
                "v_max": m.params.v_max,
                "sites": [{"link": link, "offset": list(off)} for link, off in m.sites],
            }
            for m in model.muscles
        ],
        "markers": [{"name": m.name, "link": m.link, "offset": list(m.offset)} for m in model.markers],
        "base": [float(x) for x in model.base],
        "gravity": model.gravity,
        "damping": model.damping,
        "limit_stiffness": model.limit_stiffness,
        "activation_mode": model.activation_mode,
    }


def load_model(path) -> LimbModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def save_model(model: LimbModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def demo_model_path() -> Path:
    return Path(__file__).with_name("data") / "demo_limb.json"


def load_demo_model() -> LimbModel:
    return load_model(demo_model_path())
