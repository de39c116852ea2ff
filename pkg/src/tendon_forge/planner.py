"""iLQG trajectory optimization with residual/norm tracking costs.

The solver works on any problem object exposing

* ``nx``, ``nu``, ``horizon``, ``x0``, ``u_bounds`` (``None`` or ``(lo, hi)``)
* ``step(x, u)`` for one state, and ``step_batch(X, U)`` over leading axes
* ``stage_costs(X, U)`` -> per-step costs, length ``horizon + 1``
* ``cost_derivatives(X, U)`` -> ``(lx, lu, lxx, luu, lux)``

and optionally ``dynamics_jacobians(X, U) -> (A, B)``; without it the
Jacobians come from central differences of ``step_batch``, evaluated for the
whole trajectory in one batched call.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .limbdyn import LimbModel, LimbState, load_model

log = logging.getLogger(__name__)

NORMS = ("quadratic", "cosh", "smooth_abs")
RESIDUALS = ("joint_velocity", "control", "marker_pos", "marker_vel")
DEFAULT_WEIGHTS = {"joint_velocity": 0.01, "control": 0.1, "marker_pos": 1.0, "marker_vel": 0.1}

FD_STEP = 1e-6
MU_MIN = 1e-6
MU_MAX = 1e10
MU_FACTOR = 10.0
LINE_SEARCH = tuple(2.0**-i for i in range(11))


class PlannerError(RuntimeError):
    pass


# -- norms ------------------------------------------------------------------------


def norm_quadratic(r) -> float:
    r = np.asarray(r, dtype=float)
    return float(0.5 * np.sum(r * r))


def norm_cosh(r, p: float = 0.3) -> float:
    # p^2 (cosh(r/p) - 1) written as 2 p^2 sinh^2(r / 2p) to avoid cancellation
    s = np.sinh(np.asarray(r, dtype=float) / (2.0 * p))
    return float(np.sum(2.0 * p * p * s * s))


def norm_smooth_abs(r, p: float = 0.1) -> float:
    # sqrt(r^2 + p^2) - p == r^2 / (sqrt(r^2 + p^2) + p)
    r = np.asarray(r, dtype=float)
    return float(np.sum(r * r / (np.sqrt(r * r + p * p) + p)))


def norm_elementwise(kind: str, r, p=None):
    """Elementwise norm value, first and second derivative."""
    r = np.asarray(r, dtype=float)
    if kind == "quadratic":
        return 0.5 * r * r, r, np.ones_like(r)
    if kind == "cosh":
        s = np.sinh(r / (2.0 * p))
        return 2.0 * p * p * s * s, p * np.sinh(r / p), np.cosh(r / p)
    if kind == "smooth_abs":
        h = np.sqrt(r * r + p * p)
        return r * r / (h + p), r / h, p * p / h**3
    raise PlannerError(f"unknown norm {kind!r}")


@dataclass(frozen=True)
class CostTerm:
    residual: str
    norm: str
    weight: float
    p: float | None = None

    def __post_init__(self):
        if self.residual not in RESIDUALS:
            raise PlannerError(f"unknown residual {self.residual!r}")
        if self.norm not in NORMS:
            raise PlannerError(f"unknown norm {self.norm!r}")
        if self.weight < 0:
            raise PlannerError("weights must be non-negative")
        if self.norm != "quadratic" and not (self.p is not None and self.p > 0):
            raise PlannerError(f"{self.norm} norm needs p > 0")


def default_terms(weights=None) -> tuple[CostTerm, ...]:
    w = dict(DEFAULT_WEIGHTS)
    if weights is not None:
        if isinstance(weights, dict):
            w.update(weights)
        else:
            w = dict(zip(RESIDUALS, weights))
    return (
        CostTerm("joint_velocity", "quadratic", w["joint_velocity"]),
        CostTerm("control", "cosh", w["control"], 0.3),
        CostTerm("marker_pos", "smooth_abs", w["marker_pos"], 0.1),
        CostTerm("marker_vel", "smooth_abs", w["marker_vel"], 0.3),
    )


# -- tracking problem ---------------------------------------------------------


@dataclass
class TrackingProblem:
    """Marker tracking on a :class:`LimbModel`.

    ``ref_pos`` and ``ref_vel`` hold one (M, 2) block per knot, so the horizon
    is ``len(ref_pos) - 1``.
    """

    model: LimbModel
    dt: float
    x0: np.ndarray
    ref_pos: np.ndarray
    ref_vel: np.ndarray
    terms: tuple = field(default_factory=default_terms)
    mode: str | None = None
    u_bounds: tuple | None = (0.0, 1.0)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.ref_pos = np.asarray(self.ref_pos, dtype=float)
        self.ref_vel = np.asarray(self.ref_vel, dtype=float)
        self.terms = tuple(self.terms)
        M = len(self.model.markers)
        if self.ref_pos.ndim != 3 or self.ref_pos.shape[1:] != (M, 2):
            raise PlannerError("reference positions must be (N+1, n_markers, 2)")
        if self.ref_vel.shape != self.ref_pos.shape:
            raise PlannerError("reference velocities must match positions")
        if len(self.ref_pos) < 2:
            raise PlannerError("horizon must be at least 1 step")
        if self.dt <= 0:
            raise PlannerError("dt must be positive")
        if self.x0.shape != (self.model.nx,):
            raise PlannerError("initial state has the wrong dimension")

    @property
    def horizon(self) -> int:
        return len(self.ref_pos) - 1

    @property
    def nx(self) -> int:
        return self.model.nx

    @property
    def nu(self) -> int:
        return self.model.n_muscles

    def step(self, x, u):
        return self.model.step_x(x, u, self.dt, self.mode)

    step_batch = step

    def window(self, start: int, x0) -> "TrackingProblem":
        return TrackingProblem(self.model, self.dt, x0, self.ref_pos[start:], self.ref_vel[start:],
                               self.terms, self.mode, self.u_bounds)

    def residuals(self, X, U=None) -> dict:
        """Residual arrays keyed by residual name (leading axis = knot)."""
        m = self.model
        q, qd, _ = m.split(X)
        out = {
            "joint_velocity": qd,
            "marker_pos": (m.marker_positions(q) - self.ref_pos[: len(X)]).reshape(len(X), -1),
            "marker_vel": (m.marker_velocities(q, qd) - self.ref_vel[: len(X)]).reshape(len(X), -1),
        }
        if U is not None:
            out["control"] = np.asarray(U, dtype=float)
        return out

    def term_costs(self, X, U) -> dict:
        """Per-term, per-knot weighted costs; the terminal knot has no control term."""
        res = self.residuals(X, U)
        out = {}
        for t in self.terms:
            val = norm_elementwise(t.norm, res[t.residual], t.p)[0].sum(axis=-1) * t.weight
            if t.residual == "control":
                val = np.append(val, 0.0)
            out[t.residual] = val
        return out

    def stage_costs(self, X, U) -> np.ndarray:
        return sum(self.term_costs(X, U).values())

    def cost_derivatives(self, X, U):
        """Gradients and Gauss-Newton Hessians of the stage costs."""
        m = self.model
        n = m.n_links
        N1 = len(X)
        nx, nu = self.nx, self.nu
        q, qd, _ = m.split(X)
        res = self.residuals(X, U)
        lx = np.zeros((N1, nx))
        lxx = np.zeros((N1, nx, nx))
        lu = np.zeros((N1 - 1, nu))
        luu = np.zeros((N1 - 1, nu, nu))
        lux = np.zeros((N1 - 1, nu, nx))
        Jp = None
        for t in self.terms:
            if t.weight == 0:
                continue
            _, g, h = norm_elementwise(t.norm, res[t.residual], t.p)
            g = t.weight * g
            h = t.weight * h
            if t.residual == "control":
                lu += g
                luu += np.einsum("ki,ij->kij", h, np.eye(nu))
                continue
            if t.residual == "joint_velocity":
                Jr = np.zeros((N1, n, nx))
                Jr[:, :, n : 2 * n] = np.eye(n)
            else:
                if Jp is None:
                    Jp = m.marker_jacobians(q).reshape(N1, -1, n)
                Jr = np.zeros((N1, Jp.shape[1], nx))
                if t.residual == "marker_pos":
                    Jr[:, :, :n] = Jp
                else:
                    Jr[:, :, :n] = m.marker_velocity_q_jacobians(q, qd).reshape(N1, -1, n)
                    Jr[:, :, n : 2 * n] = Jp
            lx += np.einsum("kr,krx->kx", g, Jr)
            lxx += np.einsum("krx,kr,kry->kxy", Jr, h, Jr)
        return lx, lu, lxx, luu, lux


def stage_cost(problem: TrackingProblem, state: LimbState, u, k: int):
    """Cost at knot ``k`` and its per-term breakdown; ``u`` is ignored at k == N."""
    if k > problem.horizon:
        raise PlannerError("knot index beyond horizon")
    m = problem.model
    terminal = k == problem.horizon
    res = {
        "joint_velocity": state.qdot[None],
        "marker_pos": (m.marker_positions(state.q) - problem.ref_pos[k]).reshape(1, -1),
        "marker_vel": (m.marker_velocities(state.q, state.qdot) - problem.ref_vel[k]).reshape(1, -1),
    }
    if not terminal:
        res["control"] = np.asarray(u, dtype=float)[None]
    parts = {}
    for t in problem.terms:
        if t.residual == "control" and terminal:
            continue
        parts[t.residual] = t.weight * float(norm_elementwise(t.norm, res[t.residual][0], t.p)[0].sum())
    return sum(parts.values()), parts


# -- linear-quadratic problems ------------------------------------------------


@dataclass
class LinearQuadraticProblem:
    """x' = A x + B u with cost sum 0.5 x'Qx + 0.5 u'Ru + 0.5 x_N' Qf x_N."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    x0: np.ndarray
    horizon: int
    u_bounds: tuple | None = None

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nu(self):
        return self.B.shape[1]

    def step(self, x, u):
        return x @ self.A.T + u @ self.B.T

    step_batch = step

    def stage_costs(self, X, U):
        c = 0.5 * np.einsum("ki,ij,kj->k", X, self.Q, X)
        c[-1] = 0.5 * X[-1] @ self.Qf @ X[-1]
        c[:-1] += 0.5 * np.einsum("ki,ij,kj->k", U, self.R, U)
        return c

    def cost_derivatives(self, X, U):
        N = len(U)
        lx = X @ self.Q.T
        lx[-1] = self.Qf @ X[-1]
        lxx = np.broadcast_to(self.Q, (N + 1,) + self.Q.shape).copy()
        lxx[-1] = self.Qf
        lu = U @ self.R.T
        luu = np.broadcast_to(self.R, (N,) + self.R.shape).copy()
        return lx, lu, lxx, luu, np.zeros((N, self.nu, self.nx))


# -- solver ------------------------------------------------------------------


@dataclass
class Trajectory:
    states: np.ndarray
    controls: np.ndarray
    cost: float
    term_costs: dict
    cost_log: list
    status: str
    iterations: int

    def state(self, k: int, model: LimbModel) -> LimbState:
        return LimbState.from_vector(model, self.states[k])


@dataclass(frozen=True)
class ILQGOptions:
    max_iter: int = 200
    rel_tol: float = 1e-7
    mu_init: float = MU_MIN
    fd_step: float = FD_STEP
    verbose: bool = False


def rollout(problem, U, K=None, k_ff=None, X_ref=None, U_ref=None, alpha=1.0):
    """Simulate from ``problem.x0``; with gains, apply the feedback policy."""
    N = len(U) if U_ref is None else len(U_ref)
    X = np.empty((N + 1, problem.nx))
    Uo = np.empty((N, problem.nu))
    X[0] = problem.x0
    bounds = problem.u_bounds
    with np.errstate(all="ignore"):
        for k in range(N):
            if K is None:
                u = U[k]
            else:
                u = U_ref[k] + alpha * k_ff[k] + K[k] @ (X[k] - X_ref[k])
            if bounds is not None:
                u = np.clip(u, bounds[0], bounds[1])
            Uo[k] = u
            X[k + 1] = problem.step(X[k], u)
            if not np.all(np.isfinite(X[k + 1])):
                X[k + 1 :] = np.nan
                break
    return X, Uo


def total_cost(problem, X, U) -> float:
    if not np.all(np.isfinite(X)):
        return math.inf
    c = float(np.sum(problem.stage_costs(X, U)))
    return c if math.isfinite(c) else math.inf


def fd_jacobians(problem, X, U, h=FD_STEP):
    """Central-difference A = df/dx, B = df/du at every knot, in one batch."""
    N = len(U)
    nx, nu = problem.nx, problem.nu
    nz = nx + nu
    Z = np.concatenate([X[:N], U], axis=1)  # (N, nz)
    pert = np.concatenate([np.eye(nz), -np.eye(nz)]) * h  # (2 nz, nz)
    Zp = Z[:, None, :] + pert[None]  # (N, 2 nz, nz)
    F = problem.step_batch(Zp[..., :nx], Zp[..., nx:])
    J = (F[:, :nz] - F[:, nz:]) / (2 * h)  # (N, nz, nx): row j = d f / d z_j
    J = J.swapaxes(1, 2)
    return J[:, :, :nx], J[:, :, nx:]


def _solve_box(Quu, Qu, Qux, u, bounds):
    """Feedforward/feedback gains with controls held at active bounds."""
    nu = len(Qu)
    free = np.ones(nu, dtype=bool)
    k = np.zeros(nu)
    K = np.zeros((nu, Qux.shape[1]))
    for _ in range(3):
        kf = np.zeros(nu)
        if bounds is not None:
            kf[~free] = np.clip(u + k, bounds[0], bounds[1])[~free] - u[~free]
        if free.any():
            Qff = Quu[np.ix_(free, free)]
            L = np.linalg.cholesky(Qff)
            rhs = Qu[free] + Quu[np.ix_(free, ~free)] @ kf[~free]
            kf[free] = -_chol_solve(L, rhs)
            K = np.zeros_like(K)
            K[free] = -_chol_solve(L, Qux[free])
        else:
            K = np.zeros_like(K)
        k = kf
        if bounds is None:
            break
        target = u + k
        out = (target < bounds[0]) | (target > bounds[1])
        new_free = free & ~out
        if np.array_equal(new_free, free):
            k = np.clip(target, bounds[0], bounds[1]) - u
            break
        free = new_free
    return k, K


def _chol_solve(L, b):
    from scipy.linalg import cho_solve

    return cho_solve((L, True), b)


def backward_pass(problem, X, U, A, B, derivs, mu):
    lx, lu, lxx, luu, lux = derivs
    N = len(U)
    nx, nu = problem.nx, problem.nu
    k_ff = np.zeros((N, nu))
    K = np.zeros((N, nu, nx))
    Vx = lx[N].copy()
    Vxx = lxx[N].copy()
    dV = np.zeros(2)
    eye = np.eye(nu)
    for k in range(N - 1, -1, -1):
        Ak, Bk = A[k], B[k]
        Qx = lx[k] + Ak.T @ Vx
        Qu = lu[k] + Bk.T @ Vx
        Qxx = lxx[k] + Ak.T @ Vxx @ Ak
        Quu = luu[k] + Bk.T @ Vxx @ Bk
        Qux = lux[k] + Bk.T @ Vxx @ Ak
        try:
            kk, KK = _solve_box(Quu + mu * eye, Qu, Qux, U[k], problem.u_bounds)
        except np.linalg.LinAlgError:
            return None
        k_ff[k] = kk
        K[k] = KK
        dV += (kk @ Qu, 0.5 * kk @ Quu @ kk)
        Vx = Qx + KK.T @ Quu @ kk + KK.T @ Qu + Qux.T @ kk
        Vxx = Qxx + KK.T @ Quu @ KK + KK.T @ Qux + Qux.T @ KK
        Vxx = 0.5 * (Vxx + Vxx.T)
    return k_ff, K, dV


def ilqg(problem, U0, options: ILQGOptions | None = None) -> Trajectory:
    """Iterative LQG from the control guess ``U0``."""
    opt = options or ILQGOptions()
    U = np.array(U0, dtype=float).reshape(problem.horizon, problem.nu)
    if not np.all(np.isfinite(U)):
        raise PlannerError("bad initialization")
    X, U = rollout(problem, U)
    J = total_cost(problem, X, U)
    if not math.isfinite(J):
        raise PlannerError("bad initialization")
    jac = getattr(problem, "dynamics_jacobians", None)
    mu = opt.mu_init
    cost_log = [J]
    status = "max-iterations"
    it = 0
    need_derivs = True
    while it < opt.max_iter:
        if J == 0.0:
            status = "converged"
            break
        if need_derivs:
            A, B = jac(X, U) if jac is not None else fd_jacobians(problem, X, U, opt.fd_step)
            derivs = problem.cost_derivatives(X, U)
            need_derivs = False
        bp = backward_pass(problem, X, U, A, B, derivs, mu)
        if bp is None:
            mu = max(mu * MU_FACTOR, MU_MIN)
            if mu > MU_MAX:
                status = "converged-by-regularization-cap"
                break
            continue
        k_ff, K, dV = bp
        expected = -(dV[0] + dV[1])
        if expected <= 1e-14 * max(1.0, abs(J)):
            status = "converged"
            break
        accepted = False
        for alpha in LINE_SEARCH:
            Xn, Un = rollout(problem, None, K, k_ff, X, U, alpha)
            Jn = total_cost(problem, Xn, Un)
            if Jn < J:
                accepted = True
                break
        it += 1
        if not accepted:
            mu = max(mu * MU_FACTOR, MU_MIN)
            if mu > MU_MAX:
                status = "converged-by-regularization-cap"
                break
            continue
        improvement = (J - Jn) / max(abs(J), 1e-300)
        X, U, J = Xn, Un, Jn
        cost_log.append(J)
        need_derivs = True
        mu = mu / MU_FACTOR if mu / MU_FACTOR >= MU_MIN else 0.0
        if opt.verbose:
            log.info("iter %d cost %.10g alpha %g mu %g", it, J, alpha, mu)
        if improvement < opt.rel_tol:
            status = "converged"
            break
    breakdown = {}
    if hasattr(problem, "term_costs"):
        breakdown = {k: float(np.sum(v)) for k, v in problem.term_costs(X, U).items()}
    return Trajectory(X, U, J, breakdown, cost_log, status, it)


def ilqg_solve(problem, initial_controls=None, options: ILQGOptions | None = None) -> Trajectory:
    if initial_controls is None:
        initial_controls = np.zeros((problem.horizon, problem.nu))
    return ilqg(problem, initial_controls, options)


def receding_solve(problem: TrackingProblem, replan_every: int, initial_controls=None,
                   options: ILQGOptions | None = None) -> Trajectory:
    """Re-plan over the remaining clip every ``replan_every`` steps."""
    if replan_every < 1:
        raise PlannerError("replan interval must be >= 1")
    N = problem.horizon
    U_guess = np.zeros((N, problem.nu)) if initial_controls is None else np.array(initial_controls, dtype=float)
    X = np.empty((N + 1, problem.nx))
    U = np.empty((N, problem.nu))
    X[0] = problem.x0
    log_all = []
    k = 0
    while k < N:
        sub = problem.window(k, X[k])
        traj = ilqg(sub, U_guess[k:], options)
        log_all.extend(traj.cost_log)
        n_apply = min(replan_every, N - k)
        for j in range(n_apply):
            U[k + j] = traj.controls[j]
            X[k + j + 1] = problem.step(X[k + j], U[k + j])
        U_guess[k:] = traj.controls
        k += n_apply
    J = total_cost(problem, X, U)
    breakdown = {name: float(np.sum(v)) for name, v in problem.term_costs(X, U).items()}
    return Trajectory(X, U, J, breakdown, log_all, "receding", len(log_all))


def resimulate(problem, controls) -> np.ndarray:
    """States produced by replaying ``controls`` exactly as the solver does."""
    return rollout(problem, np.asarray(controls, dtype=float))[0]


# -- metrics -----------------------------------------------------------------


def kinematic_error(sim, ref) -> np.ndarray:
    """Mean over markers of the Euclidean marker distance, per step.

    ``sim`` and ``ref`` are (T, M, D) arrays.
    """
    sim = np.asarray(sim, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if sim.shape != ref.shape:
        raise PlannerError(f"marker arrays differ in shape: {sim.shape} vs {ref.shape}")
    return np.linalg.norm(sim - ref, axis=-1).mean(axis=-1)


# -- reference / problem files -------------------------------------------------


def simulate(model: LimbModel, x0, controls, dt: float, mode=None) -> np.ndarray:
    X = np.empty((len(controls) + 1, model.nx))
    X[0] = x0
    for k, u in enumerate(np.asarray(controls, dtype=float)):
        X[k + 1] = model.step_x(X[k], u, dt, mode)
    return X


def reference_from_states(model: LimbModel, X) -> tuple[np.ndarray, np.ndarray]:
    q, qd, _ = model.split(np.asarray(X))
    return model.marker_positions(q), model.marker_velocities(q, qd)


def reference_to_dict(model: LimbModel, dt, x0, ref_pos, ref_vel, controls=None) -> dict:
    q, qd, a = model.split(np.asarray(x0))
    doc = {
        "dt": dt,
        "markers": model.marker_names,
        "initial_state": {"q": q.tolist(), "qdot": qd.tolist(), "activations": a.tolist()},
        "positions": np.asarray(ref_pos).tolist(),
        "velocities": np.asarray(ref_vel).tolist(),
    }
    if controls is not None:
        doc["controls"] = np.asarray(controls).tolist()
    return doc


def terms_from_config(terms=None, weights=None) -> tuple[CostTerm, ...]:
    if not terms:
        return default_terms(weights)
    out = []
    for i, t in enumerate(terms):
        w = t.get("weight", DEFAULT_WEIGHTS.get(t["residual"], 1.0))
        if weights is not None:
            w = weights[t["residual"]] if isinstance(weights, dict) else weights[i]
        out.append(CostTerm(t["residual"], t["norm"], float(w), t.get("p")))
    return tuple(out)


def load_problem(path, mode=None, horizon=None, dt=None, weights=None) -> TrackingProblem:
    """Problem file ``{model_path, reference_path, horizon, dt, terms, weights}``.

    Relative paths resolve against the problem file's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    root = path.parent
    model = load_model(root / doc["model_path"])
    ref = json.loads((root / doc["reference_path"]).read_text())
    if ref["markers"] != model.marker_names:
        raise PlannerError("reference markers do not match the model")
    N = doc.get("horizon") if horizon is None else horizon
    if N is None:
        N = len(ref["positions"]) - 1
    if N < 1:
        raise PlannerError("horizon must be at least 1 step")
    if N + 1 > len(ref["positions"]):
        raise PlannerError("reference shorter than horizon")
    dt = doc.get("dt", ref["dt"]) if dt is None else dt
    init = ref["initial_state"]
    x0 = np.concatenate([init["q"], init["qdot"], init["activations"]])
    w = weights if weights is not None else doc.get("weights")
    terms = terms_from_config(doc.get("terms"), w)
    return TrackingProblem(
        model, float(dt), x0,
        np.array(ref["positions"])[: N + 1], np.array(ref["velocities"])[: N + 1],
        terms, mode or doc.get("mode"),
    )
