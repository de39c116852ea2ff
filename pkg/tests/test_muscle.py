import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tendon_forge.muscle import (
    FV_MAX, MuscleError, MuscleParams, MuscleState, activation_rate, actuator_force, estimate_f0, flv,
    flv_grad, force_length, force_passive, force_velocity, sigmoid, step_activation, tau_smoothed,
    tau_smoothed_dx, tau_switched,
)

P = MuscleParams(tau_a=0.01, tau_d=0.04)


def test_flv_anchors():
    assert flv(1, 0, 1) == 1.0
    assert flv(1, 0, 0) == 0.0
    assert flv(0.5, 0, 1) == 0.0
    assert force_length(1.5) == 0.0 and force_length(0.3) == 0.0
    assert force_velocity(0.0) == 1.0
    assert force_velocity(-10.0, 10.0) == 0.0
    assert force_velocity(-50.0, 10.0) == 0.0
    assert force_velocity(1e9, 10.0) == pytest.approx(FV_MAX, abs=1e-6)
    assert force_passive(0.8) == 0.0 and force_passive(1.2) == pytest.approx(0.02)


def test_curve_shapes():
    L = np.linspace(0.0, 2.0, 2001)
    fl = force_length(L)
    assert np.all(fl >= 0) and np.argmax(fl) == 1000
    V = np.linspace(-20, 50, 3001)
    assert np.all(np.diff(force_velocity(V)) >= -1e-15)
    assert np.all(flv(L, 0.0, 0.7) >= 0)


def test_actuator_force_examples():
    assert actuator_force(MuscleParams(f0=100), MuscleState(1.0, 1.0, 0.0)) == -100.0
    # flv = 0.5 via half activation at the isometric peak
    assert actuator_force(MuscleParams(f0=250), MuscleState(0.5, 1.0, 0.0)) == -125.0
    assert actuator_force(MuscleParams(f0=777), MuscleState(0.0, 1.0, 0.0)) == 0.0


def test_estimate_f0():
    assert estimate_f0(200, 50) == 4.0
    assert estimate_f0(100, 100) == 1.0
    with pytest.raises(MuscleError, match="non-positive unit-force acceleration"):
        estimate_f0(100, 0.0)


def test_estimate_f0_on_demo_limb(demo_model):
    # unit tendon force -> joint torque -dL/dq -> acceleration via M^-1
    i = 2
    q = demo_model.rest_pose
    _, dL = demo_model.muscle_geometry(q)
    acc0 = np.linalg.norm(np.linalg.solve(demo_model.mass_matrix(q), -dL[i]))
    assert demo_model.muscles[i].params.f0 == pytest.approx(1000.0 / acc0, rel=1e-12)


def test_params_validation():
    with pytest.raises(MuscleError):
        MuscleParams(f0=0)
    with pytest.raises(MuscleError):
        MuscleParams(tau_a=0)
    with pytest.raises(MuscleError):
        MuscleParams(tau_smooth=-1)


@settings(max_examples=200, deadline=None)
@given(L=st.floats(0.3, 1.8), v=st.floats(-1.5, 3.0), a=st.floats(0, 1))
def test_flv_gradient_matches_finite_differences(L, v, a):
    V = 10.0 * v
    # the curves are C1 but not C2 at their joins, where central differences
    # carry an O(h) error
    h = 1e-7
    dL, dV, da = flv_grad(L, V, a)
    fd = [
        (flv(L + h, V, a) - flv(L - h, V, a)) / (2 * h),
        (flv(L, V + h, a) - flv(L, V - h, a)) / (2 * h),
        (flv(L, V, a + h) - flv(L, V, a - h)) / (2 * h),
    ]
    for an, num in zip((dL, dV, da), fd):
        assert abs(an - num) <= 1e-5 * max(1.0, abs(num))


def test_tau_switched_examples():
    assert tau_switched(0.8, 0.2, P) == pytest.approx(0.008)
    assert tau_switched(0.1, 0.5, P) == pytest.approx(0.032)
    assert tau_switched(0.5, 0.5, P) == pytest.approx(0.032)


def test_tau_smoothed_examples():
    p = MuscleParams(tau_a=0.01, tau_d=0.04, tau_smooth=0.1)
    assert tau_smoothed(0.5, 0.5, p) == pytest.approx(0.04 - 0.03 * 0.6224593312018546, abs=1e-15)
    assert tau_smoothed(0.5, 0.5, p) == pytest.approx(0.021326, abs=1e-6)
    assert tau_smoothed(1e6, 0, p) == pytest.approx(0.01, abs=1e-15)
    assert tau_smoothed(0, 1e6, p) == pytest.approx(0.04, abs=1e-15)
    vals = [tau_smoothed(0.05, 0.0, MuscleParams(tau_smooth=ts)) for ts in (0.2, 0.05, 0.01)]
    assert vals[0] > vals[1] > vals[2] > 0.01


def test_tau_smoothed_zero_width_is_hard_switch():
    p = MuscleParams(tau_smooth=0.0)
    assert tau_smoothed(0.6, 0.5, p) == p.tau_a
    assert tau_smoothed(0.5, 0.5, p) == p.tau_d
    assert tau_smoothed_dx(0.6, 0.5, p) == 0.0


def test_tau_smoothed_monotone():
    x = np.linspace(-1, 1, 4001)
    t = tau_smoothed(x, 0.0, MuscleParams(tau_smooth=0.05))
    assert np.all(np.diff(t) < 0)


def test_sigmoid_extremes():
    assert sigmoid(1000.0) == 1.0 and sigmoid(-1000.0) == 0.0
    assert sigmoid(0.0) == 0.5


def test_step_activation_examples():
    assert step_activation(0.3, 0.3, 1e-3, P) == 0.3
    p = MuscleParams(tau_a=0.01, tau_d=0.04, tau_smooth=0.01)
    t1 = 0.04 + (0.01 - 0.04) * sigmoid(100.5)
    assert step_activation(1.0, 0.0, 1e-3, p) == pytest.approx(1e-3 / t1, rel=1e-12)
    assert step_activation(1.0, 0.0, 1e-3, p) == pytest.approx(0.1, rel=1e-3)
    with pytest.raises(MuscleError):
        step_activation(1.0, 0.0, 0.0, p)


@pytest.mark.parametrize("mode", ["smoothed", "switched"])
def test_activation_converges_to_constant_excitation(mode):
    a, dt = 0.0, 1e-3
    for _ in range(500):
        a = step_activation(1.0, a, dt, P, mode)
    # fine-step reference
    ref, h = 0.0, 1e-5
    for _ in range(50_000):
        ref = ref + h * float(activation_rate(1.0, ref, P, mode))
    assert abs(a - 1.0) < 1e-3 and abs(ref - 1.0) < 1e-3


@settings(max_examples=100, deadline=None)
@given(us=st.lists(st.floats(0, 1), min_size=1, max_size=200), dt=st.floats(1e-4, 0.05),
       mode=st.sampled_from(["smoothed", "switched"]))
def test_activation_stays_in_unit_interval(us, dt, mode):
    a = 0.0
    for u in us:
        a = step_activation(u, a, dt, P, mode)
        assert 0.0 <= a <= 1.0


def test_vectorized_step():
    u = np.array([0.0, 0.5, 1.0])
    a = np.array([0.2, 0.5, 0.9])
    out = step_activation(u, a, 1e-3, P)
    assert out.shape == (3,)
    assert np.allclose(out, [step_activation(x, y, 1e-3, P) for x, y in zip(u, a)])
