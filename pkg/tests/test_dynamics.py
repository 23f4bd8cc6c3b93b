import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from chipoct.constants import NK, RB87
from chipoct.dynamics import (CollapseError, CondensateState, classical_energy, derivative,
                              history_energies, integrate_forward, quantum_energy,
                              tf_ground_state, write_history_csv)
from chipoct.ramp import TrapTrajectory, ramp_to_trajectory

TWO_PI = 2 * math.pi
W_INITIAL = TWO_PI * np.array([15.0, 616.0, 616.0])
W_FINAL = TWO_PI * np.array([10.0, 32.0, 32.0])


def constant_trajectory(omegas, z0=1e-3, duration=0.25, n=2001):
    times = np.linspace(0.0, duration, n)
    zeros = np.zeros(n)
    w2 = np.repeat((np.asarray(omegas, dtype=float) ** 2)[:, None], n, axis=1)
    return TrapTrajectory(times, zeros, np.full(n, z0), zeros, w2, zeros, zeros,
                          np.zeros_like(w2), duration, zeros)


def test_tf_normalization():
    g = tf_ground_state(W_INITIAL)
    N = 8 * math.pi / 15 * g.chemical_potential / RB87.interaction_strength * np.prod(g.radii)
    assert N == pytest.approx(1e5, rel=1e-10)
    np.testing.assert_allclose(
        g.radii, np.sqrt(2 * g.chemical_potential / (RB87.atom_mass * W_INITIAL**2)), rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10.0))
def test_tf_scaling_exponents(k):
    a, b = tf_ground_state(W_FINAL), tf_ground_state(k * W_FINAL)
    assert b.chemical_potential == pytest.approx(a.chemical_potential * k**1.2, rel=1e-12)
    np.testing.assert_allclose(b.radii, a.radii * k**-0.4, rtol=1e-12)


def test_tf_rejects_bad_frequencies():
    with pytest.raises(ValueError):
        tf_ground_state([1.0, -1.0, 1.0])


@pytest.mark.parametrize("omegas, nK", [(W_INITIAL, 120.0), (W_FINAL, 10.0)])
def test_ground_state_energy_anchor(omegas, nK):
    g = tf_ground_state(omegas)
    e = quantum_energy(CondensateState(0.0).array, omegas**2, g) / NK
    assert e == pytest.approx(nK, rel=0.15)


def test_quantum_energy_stationary_at_tf_radii():
    g = tf_ground_state(W_FINAL)
    m, gN = RB87.atom_mass, RB87.interaction_strength * g.atom_count

    def energy(r):
        return (m / 14 * np.sum(W_FINAL**2 * r**2) + 15 * gN / (28 * math.pi * np.prod(r)))

    scale = energy(g.radii) / g.radii
    for i in range(3):
        h = 1e-7 * g.radii[i]
        e = np.zeros(3)
        e[i] = h
        grad = (energy(g.radii + e) - energy(g.radii - e)) / (2 * h)
        assert abs(grad) < 1e-7 * scale[i]


def test_equilibrium_derivative_is_zero():
    x = CondensateState(1e-3)
    np.testing.assert_array_equal(derivative(x, 1e-3, W_FINAL**2, W_FINAL**2), np.zeros(8))


def test_isotropic_softening():
    w2 = (TWO_PI * 50.0) ** 2
    d = derivative(CondensateState(0.0), 0.0, np.full(3, w2 / 2), np.full(3, w2))
    np.testing.assert_allclose(d[3::2], w2 / 2, rtol=1e-14)


def test_derivative_collapse():
    with pytest.raises(CollapseError):
        derivative(CondensateState(0.0, lam=(1.0, 0.0, 1.0)), 0.0, W_FINAL**2, W_FINAL**2)


@pytest.mark.parametrize("method", ["verlet", "rk4"])
def test_free_expansion_matches_reference(method):
    w0 = TWO_PI * 50.0
    tr = constant_trajectory(np.zeros(3) + 1e-300, duration=0.02, n=4001)
    h = integrate_forward(tr, CondensateState(0.0), method, omega2_initial=np.full(3, w0**2))

    def rhs(t, y):
        return [y[1], w0**2 / y[0] ** 4]

    ref = solve_ivp(rhs, (0, 0.02), [1.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14,
                    t_eval=tr.times)
    tol = 1e-5 if method == "verlet" else 1e-9
    np.testing.assert_allclose(h.states[:, 2], ref.y[0], rtol=tol)
    np.testing.assert_allclose(h.states[:, 6], ref.y[0], rtol=tol)


@pytest.mark.parametrize("method", ["verlet", "rk4"])
def test_static_fixed_point(method):
    tr = constant_trajectory(W_FINAL, z0=1.65e-3, duration=0.25, n=2049)
    h = integrate_forward(tr, CondensateState(1.65e-3), method)
    np.testing.assert_allclose(h.states, np.tile(h.states[0], (tr.node_count, 1)), rtol=0,
                               atol=1e-12 * 1.65e-3)
    g = tf_ground_state(W_FINAL)
    e = quantum_energy(h.states, tr.omega2, g)
    assert np.max(np.abs(e / e[0] - 1)) < 1e-10


def test_harmonic_oscillation_period():
    wz = TWO_PI * 32.0
    tr = constant_trajectory(W_FINAL, z0=0.0, duration=0.25, n=20001)
    h = integrate_forward(tr, CondensateState(1e-6), "verlet")
    z = h.states[:, 0]
    idx = np.flatnonzero(np.sign(z[:-1]) != np.sign(z[1:]))
    crossings = tr.times[idx] - z[idx] * tr.dt / (z[idx + 1] - z[idx])
    period = 2 * np.mean(np.diff(crossings))
    assert period == pytest.approx(TWO_PI / wz, rel=1e-3)


def test_verlet_second_order():
    wz = TWO_PI * 32.0
    errors = []
    for n in (501, 1001, 2001):
        tr = constant_trajectory(W_FINAL, z0=0.0, duration=0.25, n=n)
        z, v = integrate_forward(tr, CondensateState(1e-6), "verlet").states[-1, :2]
        errors.append(math.hypot(z - 1e-6 * math.cos(wz * 0.25),
                                 v / wz + 1e-6 * math.sin(wz * 0.25)))
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all((orders > 1.9) & (orders < 2.1))


def test_time_reversal():
    tr = constant_trajectory(W_FINAL, z0=0.0, duration=0.25, n=5001)
    start = CondensateState(2e-6, 1e-4, (1.05, 0.97, 1.0), (0.1, -0.2, 0.3))
    fwd = integrate_forward(tr, start, "verlet").states[-1].copy()
    fwd[1::2] *= -1
    back = integrate_forward(tr, fwd, "verlet").states[-1].copy()
    back[1::2] *= -1
    np.testing.assert_allclose(back, start.array, rtol=1e-9, atol=1e-9 * 2e-6)


def test_energy_conservation_static_trap():
    tr = constant_trajectory(W_FINAL, z0=0.0, duration=0.25, n=20001)
    g = tf_ground_state(W_FINAL)
    start = CondensateState(1e-6, 0.0, (1.01, 1.0, 0.99), (0.0, 0.0, 0.0))
    h = integrate_forward(tr, start, "verlet")
    e_cl, e_qu = history_energies(h, g)
    total = e_cl + e_qu
    assert np.max(np.abs(total / total[0] - 1)) < 1e-6


def test_collapse_reports_time():
    tr = constant_trajectory(W_FINAL, z0=0.0, duration=0.25, n=101)
    with pytest.raises(CollapseError) as info:
        integrate_forward(tr, CondensateState(0.0, lam=(1.0, 1.0, 1.0), lam_dot=(0, 0, -1e4)))
    assert info.value.time is not None and info.value.time > 0


@pytest.mark.parametrize("dz, dv", [(0.0, 0.0), (1e-6, 0.0), (2e-6, 3e-4)])
def test_classical_energy(dz, dv):
    wz2 = (TWO_PI * 32.0) ** 2
    e = classical_energy(CondensateState(1e-3 + dz, 2e-3 + dv), 1e-3, 2e-3, wz2)
    assert e == pytest.approx(0.5 * RB87.atom_mass * (wz2 * dz**2 + dv**2), rel=1e-9, abs=0)
    e2 = classical_energy(CondensateState(1e-3 + 2 * dz, 2e-3 + 2 * dv), 1e-3, 2e-3, wz2)
    assert e2 == pytest.approx(4 * e, rel=1e-9, abs=0)


def test_one_micron_offset_energy():
    e = classical_energy(CondensateState(1e-6), 0.0, 0.0, (TWO_PI * 32.0) ** 2)
    assert RB87.to_nK(e) == pytest.approx(0.211, abs=0.001)


def test_quantum_energy_collapse():
    g = tf_ground_state(W_FINAL)
    with pytest.raises(CollapseError):
        quantum_energy(CondensateState(0.0, lam=(1.0, -1.0, 1.0)).array, W_FINAL**2, g)


def test_verlet_rk4_agree_on_sta(trap_map, sta150):
    tr = ramp_to_trajectory(sta150, trap_map)
    start = CondensateState.at_rest(tr.z0[0])
    a = integrate_forward(tr, start, "verlet", substeps=8).states
    b = integrate_forward(tr, start, "rk4", substeps=8).states
    # each component relative to its own peak magnitude along the run
    scale = np.max(np.abs(b), axis=0)
    assert np.max(np.abs(a[-1] - b[-1]) / scale) < 1e-6


def test_history_csv(tmp_path):
    tr = constant_trajectory(W_FINAL, duration=0.01, n=101)
    h = integrate_forward(tr, CondensateState(1e-3))
    path = tmp_path / "h.csv"
    write_history_csv(path, h, tf_ground_state(W_FINAL))
    lines = path.read_text().splitlines()
    assert lines[0] == ("t,z_A,v_A,lambda_x,dlambda_x,lambda_y,dlambda_y,lambda_z,dlambda_z,"
                        "E_cl_nK,E_qu_nK")
    assert len(lines) == 102
