import math
from dataclasses import replace

import numpy as np
import pytest

from chipoct.constants import RB87
from chipoct.dynamics import CondensateState, integrate_forward, tf_ground_state
from chipoct.metrics import (mean_classical_energy, residual_amplitudes, simulate_with_hold,
                             size_history, transient_offsets, transport_metrics)

from test_dynamics import W_FINAL, constant_trajectory


def held(state, duration=0.25, transport=0.15, n=2501):
    tr = replace(constant_trajectory(W_FINAL, z0=0.0, duration=duration, n=n),
                 final_time=transport)
    return integrate_forward(tr, state, "rk4")


def test_equilibrium_has_no_residual():
    g = tf_ground_state(W_FINAL)
    h = held(CondensateState(0.0))
    assert np.all(residual_amplitudes(h, g) == 0.0)
    m = transport_metrics(h, g)
    assert m.mean_e_cl_nK == 0.0 and m.max_position_offset == 0.0


def test_size_history_is_scaled_radius():
    g = tf_ground_state(W_FINAL)
    h = held(CondensateState(0.0, lam=(1.02, 1.0, 0.99)))
    np.testing.assert_allclose(size_history(h, g), h.states[:, 2::2] * g.radii / math.sqrt(7))


def test_residual_matches_small_breathing():
    g = tf_ground_state(W_FINAL)
    eps = 1e-4
    h = held(CondensateState(0.0, lam=(1.0, 1.0 + eps, 1.0)), n=25001)
    amp = residual_amplitudes(h, g)
    # linear response: amplitude bounded by the initial displacement and of the same order
    assert 0.05 * eps * g.radii[1] / math.sqrt(7) < amp[1] <= 1.01 * eps * g.radii[1] / math.sqrt(7)


def test_offsets_of_free_oscillation():
    wz = W_FINAL[2]
    h = held(CondensateState(1e-6), n=25001)
    dz, dv = transient_offsets(h)
    assert dz == pytest.approx(1e-6, rel=1e-9)
    assert dv == pytest.approx(wz * 1e-6, rel=1e-3)


def test_mean_energy_of_oscillation():
    h = held(CondensateState(1e-6), n=25001)
    e = 0.5 * RB87.atom_mass * W_FINAL[2] ** 2 * 1e-12
    assert mean_classical_energy(h) == pytest.approx(e, rel=1e-6)


def test_residual_needs_hold():
    g = tf_ground_state(W_FINAL)
    tr = constant_trajectory(W_FINAL, duration=0.15, n=501)
    h = integrate_forward(tr, CondensateState(1e-3))
    with pytest.raises(ValueError, match="hold"):
        residual_amplitudes(h, g)


def test_simulate_with_hold_extends(trap_map, sta150, ground_initial):
    h = simulate_with_hold(sta150, trap_map)
    # the hold is a whole number of ramp steps
    assert abs(h.times[-1] - 0.25) <= 0.5 * sta150.dt
    assert h.final_index == sta150.node_count - 1
    row = transport_metrics(h, ground_initial).as_row()
    assert set(row) == {"mean_E_cl_nK", "max_offset_um", "max_velocity_offset_um_per_ms",
                        "dx_res_um", "dy_res_um", "dz_res_um", "E_cl_tf_nK", "E_qu_tf_nK"}
    assert row["max_offset_um"] > 1.0
