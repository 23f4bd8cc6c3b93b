"""Transport figures of merit: average translational energy, offsets, residual size oscillations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import NK, RB87
from .dynamics import (HOLD_TIME, CondensateState, GroundStateSpec, StateHistory,
                       classical_energy, integrate_forward, quantum_energy)
from .ramp import ramp_to_trajectory


@dataclass(frozen=True)
class TransportMetrics:
    mean_e_cl_nK: float
    max_position_offset: float  # m
    max_velocity_offset: float  # m/s
    residual_amplitudes: np.ndarray  # m, per axis
    e_cl_final_nK: float
    e_qu_final_nK: float

    def as_row(self) -> dict:
        rx, ry, rz = (float(v) * 1e6 for v in self.residual_amplitudes)
        return {
            "mean_E_cl_nK": self.mean_e_cl_nK,
            "max_offset_um": self.max_position_offset * 1e6,
            "max_velocity_offset_um_per_ms": self.max_velocity_offset * 1e3,
            "dx_res_um": rx, "dy_res_um": ry, "dz_res_um": rz,
            "E_cl_tf_nK": self.e_cl_final_nK, "E_qu_tf_nK": self.e_qu_final_nK,
        }


def mean_classical_energy(history: StateHistory, constants=RB87) -> float:
    """(1/t_f) * integral of E_cl over the transport, in joules."""
    n = history.final_index + 1
    tr = history.trajectory
    e = classical_energy(history.states[:n], tr.z0[:n], tr.z0_dot[:n], tr.omega2[2, :n], constants)
    return float(np.trapezoid(e, dx=tr.dt) / tr.final_time)


def transient_offsets(history: StateHistory) -> tuple[float, float]:
    """Max |z_A - z_0| and max |v_A - dz_0/dt| over [0, t_f]."""
    n = history.final_index + 1
    tr = history.trajectory
    x = history.states[:n]
    return (float(np.max(np.abs(x[:, 0] - tr.z0[:n]))),
            float(np.max(np.abs(x[:, 1] - tr.z0_dot[:n]))))


def size_history(history: StateHistory, ground: GroundStateSpec) -> np.ndarray:
    """Standard deviations r_i(0) lambda_i / sqrt(7), shape (n, 3)."""
    return history.states[:, 2::2] * ground.radii / math.sqrt(7.0)


def residual_amplitudes(history: StateHistory, ground: GroundStateSpec) -> np.ndarray:
    """Half peak-to-peak of each width over the nodes after t_f (the hold)."""
    k = history.final_index
    if k >= len(history.times) - 1:
        raise ValueError("history has no samples after t_f; integrate with a hold")
    w = size_history(history, ground)[k:]
    return 0.5 * (w.max(axis=0) - w.min(axis=0))


def transport_metrics(history: StateHistory, ground: GroundStateSpec,
                      constants=RB87) -> TransportMetrics:
    """All figures of merit for a history that includes a post-transport hold.

    ``ground`` is the initial-trap ground state supplying r_i(0).
    """
    k = history.final_index
    tr = history.trajectory
    x = history.states
    e_cl = classical_energy(x[k:k + 1], tr.z0[k:k + 1], tr.z0_dot[k:k + 1],
                            tr.omega2[2, k:k + 1], constants)
    e_qu = quantum_energy(x[k], tr.omega2[:, k], ground, constants)
    dz, dv = transient_offsets(history)
    return TransportMetrics(
        mean_e_cl_nK=mean_classical_energy(history, constants) / NK,
        max_position_offset=dz, max_velocity_offset=dv,
        residual_amplitudes=residual_amplitudes(history, ground),
        e_cl_final_nK=float(e_cl[0]) / NK, e_qu_final_nK=float(e_qu) / NK,
    )


def simulate_with_hold(ramp, trap_map, hold: float = HOLD_TIME, method: str = "verlet",
                       substeps: int = 1) -> StateHistory:
    """Integrate from rest at z_0(0) through the ramp and a static hold at B_f."""
    tr = ramp_to_trajectory(ramp, trap_map).with_hold(hold)
    return integrate_forward(tr, CondensateState.at_rest(tr.z0[0]), method, substeps)
