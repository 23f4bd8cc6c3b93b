"""Center-of-mass and Castin-Dum scaling dynamics of a Thomas-Fermi condensate.

State layout (index: meaning)::

    0 z_A   1 v_A   2 lambda_x   3 dlambda_x/dt
    4 lambda_y   5 dlambda_y/dt   6 lambda_z   7 dlambda_z/dt
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numba
import numpy as np

from .constants import RB87, PhysicalConstants
from .ramp import TrapTrajectory

HOLD_TIME = 0.1  # s, static observation window after t_f


class CollapseError(RuntimeError):
    """A scaling factor reached zero or became non-finite."""

    def __init__(self, message, time=None):
        self.time = time
        super().__init__(message)


@dataclass(frozen=True)
class CondensateState:
    z_A: float
    v_A: float = 0.0
    lam: tuple = (1.0, 1.0, 1.0)
    lam_dot: tuple = (0.0, 0.0, 0.0)

    @property
    def array(self) -> np.ndarray:
        l, d = self.lam, self.lam_dot
        return np.array([self.z_A, self.v_A, l[0], d[0], l[1], d[1], l[2], d[2]], dtype=float)

    @classmethod
    def from_array(cls, x) -> "CondensateState":
        x = np.asarray(x, dtype=float)
        return cls(float(x[0]), float(x[1]), tuple(x[2::2]), tuple(x[3::2]))

    @classmethod
    def at_rest(cls, z0: float) -> "CondensateState":
        """Ground state of the initial trap: at the minimum, unscaled, not moving."""
        return cls(float(z0))


@dataclass(frozen=True)
class GroundStateSpec:
    """Thomas-Fermi ground state of a harmonic trap."""

    radii: np.ndarray
    chemical_potential: float
    omegas: np.ndarray
    atom_count: float

    def widths(self) -> np.ndarray:
        """Standard deviations of the TF density, r / sqrt(7)."""
        return self.radii / math.sqrt(7)


def tf_ground_state(trap, constants: PhysicalConstants = RB87) -> GroundStateSpec:
    """Chemical potential and radii from the TF normalization.

    ``trap`` is a :class:`TrapCharacterization` or a sequence of three
    angular frequencies.
    """
    omegas = np.asarray(getattr(trap, "omegas", trap), dtype=float)
    if omegas.shape != (3,) or np.any(omegas <= 0):
        raise ValueError("need three positive trap frequencies")
    hbar, m = constants.reduced_planck, constants.atom_mass
    wbar = float(np.prod(omegas) ** (1 / 3))
    abar = math.sqrt(hbar / (m * wbar))
    mu = 0.5 * hbar * wbar * (15 * constants.atom_count * constants.scattering_length / abar) ** 0.4
    radii = np.sqrt(2 * mu / (m * omegas**2))
    return GroundStateSpec(radii, mu, omegas, constants.atom_count)


def ground_state_in(trajectory: TrapTrajectory, node: int, constants=RB87) -> GroundStateSpec:
    return tf_ground_state(np.sqrt(trajectory.omega2[:, node]), constants)


# ---------------------------------------------------------------------------
# right-hand side and integrators (compiled)


@numba.njit(cache=True)
def _accel(q0, q1, q2, q3, z0, wx2, wy2, wz2, w0x2, w0y2, w0z2, out):
    out[0] = -wz2 * (q0 - z0)
    out[1] = w0x2 / (q1 * q1 * q2 * q3) - wx2 * q1
    out[2] = w0y2 / (q1 * q2 * q2 * q3) - wy2 * q2
    out[3] = w0z2 / (q1 * q2 * q3 * q3) - wz2 * q3


@numba.njit(cache=True)
def _rhs(x, z0, wx2, wy2, wz2, w0x2, w0y2, w0z2, out):
    out[0] = x[1]
    out[1] = -wz2 * (x[0] - z0)
    out[2] = x[3]
    out[3] = w0x2 / (x[2] * x[2] * x[4] * x[6]) - wx2 * x[2]
    out[4] = x[5]
    out[5] = w0y2 / (x[2] * x[4] * x[4] * x[6]) - wy2 * x[4]
    out[6] = x[7]
    out[7] = w0z2 / (x[2] * x[4] * x[6] * x[6]) - wz2 * x[6]


@numba.njit(cache=True)
def _verlet(x0, z0, w2, w20, dt, substeps, out):
    n = z0.shape[0]
    h = dt / substeps
    q = np.empty(4)
    v = np.empty(4)
    a = np.empty(4)
    q[0], q[1], q[2], q[3] = x0[0], x0[2], x0[4], x0[6]
    v[0], v[1], v[2], v[3] = x0[1], x0[3], x0[5], x0[7]
    for i in range(8):
        out[0, i] = x0[i]
    _accel(q[0], q[1], q[2], q[3], z0[0], w2[0, 0], w2[1, 0], w2[2, 0],
           w20[0], w20[1], w20[2], a)
    for k in range(n - 1):
        for j in range(substeps):
            f = (j + 1.0) / substeps
            zz = z0[k] + f * (z0[k + 1] - z0[k])
            wx = w2[0, k] + f * (w2[0, k + 1] - w2[0, k])
            wy = w2[1, k] + f * (w2[1, k + 1] - w2[1, k])
            wz = w2[2, k] + f * (w2[2, k + 1] - w2[2, k])
            for i in range(4):
                v[i] += 0.5 * h * a[i]
                q[i] += h * v[i]
            if not (q[1] > 0 and q[2] > 0 and q[3] > 0):
                return k + 1
            _accel(q[0], q[1], q[2], q[3], zz, wx, wy, wz, w20[0], w20[1], w20[2], a)
            for i in range(4):
                v[i] += 0.5 * h * a[i]
        for i in range(4):
            out[k + 1, 2 * i] = q[i]
            out[k + 1, 2 * i + 1] = v[i]
    return -1


@numba.njit(cache=True)
def _rk4(x0, z0, w2, w20, dt, substeps, out):
    n = z0.shape[0]
    h = dt / substeps
    x = x0.copy()
    k1 = np.empty(8)
    k2 = np.empty(8)
    k3 = np.empty(8)
    k4 = np.empty(8)
    tmp = np.empty(8)
    wa = np.empty(3)
    wm = np.empty(3)
    wb = np.empty(3)
    out[0, :] = x
    for k in range(n - 1):
        for j in range(substeps):
            fa = j / substeps
            fm = (j + 0.5) / substeps
            fb = (j + 1.0) / substeps
            za = z0[k] + fa * (z0[k + 1] - z0[k])
            zm = z0[k] + fm * (z0[k + 1] - z0[k])
            zb = z0[k] + fb * (z0[k + 1] - z0[k])
            for i in range(3):
                d = w2[i, k + 1] - w2[i, k]
                wa[i] = w2[i, k] + fa * d
                wm[i] = w2[i, k] + fm * d
                wb[i] = w2[i, k] + fb * d
            _rhs(x, za, wa[0], wa[1], wa[2], w20[0], w20[1], w20[2], k1)
            for i in range(8):
                tmp[i] = x[i] + 0.5 * h * k1[i]
            if not (tmp[2] > 0 and tmp[4] > 0 and tmp[6] > 0):
                return k + 1
            _rhs(tmp, zm, wm[0], wm[1], wm[2], w20[0], w20[1], w20[2], k2)
            for i in range(8):
                tmp[i] = x[i] + 0.5 * h * k2[i]
            if not (tmp[2] > 0 and tmp[4] > 0 and tmp[6] > 0):
                return k + 1
            _rhs(tmp, zm, wm[0], wm[1], wm[2], w20[0], w20[1], w20[2], k3)
            for i in range(8):
                tmp[i] = x[i] + h * k3[i]
            if not (tmp[2] > 0 and tmp[4] > 0 and tmp[6] > 0):
                return k + 1
            _rhs(tmp, zb, wb[0], wb[1], wb[2], w20[0], w20[1], w20[2], k4)
            for i in range(8):
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if not (x[2] > 0 and x[4] > 0 and x[6] > 0):
                return k + 1
        out[k + 1, :] = x
    return -1


def derivative(state, z0, omega2, omega2_initial) -> np.ndarray:
    """Time derivative of the 8-component state in the instantaneous trap."""
    x = np.asarray(getattr(state, "array", state), dtype=float)
    if not np.all(x[2::2] > 0):
        raise CollapseError("scaling factor is not positive")
    out = np.empty(8)
    w, w0 = np.asarray(omega2, dtype=float), np.asarray(omega2_initial, dtype=float)
    _rhs(x, float(z0), w[0], w[1], w[2], w0[0], w0[1], w0[2], out)
    return out


@dataclass(frozen=True)
class StateHistory:
    times: np.ndarray
    states: np.ndarray  # (n, 8)
    trajectory: TrapTrajectory

    def __getitem__(self, k) -> CondensateState:
        return CondensateState.from_array(self.states[k])

    @property
    def final_index(self) -> int:
        """Node index of t_f (the history may extend into a hold)."""
        return self.trajectory.transport_nodes - 1


def integrate_forward(trajectory: TrapTrajectory, initial, method: str = "verlet",
                      substeps: int = 1, omega2_initial=None) -> StateHistory:
    """Integrate Newton + scaling equations on the trajectory grid.

    ``omega2_initial`` are the frequencies defining the initial ground state;
    by default the trap at the first node.
    """
    x0 = np.asarray(getattr(initial, "array", initial), dtype=float)
    if not np.all(x0[2::2] > 0):
        raise CollapseError("initial scaling factors must be positive", 0.0)
    w20 = np.ascontiguousarray(trajectory.omega2[:, 0] if omega2_initial is None
                               else omega2_initial, dtype=float)
    z0 = np.ascontiguousarray(trajectory.z0, dtype=float)
    w2 = np.ascontiguousarray(trajectory.omega2, dtype=float)
    out = np.empty((len(z0), 8))
    kernel = {"verlet": _verlet, "rk4": _rk4}[method]
    bad = kernel(x0, z0, w2, w20, trajectory.dt, int(substeps), out)
    if bad >= 0:
        t = float(trajectory.times[bad])
        raise CollapseError(f"condensate collapse (lambda <= 0) at t = {t:.6g} s", t)
    if not np.all(np.isfinite(out)):
        raise CollapseError("non-finite state during integration")
    return StateHistory(trajectory.times, out, trajectory)


def classical_energy(states, z0, z0_dot, omega2_z, constants=RB87):
    """E_cl = m/2 (omega_z^2 (z_A - z_0)^2 + (v_A - dz_0/dt)^2), in joules."""
    x = np.asarray(getattr(states, "array", states), dtype=float)
    m = constants.atom_mass
    return 0.5 * m * (omega2_z * (x[..., 0] - z0) ** 2 + (x[..., 1] - z0_dot) ** 2)


def quantum_energy(states, omega2, ground: GroundStateSpec, constants=RB87):
    """Size energy of the TF condensate (potential + size kinetic + interaction), J."""
    x = np.asarray(getattr(states, "array", states), dtype=float)
    lam = x[..., 2::2]
    if np.any(lam <= 0):
        raise CollapseError("scaling factor is not positive")
    r = ground.radii * lam
    rdot = ground.radii * x[..., 3::2]
    w2 = np.moveaxis(np.asarray(omega2, dtype=float), 0, -1)
    m, g, N = constants.atom_mass, constants.interaction_strength, ground.atom_count
    return (m / 14 * np.sum(w2 * r**2, axis=-1) + m / 14 * np.sum(rdot**2, axis=-1)
            + 15 * g * N / (28 * math.pi * np.prod(r, axis=-1)))


def history_energies(history: StateHistory, ground: GroundStateSpec, constants=RB87):
    """(E_cl, E_qu) time series in joules."""
    tr = history.trajectory
    e_cl = classical_energy(history.states, tr.z0, tr.z0_dot, tr.omega2[2], constants)
    e_qu = quantum_energy(history.states, tr.omega2, ground, constants)
    return e_cl, e_qu


def write_history_csv(path, history: StateHistory, ground: GroundStateSpec, constants=RB87):
    e_cl, e_qu = history_energies(history, ground, constants)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "z_A", "v_A", "lambda_x", "dlambda_x", "lambda_y", "dlambda_y",
                    "lambda_z", "dlambda_z", "E_cl_nK", "E_qu_nK"])
        for t, x, a, b in zip(history.times, history.states, constants.to_nK(e_cl),
                              constants.to_nK(e_qu)):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in x), repr(float(a)), repr(float(b))])
