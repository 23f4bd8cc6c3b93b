"""3D Gross-Pitaevskii propagation used to check the scaling-theory predictions.

The wave function is normalized to one; the mean-field term is g N |psi|^2.
Propagation uses Strang splitting: half potential, full kinetic (spectral),
half potential. Consecutive potential half steps are fused since they do not
change |psi|^2.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import fft

from .constants import GAUSS, RB87, PhysicalConstants
from .dynamics import (HOLD_TIME, CondensateState, GroundStateSpec, StateHistory,
                       integrate_forward, tf_ground_state)
from .ramp import ControlRamp, ramp_to_trajectory, sta_ramp
from .trap import ChipGeometry, SingularGeometryError, TrapMap, field_magnitude, find_minimum

log = logging.getLogger(__name__)

POTENTIAL_SAMPLES = 64


class NumericalInstabilityError(RuntimeError):
    pass


class GroundStateError(RuntimeError):
    def __init__(self, message, energies=()):
        super().__init__(message)
        self.energies = list(energies)


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationGrid:
    """Uniform periodic box. ``extents`` are full widths, ``center`` the box middle."""

    extents: tuple
    counts: tuple
    center: tuple = (0.0, 0.0, 0.0)
    dt: float = 1e-6
    threads: int = 1

    def __post_init__(self):
        if len(self.extents) != 3 or len(self.counts) != 3 or len(self.center) != 3:
            raise GridError("grid needs three extents, counts and center coordinates")
        for n in self.counts:
            if n < 32 or n & (n - 1):
                raise GridError(f"point counts must be powers of two >= 32, got {n}")
        if min(self.extents) <= 0 or not self.dt > 0:
            raise GridError("extents and dt must be positive")

    @property
    def spacing(self) -> np.ndarray:
        return np.array(self.extents, dtype=float) / np.array(self.counts)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list:
        return [c + d * (np.arange(n) - n // 2)
                for c, d, n in zip(self.center, self.spacing, self.counts)]

    def mesh(self):
        return np.meshgrid(*self.axes(), indexing="ij", sparse=True)

    def points(self) -> np.ndarray:
        X, Y, Z = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def wavenumbers_squared(self, real: bool = False) -> np.ndarray:
        """k^2 on the FFT grid; ``real`` gives the half grid of rfftn."""
        ks = [2 * math.pi * fft.fftfreq(n, d) for n, d in zip(self.counts, self.spacing)]
        if real:
            ks[-1] = 2 * math.pi * fft.rfftfreq(self.counts[-1], self.spacing[-1])
        kx, ky, kz = np.meshgrid(*ks, indexing="ij", sparse=True)
        return kx**2 + ky**2 + kz**2

    def check_coverage(self, z_range, radius):
        """Box must hold the transport path plus four times the largest TF radius."""
        lo, hi = min(z_range), max(z_range)
        need = np.array([4 * radius, 4 * radius, hi - lo + 4 * radius])
        short = np.flatnonzero(np.array(self.extents) < need * (1 - 1e-12))
        if short.size:
            raise GridError(f"grid extent along axis {int(short[0])} is "
                            f"{self.extents[short[0]]:.4g} m, need {need[short[0]]:.4g} m")
        z = self.axes()[2]
        if z[0] > lo - 2 * radius or z[-1] < hi + 2 * radius:
            raise GridError("grid is not centred on the transport path")


@dataclass
class WaveField:
    psi: np.ndarray
    grid: SimulationGrid

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.psi) ** 2) * self.grid.cell_volume)

    def density(self) -> np.ndarray:
        return np.abs(self.psi) ** 2


@dataclass
class MarginalRecord:
    times: list = field(default_factory=list)
    axes: list = field(default_factory=list)
    marginals: list = field(default_factory=lambda: [[], [], []])
    com: list = field(default_factory=list)
    sigma: list = field(default_factory=list)

    def add(self, t: float, density: np.ndarray, grid: SimulationGrid):
        if not self.axes:
            self.axes = grid.axes()
        dx = grid.spacing
        com, sig = [], []
        for a in range(3):
            other = tuple(b for b in range(3) if b != a)
            p = density.sum(axis=other) * (grid.cell_volume / dx[a])
            x = self.axes[a]
            mu = float(np.sum(x * p) * dx[a])
            var = float(np.sum((x - mu) ** 2 * p) * dx[a])
            self.marginals[a].append(p)
            com.append(mu)
            sig.append(math.sqrt(max(var, 0.0)))
        self.times.append(float(t))
        self.com.append(com)
        self.sigma.append(sig)

    def arrays(self):
        return np.array(self.times), np.array(self.com), np.array(self.sigma)

    def write_csv(self, directory, prefix: str = "gpe"):
        """Per-axis marginals (t, coordinate, density) and a summary table."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for a, name in enumerate("xyz"):
            with open(out / f"{prefix}_marginal_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", name, "density"])
                for t, p in zip(self.times, self.marginals[a]):
                    for x, v in zip(self.axes[a], p):
                        w.writerow([repr(t), repr(float(x)), repr(float(v))])
        with open(out / f"{prefix}_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "com_x", "com_y", "com_z", "sigma_x", "sigma_y", "sigma_z"])
            for t, c, s in zip(self.times, self.com, self.sigma):
                w.writerow([repr(t), *(repr(float(v)) for v in (*c, *s))])


# --- potentials -------------------------------------------------------------

def chip_potential(grid: SimulationGrid, geometry: ChipGeometry, bias_field: float,
                   constants: PhysicalConstants = RB87) -> np.ndarray:
    """kappa (|B(r)| - |B_min|) on the grid (J)."""
    if grid.axes()[2][0] <= 0:
        raise SingularGeometryError("grid reaches the chip plane z <= 0")
    pts = grid.points()
    Bmag = field_magnitude(pts, geometry, bias_field)
    Bmin = float(field_magnitude(find_minimum(geometry, bias_field), geometry, bias_field))
    return constants.magnetic_moment * (Bmag - Bmin)


def _quadratic_coefficients(z0, omega2, angle, mass):
    """(a_xx, a_xy, a_yy, a_zz, z0) with V = a_xx x^2 + 2 a_xy x y + a_yy y^2 + a_zz (z - z0)^2."""
    c, s = math.cos(angle), math.sin(angle)
    wx, wy, wz = (float(v) for v in np.asarray(omega2, dtype=float))
    half = 0.5 * mass
    return (half * (wx * c * c + wy * s * s), half * (wx - wy) * c * s,
            half * (wx * s * s + wy * c * c), half * wz, float(z0))


def harmonic_potential(grid: SimulationGrid, z0: float, omega2, angle: float = 0.0,
                       constants: PhysicalConstants = RB87) -> np.ndarray:
    """(m/2) sum omega_i^2 q_i^2 about (0, 0, z0), the weak axis rotated by ``angle`` in-plane."""
    X, Y, Z = grid.mesh()
    axx, axy, ayy, azz, zc = _quadratic_coefficients(z0, omega2, angle, constants.atom_mass)
    return axx * X**2 + 2 * axy * X * Y + ayy * Y**2 + azz * (Z - zc) ** 2


@numba.njit(cache=True)
def _phase_grid(psi, va, vb, w, gN, c):
    """psi *= exp(-i c (V + gN |psi|^2)) with V = (1-w) va + w vb; returns sum |psi|^2."""
    p = psi.reshape(-1)
    a = va.reshape(-1)
    b = vb.reshape(-1)
    total = 0.0
    for i in range(p.size):
        z = p[i]
        d = z.real * z.real + z.imag * z.imag
        total += d
        phi = c * ((1.0 - w) * a[i] + w * b[i] + gN * d)
        p[i] = z * complex(math.cos(phi), -math.sin(phi))
    return total


@numba.njit(cache=True)
def _phase_quadratic(psi, x, y, z, axx, axy, ayy, azz, z0, gN, c):
    total = 0.0
    for i in range(x.size):
        for j in range(y.size):
            vxy = axx * x[i] * x[i] + 2.0 * axy * x[i] * y[j] + ayy * y[j] * y[j]
            for k in range(z.size):
                q = psi[i, j, k]
                d = q.real * q.real + q.imag * q.imag
                total += d
                phi = c * (vxy + azz * (z[k] - z0) ** 2 + gN * d)
                psi[i, j, k] = q * complex(math.cos(phi), -math.sin(phi))
    return total


class ChipPotentialCache:
    """Chip potential sampled at evenly spaced bias values, linear in B in between."""

    def __init__(self, grid, geometry, bias_range, samples: int = POTENTIAL_SAMPLES,
                 constants: PhysicalConstants = RB87):
        self.grid, self.geometry, self.constants = grid, geometry, constants
        self.bias = np.linspace(min(bias_range), max(bias_range), samples)
        self._cache = {}

    def _sample(self, k: int) -> np.ndarray:
        if k not in self._cache:
            self._cache[k] = chip_potential(self.grid, self.geometry, self.bias[k], self.constants)
        return self._cache[k]

    def _bracket(self, B):
        b = self.bias
        if B <= b[0]:
            return 0, 0, 0.0
        if B >= b[-1]:
            return len(b) - 1, len(b) - 1, 0.0
        k = int(np.searchsorted(b, B) - 1)
        return k, k + 1, (B - b[k]) / (b[k + 1] - b[k])

    def __call__(self, B: float) -> np.ndarray:
        i, j, w = self._bracket(B)
        return (1 - w) * self._sample(i) + w * self._sample(j)

    def phase_step(self, psi, B, gN, c) -> float:
        i, j, w = self._bracket(B)
        return _phase_grid(psi, self._sample(i), self._sample(j), w, gN, c)


class MapHarmonicPotential:
    """Harmonic limit of the chip trap built from map interpolants (evaluated exactly)."""

    def __init__(self, grid, trap_map: TrapMap, constants: PhysicalConstants = RB87):
        self.grid, self.map, self.constants = grid, trap_map, constants
        self._axes = grid.axes()

    def coefficients(self, B):
        v = self.map(float(B))
        return _quadratic_coefficients(float(v.z0), v.omega2, float(v.angle),
                                       self.constants.atom_mass)

    def __call__(self, B: float) -> np.ndarray:
        v = self.map(float(B))
        return harmonic_potential(self.grid, float(v.z0), v.omega2, float(v.angle), self.constants)

    def phase_step(self, psi, B, gN, c) -> float:
        return _phase_quadratic(psi, *self._axes, *self.coefficients(B), gN, c)


# --- ground state and propagation ------------------------------------------

def _kinetic(grid, constants, real=False):
    return constants.reduced_planck**2 / (2 * constants.atom_mass) * grid.wavenumbers_squared(real)


def energy_per_particle(field: WaveField, potential, constants=RB87) -> float:
    g = field.grid
    psi = field.psi
    T = _kinetic(g, constants)
    psik = fft.fftn(psi, workers=g.threads)
    n = psi.size
    kin = float(np.sum(T * np.abs(psik) ** 2)) / n * g.cell_volume
    dens = np.abs(psi) ** 2
    gN = constants.interaction_strength * constants.atom_count
    pot = float(np.sum((potential + 0.5 * gN * dens) * dens)) * g.cell_volume
    return kin + pot


def thomas_fermi_field(grid, potential, constants=RB87) -> WaveField:
    """Normalized TF profile for ``potential`` (chemical potential fixed by the norm)."""
    gN = constants.interaction_strength * constants.atom_count
    V = potential - potential.min()

    def norm_for(mu):
        return float(np.sum(np.clip(mu - V, 0, None)) / gN * grid.cell_volume)

    lo, hi = 0.0, float(V.max())
    if norm_for(hi) < 1:
        raise GridError("grid too small to hold the Thomas-Fermi profile")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if norm_for(mid) < 1 else (lo, mid)
    psi = np.sqrt(np.clip(hi - V, 0, None) / gN)
    f = WaveField(psi, grid)
    f.psi /= math.sqrt(f.norm)
    return f


def imaginary_time_ground_state(grid: SimulationGrid, potential: np.ndarray,
                                constants: PhysicalConstants = RB87, dt: float = 1e-5,
                                tol: float = 1e-10, max_steps: int = 50_000,
                                initial: WaveField | None = None) -> WaveField:
    """Relax in imaginary time until the relative energy change per step is below ``tol``.

    The field is kept real (the ground state of a real potential is), which
    allows real-to-complex transforms.
    """
    hbar = constants.reduced_planck
    gN = constants.interaction_strength * constants.atom_count
    field = initial if initial is not None else thomas_fermi_field(grid, potential, constants)
    psi = np.ascontiguousarray(np.real(field.psi), dtype=float)
    shape = psi.shape
    kin = np.exp(-_kinetic(grid, constants, real=True) * dt / hbar)
    dV = grid.cell_volume
    half = 0.5 * dt / hbar
    energies = [energy_per_particle(WaveField(psi, grid), potential, constants)]
    every = 10
    for step in range(1, max_steps + 1):
        psi *= np.exp(-(potential + gN * psi * psi) * half)
        psi = fft.irfftn(fft.rfftn(psi, workers=grid.threads) * kin, s=shape,
                         workers=grid.threads)
        psi *= np.exp(-(potential + gN * psi * psi) * half)
        psi /= math.sqrt(float(np.sum(psi * psi)) * dV)
        if step % every == 0:
            energies.append(energy_per_particle(WaveField(psi, grid), potential, constants))
            change = abs(energies[-1] - energies[-2]) / (every * abs(energies[-1]))
            if change < tol:
                out = WaveField(psi.astype(complex), grid)
                out.energies = energies
                return out
    raise GroundStateError(f"imaginary-time relaxation did not converge in {max_steps} steps "
                           f"(last energies {energies[-3:]})", energies)


def propagate(ramp: ControlRamp, potential_model, field: WaveField, grid: SimulationGrid | None = None,
              record_every: int = 100, hold: float = HOLD_TIME,
              constants: PhysicalConstants = RB87, norm_tol: float = 1e-6) -> MarginalRecord:
    """Real-time Strang split-step over [0, t_f + hold]; B(t) follows the ramp then stays at B_f.

    ``potential_model.phase_step(psi, B, gN, c)`` multiplies psi in place by
    exp(-i c (V_B + gN |psi|^2)) and returns sum |psi|^2.
    """
    grid = grid or field.grid
    hbar = constants.reduced_planck
    gN = constants.interaction_strength * constants.atom_count
    dt = grid.dt
    steps = int(round((ramp.final_time + hold) / dt))
    times, bias = ramp.times, ramp.bias()

    def B_at(t):
        return float(np.interp(min(t, ramp.final_time), times, bias))

    kin = np.exp(-1j * _kinetic(grid, constants) * dt / hbar)
    psi = np.ascontiguousarray(field.psi, dtype=complex).copy()
    dV = grid.cell_volume
    rec = MarginalRecord()
    rec.add(0.0, np.abs(psi) ** 2, grid)
    potential_model.phase_step(psi, B_at(0.0), gN, 0.5 * dt / hbar)
    for k in range(1, steps + 1):
        psi = fft.ifftn(fft.fftn(psi, workers=grid.threads, overwrite_x=True) * kin,
                        workers=grid.threads, overwrite_x=True)
        t = k * dt
        if k % record_every == 0 or k == steps:
            rec.add(t, np.abs(psi) ** 2, grid)
        # closing half step at t fused with the opening half of the next one
        c = (0.5 if k == steps else 1.0) * dt / hbar
        norm = potential_model.phase_step(psi, B_at(t), gN, c) * dV
        if abs(norm - 1.0) > norm_tol or not math.isfinite(norm):
            raise NumericalInstabilityError(
                f"norm drifted to {norm!r} at step {k} (t = {t:.6g} s)")
    field.psi = psi
    return rec


@dataclass(frozen=True)
class ScalingComparison:
    times: np.ndarray
    com_deviation: np.ndarray  # (n,), m, GPE minus z_A
    width_relative_deviation: np.ndarray  # (n, 3)
    transport_distance: float

    @property
    def max_com_fraction(self) -> float:
        return float(np.max(np.abs(self.com_deviation))) / self.transport_distance

    @property
    def max_width_deviation(self) -> float:
        return float(np.max(np.abs(self.width_relative_deviation)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "com_dev_z", "width_dev_x", "width_dev_y", "width_dev_z"])
            for t, c, d in zip(self.times, self.com_deviation, self.width_relative_deviation):
                w.writerow([repr(float(t)), repr(float(c)), *(repr(float(v)) for v in d)])


def compare_with_scaling(record: MarginalRecord, history: StateHistory,
                         ground: GroundStateSpec) -> ScalingComparison:
    """Deviation of GPE centre of mass from z_A and of widths from r_i(0) lambda_i / sqrt 7."""
    t, com, sigma = record.arrays()
    ht = history.times
    if t[-1] > ht[-1] * (1 + 1e-9) or t[0] < ht[0] - 1e-12:
        raise ValueError("record extends beyond the scaling history")
    zA = np.interp(t, ht, history.states[:, 0])
    lam = np.column_stack([np.interp(t, ht, history.states[:, i]) for i in (2, 4, 6)])
    predicted = lam * ground.radii / math.sqrt(7.0)
    tr = history.trajectory
    distance = abs(float(tr.z0[history.final_index] - tr.z0[0]))
    return ScalingComparison(t, com[:, 2] - zA, sigma / predicted - 1.0, distance)


# --- reduced-scale harmonic scenario ---------------------------------------

@dataclass(frozen=True)
class HarmonicScenario:
    trap_map: TrapMap
    ramp: ControlRamp
    grid: SimulationGrid
    hold: float


def harmonic_scenario(distance: float = 10e-6, final_time: float = 0.04, hold: float = 0.02,
                      start_frequencies=(30.0, 45.0, 40.0), end_frequencies=(22.0, 35.0, 30.0),
                      points: int = 64, dt: float = 1e-6, threads: int = 1,
                      constants: PhysicalConstants = RB87) -> HarmonicScenario:
    """Short transport in a synthetic harmonic trap resolvable on a ``points``^3 grid.

    z_0 shifts linearly in B by ``distance`` and the frequencies (Hz) are
    interpolated linearly between the end points. The ramp is the STA ramp of
    this map: the centre of mass moves smoothly while the frequency change
    excites breathing. Peak atom speeds must stay well below the grid's
    Nyquist speed pi hbar / (m dx), which is about 2 mm/s for Rb-87 at 1 um.
    """
    B = np.linspace(4.5, 21.5, 32) * GAUSS
    s = (B - B[0]) / (B[-1] - B[0])  # 0 at B_f, 1 at B_i
    z_start = 100e-6
    z0 = z_start + distance * (1 - s)
    f = np.outer(end_frequencies, 1 - s) + np.outer(start_frequencies, s)
    trap_map = TrapMap(B, z0, (2 * math.pi * f) ** 2)
    ramp = sta_ramp(final_time, trap_map, 2048)
    radius = float(max(tf_ground_state(2 * math.pi * np.asarray(fr), constants).radii.max()
                       for fr in (start_frequencies, end_frequencies)))
    side = 4.4 * radius
    grid = SimulationGrid((side, side, distance + side), (points,) * 3,
                          (0.0, 0.0, z_start + 0.5 * distance), dt, threads)
    grid.check_coverage((z_start, z_start + distance), radius)
    return HarmonicScenario(trap_map, ramp, grid, hold)


@dataclass(frozen=True)
class VerificationReport:
    comparison: ScalingComparison
    record: MarginalRecord
    history: StateHistory
    ground: GroundStateSpec
    initial_sigma: np.ndarray


def run_verification(ramp: ControlRamp, trap_map: TrapMap, grid: SimulationGrid, potential_model,
                     hold: float = HOLD_TIME, record_every: int = 500,
                     constants: PhysicalConstants = RB87) -> VerificationReport:
    """Ground state in the initial potential, propagate, integrate scaling, compare."""
    V0 = potential_model(float(ramp.bias()[0]))  # full grid, only needed once
    field = imaginary_time_ground_state(grid, V0, constants)
    rec = propagate(ramp, potential_model, field, grid, record_every, hold, constants)
    tr = ramp_to_trajectory(ramp, trap_map).with_hold(hold)
    hist = integrate_forward(tr, CondensateState.at_rest(tr.z0[0]), "rk4", 4)
    ground = tf_ground_state(np.sqrt(tr.omega2[:, 0]), constants)
    cmp = compare_with_scaling(rec, hist, ground)
    return VerificationReport(cmp, rec, hist, ground, np.array(rec.sigma[0]))
