"""Z-wire atom-chip trap: Biot-Savart field, trap characterization, trap maps.

The chip surface is the plane z = 0. The central wire segment lies along
``wire_axis`` centred on the origin; the two legs run perpendicular to it in
the chip plane, leaving the segment ends in opposite directions (Z shape).
The bias field cancels the central wire field at a height z_0 above the chip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.interpolate import CubicSpline

from .constants import GAUSS, MU0, RB87, PhysicalConstants

HESSIAN_STEP = 1e-7  # m


class SingularGeometryError(ValueError):
    """Field requested on (or numerically at) a wire segment."""


class TrapNotFoundError(RuntimeError):
    pass


class UnstableTrapError(RuntimeError):
    pass


class MapRangeError(ValueError):
    pass


class TableParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class ChipGeometry:
    """Three-segment Z-wire plus uniform bias field.

    Lengths in metres, current in amperes, offset field in tesla. The bias
    field direction defaults to the one that cancels the central wire field
    above the chip (``+Y`` for a wire along ``+X``).
    """

    central_segment_length: float = 3.950e-3
    leg_length: float = 5.156e-3
    wire_current: float = 5.0
    wire_axis: tuple = (1.0, 0.0, 0.0)
    bias_direction: tuple | None = None
    longitudinal_offset_field: float = -0.0375 * GAUSS

    def __post_init__(self):
        if not self.wire_current > 0:
            raise ValueError("wire_current must be positive")
        if not (self.central_segment_length > 0 and self.leg_length > 0):
            raise ValueError("segment lengths must be positive")
        axis = np.asarray(self.wire_axis, dtype=float)
        if abs(axis[2]) > 1e-12 or not np.isclose(np.linalg.norm(axis), 1.0):
            raise ValueError("wire_axis must be a unit vector in the chip plane")
        if self.bias_direction is not None:
            if not np.isclose(np.linalg.norm(self.bias_direction), 1.0):
                raise ValueError("bias_direction must be a unit vector")

    @property
    def axis(self) -> np.ndarray:
        return _unit(self.wire_axis)

    @property
    def bias_unit(self) -> np.ndarray:
        if self.bias_direction is not None:
            return _unit(self.bias_direction)
        # cancels axis x z_hat, the direction of the wire field above the chip
        return -np.cross(self.axis, [0.0, 0.0, 1.0])

    def segments(self) -> np.ndarray:
        """Wire path as an array of (start, end) pairs, shape (3, 2, 3)."""
        a = self.axis
        perp = np.cross([0.0, 0.0, 1.0], a)
        half = 0.5 * self.central_segment_length * a
        leg = self.leg_length * perp
        return np.array([
            [-half + leg, -half],
            [-half, half],
            [half, half - leg],
        ])

    def uniform_field(self, bias_field: float) -> np.ndarray:
        return bias_field * self.bias_unit + self.longitudinal_offset_field * self.axis


def segment_field(points, start, end, current):
    """Biot-Savart field of a straight finite segment carrying ``current``."""
    r1 = points - start
    r2 = points - end
    n1 = np.linalg.norm(r1, axis=-1)
    n2 = np.linalg.norm(r2, axis=-1)
    cross = np.cross(r1, r2)
    prod = n1 * n2
    dot = np.sum(r1 * r2, axis=-1)
    cross2 = np.sum(cross * cross, axis=-1)
    # n1 n2 + r1.r2 cancels for points near a long segment; rewrite it via |r1 x r2|^2
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = np.where(dot < 0, cross2 / (prod - dot), prod + dot)
    # gap -> 0 when r1 and r2 are antiparallel, i.e. the point is on the segment
    if np.any(gap <= 1e-20 * np.maximum(prod, 1e-300)):
        raise SingularGeometryError("field point lies on a wire segment")
    denom = prod * gap
    factor = MU0 * current / (4 * math.pi) * (n1 + n2) / denom
    return cross * factor[..., None]


def field_at(point, geometry: ChipGeometry, bias_field: float) -> np.ndarray:
    """Total field (T) at ``point`` (shape (..., 3), metres)."""
    p = np.asarray(point, dtype=float)
    total = np.zeros(np.broadcast_shapes(p.shape, (3,)))
    for start, end in geometry.segments():
        total = total + segment_field(p, start, end, geometry.wire_current)
    return total + geometry.uniform_field(bias_field)


def field_magnitude(point, geometry, bias_field):
    return np.linalg.norm(field_at(point, geometry, bias_field), axis=-1)


@dataclass(frozen=True)
class TrapCharacterization:
    bias_field: float
    minimum_distance: float
    omega_x: float
    omega_y: float
    omega_z: float
    rotation_angle: float = 0.0
    minimum: tuple = (0.0, 0.0, 0.0)
    hessian: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([self.omega_x, self.omega_y, self.omega_z])

    def frequencies_hz(self) -> np.ndarray:
        return self.omegas / (2 * math.pi)


_STENCIL_OFFSETS = np.array(
    [[0, 0, 0]]
    + [list(s * e) for e in np.eye(3, dtype=int) for s in (1, -1)]
    + [list(si * np.eye(3, dtype=int)[i] + sj * np.eye(3, dtype=int)[j])
       for i in range(3) for j in range(i + 1, 3) for si in (1, -1) for sj in (1, -1)],
    dtype=float,
)


def fd_derivatives(f, x, h=HESSIAN_STEP):
    """Central-difference gradient and Hessian of a vectorized scalar field.

    ``f`` maps an array of points (..., 3) to values (...). All 19 stencil
    points are evaluated in one call.
    """
    x = np.asarray(x, dtype=float)
    v = f(x + h * _STENCIL_OFFSETS)
    f0 = v[0]
    plus, minus = v[1:7:2], v[2:7:2]
    grad = (plus - minus) / (2 * h)
    H = np.diag((plus - 2 * f0 + minus) / h**2)
    k = 7
    for i in range(3):
        for j in range(i + 1, 3):
            pp, pm, mp, mm = v[k:k + 4]
            H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4 * h**2)
            k += 4
    return grad, H


def fd_hessian(f, x, h=HESSIAN_STEP):
    return fd_derivatives(f, x, h)[1]


def find_minimum(geometry, bias_field, z_window=(2e-5, 2e-2)):
    """Locate the |B| minimum: golden section along the chip normal, then Newton in 3D."""
    f = lambda p: field_magnitude(p, geometry, bias_field)
    along = lambda z: float(f(np.array([0.0, 0.0, z])))

    zs = np.geomspace(*z_window, 400)
    vals = f(np.column_stack([np.zeros_like(zs), np.zeros_like(zs), zs]))
    k = int(np.argmin(vals))
    if k == 0 or k == len(zs) - 1:
        raise TrapNotFoundError(
            f"no bracketed minimum along the chip normal for B = {bias_field / GAUSS:.4g} G")
    res = optimize.minimize_scalar(along, bracket=(zs[k - 1], zs[k], zs[k + 1]),
                                   method="golden", tol=1e-12)
    x = np.array([0.0, 0.0, res.x])

    for _ in range(60):
        g, H = fd_derivatives(f, x)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise UnstableTrapError(f"singular Hessian at B = {bias_field / GAUSS:.4g} G") from exc
        # damp steps larger than a tenth of the distance to the chip
        scale = min(1.0, 0.1 * x[2] / max(np.linalg.norm(step), 1e-300))
        x = x - scale * step
        if np.linalg.norm(step) < 1e-14:
            break
    if x[2] <= 0:
        raise TrapNotFoundError("minimum refined below the chip surface")
    return x


def characterize_trap(geometry: ChipGeometry, bias_field: float,
                      constants: PhysicalConstants = RB87) -> TrapCharacterization:
    """Trap minimum, eigen-frequencies and in-plane rotation at ``bias_field`` (T)."""
    x0 = find_minimum(geometry, bias_field)
    kappa = constants.magnetic_moment
    H = kappa * fd_hessian(lambda p: field_magnitude(p, geometry, bias_field), x0)
    if np.any(np.linalg.eigvalsh(H) <= 0):
        raise UnstableTrapError(
            f"Hessian not positive definite at B = {bias_field / GAUSS:.4g} G")
    vals, vecs = np.linalg.eigh(H[:2, :2])
    hx, hy = vals  # ascending: weak axis first
    vx = vecs[:, 0]
    angle = math.atan2(vx[1], vx[0])
    if angle > math.pi / 2:
        angle -= math.pi
    elif angle <= -math.pi / 2:
        angle += math.pi
    m = constants.atom_mass
    return TrapCharacterization(
        bias_field=bias_field,
        minimum_distance=float(x0[2]),
        omega_x=math.sqrt(hx / m),
        omega_y=math.sqrt(hy / m),
        omega_z=math.sqrt(H[2, 2] / m),
        rotation_angle=angle,
        minimum=tuple(x0),
        hessian=H,
    )


def hessian_from_characterization(trap: TrapCharacterization, mass: float) -> np.ndarray:
    """Potential Hessian rebuilt from frequencies and rotation (no x-z / y-z coupling)."""
    c, s = math.cos(trap.rotation_angle), math.sin(trap.rotation_angle)
    R = np.array([[c, -s], [s, c]])
    H = np.zeros((3, 3))
    H[:2, :2] = mass * R @ np.diag([trap.omega_x**2, trap.omega_y**2]) @ R.T
    H[2, 2] = mass * trap.omega_z**2
    return H


@dataclass(frozen=True)
class TrapValues:
    """Map lookup at one or many bias values; arrays broadcast like the input."""

    bias: np.ndarray
    z0: np.ndarray
    omega2: np.ndarray  # shape (3, ...)
    dz0_dB: np.ndarray
    domega2_dB: np.ndarray  # shape (3, ...)
    angle: np.ndarray


class TrapMap:
    """Smooth interpolants of z_0(B), omega_i^2(B) and rotation angle(B).

    Piecewise cubic splines (C2), so dz_0/dB and d(omega^2)/dB are continuous.
    """

    def __init__(self, bias, z0, omega2, angle=None, samples=None):
        bias = np.asarray(bias, dtype=float)
        z0 = np.asarray(z0, dtype=float)
        omega2 = np.asarray(omega2, dtype=float).reshape(3, -1)
        if bias.ndim != 1 or len(bias) < 2:
            raise ValueError("need at least two bias samples")
        order = np.argsort(bias)
        bias, z0, omega2 = bias[order], z0[order], omega2[:, order]
        if np.any(np.diff(bias) <= 0):
            raise ValueError("bias grid must be strictly monotone")
        if np.any(z0 <= 0) or np.any(omega2 <= 0):
            raise ValueError("z0 and frequencies must be positive")
        angle = np.zeros_like(bias) if angle is None else np.asarray(angle, dtype=float)[order]
        self.bias = bias
        self.z0_samples = z0
        self.omega2_samples = omega2
        self.angle_samples = angle
        self.samples = samples
        self._z0 = CubicSpline(bias, z0)
        self._w2 = CubicSpline(bias, omega2, axis=1)
        self._angle = CubicSpline(bias, angle)
        self._dz0 = self._z0.derivative()
        self._dw2 = self._w2.derivative()

    @property
    def bias_range(self) -> tuple[float, float]:
        return float(self.bias[0]), float(self.bias[-1])

    def check_range(self, B, times=None):
        B = np.asarray(B, dtype=float)
        lo, hi = self.bias_range
        tol = 1e-12 * hi
        bad = np.flatnonzero((B < lo - tol) | (B > hi + tol))
        if bad.size:
            k = int(bad[0])
            where = f" at time node {k}" + (f" (t = {times[k]:.6g} s)" if times is not None else "")
            raise MapRangeError(
                f"bias {np.ravel(B)[k] / GAUSS:.6g} G outside map range "
                f"[{lo / GAUSS:.4g}, {hi / GAUSS:.4g}] G{where}")

    def __call__(self, B) -> TrapValues:
        B = np.asarray(B, dtype=float)
        self.check_range(np.ravel(B))
        return TrapValues(B, self._z0(B), self._w2(B), self._dz0(B), self._dw2(B), self._angle(B))

    def z0(self, B):
        return self._z0(B)

    def omega2(self, B):
        return self._w2(B)

    def characterization(self, B) -> TrapCharacterization:
        v = self(float(B))
        z0, w2, angle = v.z0, v.omega2, v.angle
        hit = np.flatnonzero(self.bias == float(B))
        if hit.size:  # spline evaluation at the right end of an interval is not bitwise exact
            k = int(hit[0])
            z0, w2, angle = self.z0_samples[k], self.omega2_samples[:, k], self.angle_samples[k]
        w = np.sqrt(w2)
        return TrapCharacterization(float(B), float(z0), float(w[0]), float(w[1]),
                                    float(w[2]), float(angle))

    def save(self, path):
        """Write the map in the plain-text tabulated format (plus an angle column)."""
        f = np.sqrt(self.omega2_samples) / (2 * math.pi)
        data = np.column_stack([self.bias / GAUSS, self.z0_samples * 1e3, f.T, self.angle_samples])
        np.savetxt(path, data, fmt="%.17g",
                   header="B_gauss  z0_mm  fx_Hz  fy_Hz  fz_Hz  angle_rad")


def build_trap_map(geometry: ChipGeometry, bias_range, sample_count: int = 128,
                   constants: PhysicalConstants = RB87) -> TrapMap:
    """Characterize the trap on a uniform bias grid and interpolate."""
    if sample_count < 16:
        raise ValueError("sample_count must be at least 16")
    lo, hi = sorted(bias_range)
    grid = np.linspace(lo, hi, sample_count)
    samples = []
    for B in grid:
        try:
            samples.append(characterize_trap(geometry, B, constants))
        except (TrapNotFoundError, UnstableTrapError) as exc:
            raise type(exc)(f"{exc} (while building map, B = {B / GAUSS:.6g} G)") from exc
    z0 = [s.minimum_distance for s in samples]
    w2 = np.array([s.omegas**2 for s in samples]).T
    angle = np.unwrap([s.rotation_angle for s in samples], period=math.pi)
    return TrapMap(grid, z0, w2, angle, samples=samples)


def load_tabulated_map(path) -> TrapMap:
    """Read ``B_gauss z0_mm fx_Hz fy_Hz fz_Hz [angle_rad]`` rows; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) not in (5, 6):
            raise TableParseError(f"expected 5 or 6 columns, got {len(parts)}", lineno)
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise TableParseError(f"non-numeric entry: {exc}", lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise TableParseError("non-finite entry", lineno)
        if vals[1] <= 0:
            raise TableParseError("z0 must be positive", lineno)
        if min(vals[2:5]) <= 0:
            raise TableParseError("frequencies must be positive", lineno)
        if rows and vals[0] <= rows[-1][1][0]:
            raise TableParseError("bias column must be strictly increasing", lineno)
        rows.append((lineno, vals + [0.0] * (6 - len(vals))))
    if len(rows) < 2:
        raise TableParseError("need at least two data rows")
    data = np.array([r[1] for r in rows])
    return TrapMap(
        data[:, 0] * GAUSS,
        data[:, 1] * 1e-3,
        (2 * math.pi * data[:, 2:5].T) ** 2,
        data[:, 5],
    )


# Endpoint anchors (bias, z0, fx, fy, fz) in SI and Hz.
# Kept in table units (G, mm, Hz) so a table read back converts them by the same operations.
ANCHOR_ROWS = (
    (4.5, 1.65, 10.0, 32.0, 32.0),
    (21.5, 0.45, 15.0, 616.0, 616.0),
)
ENDPOINT_ANCHORS = tuple((b * GAUSS, z * 1e-3, fx, fy, fz) for b, z, fx, fy, fz in ANCHOR_ROWS[::-1])


def anchor_errors(trap: TrapCharacterization, anchor) -> np.ndarray:
    """Relative errors of (z0, fx, fy, fz) against one anchor."""
    _, z0, fx, fy, fz = anchor
    # compare angular frequencies along the same sqrt((2 pi f)^2) path a table takes
    want_w = np.sqrt((2 * math.pi * np.array([fx, fy, fz])) ** 2)
    return np.concatenate([[trap.minimum_distance / z0 - 1], trap.omegas / want_w - 1])


def calibrate_geometry(initial: ChipGeometry | None = None, anchors=ENDPOINT_ANCHORS,
                       constants: PhysicalConstants = RB87, sweeps: int = 12,
                       step: float = 0.2) -> ChipGeometry:
    """Coordinate descent on (central length, leg length, offset field).

    Minimizes the summed squared log-ratios of z0 and the three frequencies
    at the anchor bias values. Lengths are varied multiplicatively, the
    offset field additively in units of 1 G.
    """
    geom = initial or ChipGeometry()

    def loss(g):
        total = 0.0
        for anchor in anchors:
            try:
                trap = characterize_trap(g, anchor[0], constants)
            except (TrapNotFoundError, UnstableTrapError):
                return math.inf
            total += float(np.sum(np.log1p(anchor_errors(trap, anchor)) ** 2))
        return total

    def moved(g, k, delta):
        if k == 0:
            return _replace(g, central_segment_length=g.central_segment_length * math.exp(delta))
        if k == 1:
            return _replace(g, leg_length=g.leg_length * math.exp(delta))
        return _replace(g, longitudinal_offset_field=g.longitudinal_offset_field + delta * GAUSS)

    best = loss(geom)
    for _ in range(sweeps):
        improved = False
        for k in range(3):
            for sign in (1, -1):
                cand = moved(geom, k, sign * step)
                c = loss(cand)
                if c < best:
                    geom, best, improved = cand, c, True
                    break
        if not improved:
            step *= 0.5
    return geom


def _replace(g: ChipGeometry, **kw) -> ChipGeometry:
    return replace(g, **kw)


def write_anchor_table(path, rows=ANCHOR_ROWS):
    """Tabulated map holding only the endpoint anchors (linear in between)."""
    rows = sorted(rows)
    np.savetxt(path, rows, fmt="%.17g", header="B_gauss  z0_mm  fx_Hz  fy_Hz  fz_Hz")
