"""Control ramps u(t), the smooth bias-field parametrization and trap trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.polynomial import Polynomial
from scipy import optimize

from .constants import GAUSS
from .trap import TrapMap

B_INITIAL = 21.5 * GAUSS
B_FINAL = 4.5 * GAUSS
MIN_NODES = 64
DEFAULT_NODES = 2048


class InfeasibleSTAError(RuntimeError):
    pass


@dataclass(frozen=True)
class ControlRamp:
    """Dimensionless control sampled on ``t_k = k t_f / (n - 1)``."""

    final_time: float
    u_values: np.ndarray
    u_start: float = 0.0
    u_end: float = 1.0
    bias_start: float = B_INITIAL
    bias_end: float = B_FINAL

    def __post_init__(self):
        u = np.array(self.u_values, dtype=float)
        u.setflags(write=False)
        object.__setattr__(self, "u_values", u)
        if not self.final_time > 0:
            raise ValueError("final_time must be positive")
        if u.ndim != 1 or len(u) < 2:
            raise ValueError("u_values must be a 1-D array with at least two nodes")
        if self.u_end == self.u_start:
            raise ValueError("u_end must differ from u_start")
        if u[0] != self.u_start or u[-1] != self.u_end:
            raise ValueError("u_values must start at u_start and end at u_end")

    @property
    def node_count(self) -> int:
        return len(self.u_values)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.final_time, self.node_count)

    @property
    def dt(self) -> float:
        return self.final_time / (self.node_count - 1)

    def with_values(self, u) -> "ControlRamp":
        return replace(self, u_values=np.asarray(u, dtype=float))

    def resampled(self, node_count: int) -> "ControlRamp":
        t_new = np.linspace(0.0, self.final_time, node_count)
        u = np.interp(t_new, self.times, self.u_values)
        u[0], u[-1] = self.u_start, self.u_end
        return self.with_values(u)

    def bias(self) -> np.ndarray:
        return smoothstep_bias(self.u_values, self)

    def save(self, path):
        header = (f"t_f={self.final_time!r} u_0={self.u_start!r} u_f={self.u_end!r} "
                  f"B_i_gauss={self.bias_start / GAUSS!r} B_f_gauss={self.bias_end / GAUSS!r}\n"
                  "t_seconds  u_value")
        np.savetxt(path, np.column_stack([self.times, self.u_values]), fmt="%.17g", header=header)

    @classmethod
    def load(cls, path) -> "ControlRamp":
        meta = {}
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = float(v)
        data = np.loadtxt(path, ndmin=2)
        t, u = data[:, 0], data[:, 1]
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"{path}: time column must be increasing")
        n = len(t)
        tf = meta.get("t_f", float(t[-1]))
        grid = np.linspace(0.0, tf, n)
        if not np.allclose(t, grid, rtol=0, atol=1e-9 * tf):
            u = np.interp(grid, t, u)
        return cls(
            final_time=tf,
            u_values=u,
            u_start=meta.get("u_0", float(u[0])),
            u_end=meta.get("u_f", float(u[-1])),
            bias_start=meta.get("B_i_gauss", B_INITIAL / GAUSS) * GAUSS,
            bias_end=meta.get("B_f_gauss", B_FINAL / GAUSS) * GAUSS,
        )


def _smoothstep(s):
    return s**3 * (10 - 15 * s + 6 * s**2)


def _smoothstep_slope(s):
    return 30 * s**2 * (1 - s) ** 2


def smoothstep_bias(u, ramp: ControlRamp):
    """B(u) = B_i + (B_f - B_i)(10 s^3 - 15 s^4 + 6 s^5), s = (u - u_0)/(u_f - u_0)."""
    s = (np.asarray(u, dtype=float) - ramp.u_start) / (ramp.u_end - ramp.u_start)
    return ramp.bias_start + (ramp.bias_end - ramp.bias_start) * _smoothstep(s)


def smoothstep_bias_slope(u, ramp: ControlRamp):
    """dB/du of :func:`smoothstep_bias`; zero at s = 0 and s = 1."""
    span = ramp.u_end - ramp.u_start
    s = (np.asarray(u, dtype=float) - ramp.u_start) / span
    return (ramp.bias_end - ramp.bias_start) * _smoothstep_slope(s) / span


def inverse_smoothstep_bias(B, ramp: ControlRamp) -> float:
    """Control value u giving bias ``B``. The quintic is monotone on the real line."""
    target = (B - ramp.bias_start) / (ramp.bias_end - ramp.bias_start)
    if target == 0.0:
        s = 0.0
    elif target == 1.0:
        s = 1.0
    else:
        s = optimize.brentq(lambda s: _smoothstep(s) - target, -2.0, 3.0, xtol=1e-15, rtol=1e-15)
    return ramp.u_start + s * (ramp.u_end - ramp.u_start)


def time_derivative(values, dt):
    """Second-order central differences, one-sided second order at both ends."""
    return np.gradient(values, dt, axis=-1, edge_order=2)


@dataclass(frozen=True)
class TrapTrajectory:
    """Trap parameters on the ramp grid (optionally extended by a static hold)."""

    times: np.ndarray
    bias: np.ndarray
    z0: np.ndarray
    z0_dot: np.ndarray
    omega2: np.ndarray  # (3, n)
    dB_du: np.ndarray
    dz0_dB: np.ndarray
    domega2_dB: np.ndarray  # (3, n)
    final_time: float
    z0_ddot: np.ndarray = field(default=None, repr=False)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def node_count(self) -> int:
        return len(self.times)

    @property
    def transport_nodes(self) -> int:
        """Number of nodes in [0, t_f]."""
        return int(round(self.final_time / self.dt)) + 1

    def with_hold(self, duration: float) -> "TrapTrajectory":
        """Append a static hold at the final trap for ``duration`` seconds."""
        extra = int(round(duration / self.dt))
        if extra <= 0:
            return self
        n = self.node_count
        times = self.times[0] + self.dt * np.arange(n + extra)

        def hold(a, fill=None):
            last = a[..., -1:] if fill is None else np.full(a[..., -1:].shape, fill)
            return np.concatenate([a, np.repeat(last, extra, axis=-1)], axis=-1)

        return replace(
            self, times=times, bias=hold(self.bias), z0=hold(self.z0),
            z0_dot=hold(self.z0_dot, 0.0), omega2=hold(self.omega2), dB_du=hold(self.dB_du, 0.0),
            dz0_dB=hold(self.dz0_dB), domega2_dB=hold(self.domega2_dB),
            z0_ddot=None if self.z0_ddot is None else hold(self.z0_ddot, 0.0),
        )


def ramp_to_trajectory(ramp: ControlRamp, trap_map: TrapMap) -> TrapTrajectory:
    """Bias field, trap position/frequencies and their B-derivatives along the ramp."""
    if ramp.node_count < MIN_NODES:
        raise ValueError(f"ramp needs at least {MIN_NODES} nodes, has {ramp.node_count}")
    times = ramp.times
    B = smoothstep_bias(ramp.u_values, ramp)
    trap_map.check_range(B, times)
    v = trap_map(B)
    dt = ramp.dt
    z0_dot = time_derivative(v.z0, dt)
    return TrapTrajectory(
        times=times, bias=B, z0=v.z0, z0_dot=z0_dot, omega2=v.omega2,
        dB_du=smoothstep_bias_slope(ramp.u_values, ramp), dz0_dB=v.dz0_dB,
        domega2_dB=v.domega2_dB, final_time=ramp.final_time,
        z0_ddot=time_derivative(z0_dot, dt),
    )


def static_trajectory(trap_map: TrapMap, bias: float, duration: float, node_count: int):
    """Trajectory of a trap held at a fixed bias value."""
    times = np.linspace(0.0, duration, node_count)
    v = trap_map(np.full(node_count, bias))
    zeros = np.zeros(node_count)
    return TrapTrajectory(times, v.bias, v.z0, zeros, v.omega2, zeros, v.dz0_dB,
                          v.domega2_dB, duration, zeros.copy())


def linear_ramp(final_time: float, node_count: int = DEFAULT_NODES, **kw) -> ControlRamp:
    """u(t) = t / t_f."""
    if not final_time > 0:
        raise ValueError("final_time must be positive")
    u = np.linspace(0.0, 1.0, node_count)
    return ControlRamp(final_time, u, 0.0, 1.0, **kw)


def transport_polynomial(order: int = 4) -> Polynomial:
    """P on [0, 1] with P(0) = 0, P(1) = 1 and derivatives 1..order zero at both ends.

    P' is proportional to x^order (1 - x)^order, so P has degree 2 order + 1.
    """
    x = Polynomial([0.0, 1.0])
    Q = (x**order * (1 - x) ** order).integ()
    return Q / Q(1.0)


# z''' = z'''' = 0 at the ends keeps dB/dt and d2B/dt2 zero there
STA_ORDER = 4


def sta_atom_trajectory(final_time, z_start, z_end, times):
    """Imposed atom position and acceleration (degree-9 polynomial)."""
    P = transport_polynomial(STA_ORDER)
    tau = np.asarray(times) / final_time
    D = z_end - z_start
    return z_start + D * P(tau), D * P.deriv(2)(tau) / final_time**2


def sta_ramp(final_time: float, trap_map: TrapMap, node_count: int = DEFAULT_NODES,
             bias_start: float = B_INITIAL, bias_end: float = B_FINAL) -> ControlRamp:
    """Reverse-engineered ramp: the trap leads the imposed atom path by z_A''/omega_z^2."""
    if not final_time > 0:
        raise ValueError("final_time must be positive")
    shell = ControlRamp(final_time, np.linspace(0.0, 1.0, 2), 0.0, 1.0, bias_start, bias_end)
    times = np.linspace(0.0, final_time, node_count)
    z_start, z_end = (float(trap_map.z0(b)) for b in (bias_start, bias_end))
    zA, zA_dd = sta_atom_trajectory(final_time, z_start, z_end, times)
    lo, hi = trap_map.bias_range

    def residual(B, k):
        return float(trap_map.z0(B)) - zA_dd[k] / float(trap_map.omega2(B)[2]) - zA[k]

    u = np.empty(node_count)
    u[0], u[-1] = 0.0, 1.0
    for k in range(1, node_count - 1):
        f_lo, f_hi = residual(lo, k), residual(hi, k)
        if f_lo * f_hi > 0:
            raise InfeasibleSTAError(
                f"no bias root at node {k} (t = {times[k]:.6g} s); t_f = {final_time:.6g} s too short")
        B = optimize.brentq(residual, lo, hi, args=(k,), xtol=1e-15, rtol=1e-15)
        u[k] = inverse_smoothstep_bias(B, shell)
    return ControlRamp(final_time, u, 0.0, 1.0, bias_start, bias_end)
