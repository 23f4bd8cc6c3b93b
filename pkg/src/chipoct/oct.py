"""Pontryagin gradient optimization of the bias ramp.

Cost: C = l1 E_cl(t_f) + l2 E_qu(t_f) + l3 <E_cl>, with <E_cl> the time
average over the transport. The adjoint p is integrated backward from the
transversality conditions and contracted with dH/dB * dB/du to obtain the
pointwise control gradient dH/du. A step u <- u + eps * dH/du descends C.

Gradients handed to the update are expressed in nanokelvin (energy / k_B),
so ``epsilon`` carries units of 1 / (nK s).
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numba
import numpy as np

from .constants import NK, RB87, PhysicalConstants
from .dynamics import (CollapseError, CondensateState, GroundStateSpec, StateHistory,
                       _rhs, classical_energy, integrate_forward, quantum_energy)
from .ramp import ControlRamp, TrapTrajectory, ramp_to_trajectory
from .trap import MapRangeError, TrapMap

log = logging.getLogger(__name__)


class DivergingAdjointError(RuntimeError):
    pass


class OptimizationAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class CostWeights:
    lambda1: float = 1.0
    lambda2: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        if not self.lambda1 >= 0 or not self.lambda2 >= 0 or not self.lambda3 >= 0:
            raise ValueError("cost weights must be non-negative")


# weights quoted for the convergence example and the two comparison modes
CONVERGENCE_WEIGHTS = CostWeights(1.0, 5e5, 1e-3)
CL_OCT_WEIGHTS = CostWeights(1.0, 0.0, 5.5e-4)
QU_OCT_WEIGHTS = CostWeights(1.0, 3.3, 5.5e-4)


@dataclass(frozen=True)
class CostBreakdown:
    """Cost terms in joules."""

    e_cl_final: float
    e_qu_final: float
    mean_e_cl: float
    terminal: float
    running: float

    @property
    def total(self) -> float:
        return self.terminal + self.running

    def nK(self) -> dict:
        return {k: v / NK for k, v in (("E_cl_tf", self.e_cl_final), ("E_qu_tf", self.e_qu_final),
                                        ("mean_E_cl", self.mean_e_cl), ("C_tot", self.total))}


def _transport_slice(history: StateHistory):
    n = history.final_index + 1
    return n, history.trajectory


def total_cost(history: StateHistory, ground: GroundStateSpec, weights: CostWeights,
               constants: PhysicalConstants = RB87) -> CostBreakdown:
    """Terminal + running cost over [0, t_f]; the running term uses the trapezoid rule."""
    n, tr = _transport_slice(history)
    x = history.states[:n]
    e_cl = classical_energy(x, tr.z0[:n], tr.z0_dot[:n], tr.omega2[2, :n], constants)
    e_qu_f = float(quantum_energy(x[-1], tr.omega2[:, n - 1], ground, constants))
    mean = float(np.trapezoid(e_cl, dx=tr.dt) / tr.final_time)
    terminal = weights.lambda1 * float(e_cl[-1]) + weights.lambda2 * e_qu_f
    return CostBreakdown(float(e_cl[-1]), e_qu_f, mean, terminal, weights.lambda3 * mean)


def terminal_adjoint(final, z0, z0_dot, omega2, ground: GroundStateSpec, weights: CostWeights,
                     constants: PhysicalConstants = RB87) -> np.ndarray:
    """p(t_f) = -l1 dE_cl/dx - l2 dE_qu/dx at the final state."""
    x = np.asarray(getattr(final, "array", final), dtype=float)
    lam, lam_dot = x[2::2], x[3::2]
    if np.any(lam <= 0):
        raise CollapseError("scaling factor is not positive at t_f")
    m, g = constants.atom_mass, constants.interaction_strength
    w2 = np.asarray(omega2, dtype=float)
    r0 = ground.radii
    r = r0 * lam
    interaction = 15 * g * ground.atom_count / (28 * math.pi * np.prod(r))
    p = np.empty(8)
    p[0] = -weights.lambda1 * m * w2[2] * (x[0] - z0)
    p[1] = -weights.lambda1 * m * (x[1] - z0_dot)
    p[2::2] = -weights.lambda2 * (m / 7 * w2 * r0 * r - interaction * r0 / r)
    p[3::2] = -weights.lambda2 * (m / 7 * r0 * r0 * lam_dot)
    return p


@numba.njit(cache=True)
def _adjoint_rhs(p, x, z0, zd0, wx, wy, wz, w0x, w0y, w0z, c, out):
    x1, x2, x3, x5, x7 = x[0], x[1], x[2], x[4], x[6]
    out[0] = wz * (p[1] + c * (x1 - z0))
    out[1] = -p[0] + c * (x2 - zd0)
    out[2] = (p[3] * (wx + 2.0 * w0x / (x3**3 * x5 * x7))
              + p[5] * w0y / (x3**2 * x5**2 * x7)
              + p[7] * w0z / (x3**2 * x5 * x7**2))
    out[3] = -p[2]
    out[4] = (p[3] * w0x / (x3**2 * x5**2 * x7)
              + p[5] * (wy + 2.0 * w0y / (x3 * x5**3 * x7))
              + p[7] * w0z / (x3 * x5**2 * x7**2))
    out[5] = -p[4]
    out[6] = (p[3] * w0x / (x3**2 * x5 * x7**2)
              + p[5] * w0y / (x3 * x5**2 * x7**2)
              + p[7] * (wz + 2.0 * w0z / (x3 * x5 * x7**3)))
    out[7] = -p[6]


@numba.njit(cache=True)
def _adjoint_rk4(pT, X, z0, zd0, w2, w20, dt, c, out):
    n = X.shape[0]
    p = pT.copy()
    out[n - 1, :] = p
    k1 = np.empty(8)
    k2 = np.empty(8)
    k3 = np.empty(8)
    k4 = np.empty(8)
    tmp = np.empty(8)
    xm = np.empty(8)
    fa = np.empty(8)
    fb = np.empty(8)
    _rhs(X[n - 1], z0[n - 1], w2[0, n - 1], w2[1, n - 1], w2[2, n - 1], w20[0], w20[1], w20[2], fb)
    for k in range(n - 2, -1, -1):
        _rhs(X[k], z0[k], w2[0, k], w2[1, k], w2[2, k], w20[0], w20[1], w20[2], fa)
        # cubic Hermite midpoint keeps the backward sweep fourth order
        for i in range(8):
            xm[i] = 0.5 * (X[k, i] + X[k + 1, i]) + dt / 8.0 * (fa[i] - fb[i])
            fb[i] = fa[i]
        zm = 0.5 * (z0[k] + z0[k + 1])
        zdm = 0.5 * (zd0[k] + zd0[k + 1])
        wxm = 0.5 * (w2[0, k] + w2[0, k + 1])
        wym = 0.5 * (w2[1, k] + w2[1, k + 1])
        wzm = 0.5 * (w2[2, k] + w2[2, k + 1])
        _adjoint_rhs(p, X[k + 1], z0[k + 1], zd0[k + 1], w2[0, k + 1], w2[1, k + 1],
                     w2[2, k + 1], w20[0], w20[1], w20[2], c, k1)
        for i in range(8):
            tmp[i] = p[i] - 0.5 * dt * k1[i]
        _adjoint_rhs(tmp, xm, zm, zdm, wxm, wym, wzm, w20[0], w20[1], w20[2], c, k2)
        for i in range(8):
            tmp[i] = p[i] - 0.5 * dt * k2[i]
        _adjoint_rhs(tmp, xm, zm, zdm, wxm, wym, wzm, w20[0], w20[1], w20[2], c, k3)
        for i in range(8):
            tmp[i] = p[i] - dt * k3[i]
        _adjoint_rhs(tmp, X[k], z0[k], zd0[k], w2[0, k], w2[1, k], w2[2, k],
                     w20[0], w20[1], w20[2], c, k4)
        for i in range(8):
            p[i] -= dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if not np.all(np.isfinite(p)):
            return k
        out[k, :] = p
    return -1


def integrate_adjoint_backward(history: StateHistory, ground: GroundStateSpec,
                               weights: CostWeights, constants: PhysicalConstants = RB87,
                               terminal=None) -> np.ndarray:
    """Adjoint history (n, 8) over [0, t_f], integrated backward with RK4."""
    n, tr = _transport_slice(history)
    X = np.ascontiguousarray(history.states[:n])
    if terminal is None:
        terminal = terminal_adjoint(X[-1], tr.z0[n - 1], tr.z0_dot[n - 1], tr.omega2[:, n - 1],
                                    ground, weights, constants)
    c = weights.lambda3 * constants.atom_mass / tr.final_time
    out = np.empty((n, 8))
    bad = _adjoint_rk4(np.asarray(terminal, dtype=float), X,
                       np.ascontiguousarray(tr.z0[:n]), np.ascontiguousarray(tr.z0_dot[:n]),
                       np.ascontiguousarray(tr.omega2[:, :n]),
                       np.ascontiguousarray(tr.omega2[:, 0]), tr.dt, c, out)
    if bad >= 0:
        t = float(tr.times[bad])
        raise DivergingAdjointError(f"adjoint diverged at t = {t:.6g} s")
    return out


def control_gradient(states, adjoint, trajectory: TrapTrajectory, weights: CostWeights,
                     constants: PhysicalConstants = RB87, include_zdot: bool = False):
    """Pointwise dH_p/du in joules on the transport grid.

    With ``include_zdot`` the dependence of dz_0/dt on the control slope is
    added (integrated by parts), giving the exact first variation of the
    running cost; the default follows the plain pointwise update.
    """
    n = len(adjoint)
    x = np.asarray(states)[:n]
    p = np.asarray(adjoint)
    tr = trajectory
    m = constants.atom_mass
    z0, w2 = tr.z0[:n], tr.omega2[:, :n]
    dz0, dw2 = tr.dz0_dB[:n], tr.domega2_dB[:, :n]
    off = x[:, 0] - z0
    dH_dB = (p[:, 1] * (-dw2[2] * off + w2[2] * dz0)
             - p[:, 3] * dw2[0] * x[:, 2]
             - p[:, 5] * dw2[1] * x[:, 4]
             - p[:, 7] * dw2[2] * x[:, 6])
    c = weights.lambda3 * m / tr.final_time
    dH_dB -= 0.5 * c * (dw2[2] * off**2 - 2 * w2[2] * off * dz0)
    grad = dH_dB * tr.dB_du[:n]
    if include_zdot:
        accel = -w2[2] * off
        grad = grad - c * tr.dz0_dB[:n] * tr.dB_du[:n] * (accel - tr.z0_ddot[:n])
    return grad


@dataclass
class Evaluation:
    """Everything computed for one ramp in a single forward/backward sweep."""

    ramp: ControlRamp
    trajectory: TrapTrajectory
    history: StateHistory
    cost: CostBreakdown
    adjoint: np.ndarray | None = None
    gradient: np.ndarray | None = None  # joules


def evaluate(ramp: ControlRamp, trap_map: TrapMap, ground: GroundStateSpec, weights: CostWeights,
             constants: PhysicalConstants = RB87, method: str = "verlet", substeps: int = 1,
             with_gradient: bool = True, include_zdot: bool = False) -> Evaluation:
    tr = ramp_to_trajectory(ramp, trap_map)
    hist = integrate_forward(tr, CondensateState.at_rest(tr.z0[0]), method, substeps)
    cost = total_cost(hist, ground, weights, constants)
    ev = Evaluation(ramp, tr, hist, cost)
    if with_gradient:
        ev.adjoint = integrate_adjoint_backward(hist, ground, weights, constants)
        ev.gradient = control_gradient(hist.states, ev.adjoint, tr, weights, constants,
                                       include_zdot)
    return ev


def directional_derivative_check(ramp: ControlRamp, trap_map: TrapMap, ground: GroundStateSpec,
                                 weights: CostWeights, direction, h: float = 1e-4,
                                 constants: PhysicalConstants = RB87, method: str = "rk4",
                                 substeps: int = 1, include_zdot: bool = True):
    """Compare the finite-difference cost slope with -int(dH/du * du) dt.

    The slope uses the fourth-order five-point stencil: the cost carries
    rounding noise from thousands of integration steps, and a larger step
    with a higher-order stencil keeps both noise and truncation small.
    Returns ``(finite_difference, adjoint, relative_error)`` in joules.
    """
    d = np.asarray(direction, dtype=float)
    d = d.copy()
    d[0] = d[-1] = 0.0
    ev = evaluate(ramp, trap_map, ground, weights, constants, method, substeps,
                  include_zdot=include_zdot)
    adj = -float(np.trapezoid(ev.gradient * d, dx=ramp.dt))

    def cost(s):
        return evaluate(ramp.with_values(ramp.u_values + s * h * d), trap_map, ground, weights,
                        constants, method, substeps, with_gradient=False).cost.total

    fd = (8 * (cost(1) - cost(-1)) - (cost(2) - cost(-2))) / (12 * h)
    return fd, adj, abs(adj - fd) / max(abs(fd), 1e-300)


def smooth_random_direction(rng: np.random.Generator, node_count: int, modes: int = 8):
    """Random sine series vanishing at both ends, unit max-amplitude."""
    s = np.linspace(0.0, 1.0, node_count)
    coeff = rng.normal(size=modes) / np.arange(1, modes + 1)
    d = sum(c * np.sin(math.pi * (k + 1) * s) for k, c in enumerate(coeff))
    d[0] = d[-1] = 0.0  # sin(k pi) is only zero to rounding
    return d / np.max(np.abs(d))


@dataclass
class OptimizationResult:
    ramp: ControlRamp
    iterations: list = field(default_factory=list)
    e_cl_final_nK: list = field(default_factory=list)
    e_qu_final_nK: list = field(default_factory=list)
    mean_e_cl_nK: list = field(default_factory=list)
    cost_nK: list = field(default_factory=list)
    termination: str = ""
    iteration_count: int = 0
    epsilon: float = 0.0
    initial_terminal_adjoint: np.ndarray | None = None
    final_terminal_adjoint: np.ndarray | None = None

    def record(self, it: int, cost: CostBreakdown):
        d = cost.nK()
        self.iterations.append(it)
        self.e_cl_final_nK.append(d["E_cl_tf"])
        self.e_qu_final_nK.append(d["E_qu_tf"])
        self.mean_e_cl_nK.append(d["mean_E_cl"])
        self.cost_nK.append(d["C_tot"])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "E_cl_tf_nK", "E_qu_tf_nK", "mean_E_cl_nK", "C_tot"])
            for row in zip(self.iterations, self.e_cl_final_nK, self.e_qu_final_nK,
                           self.mean_e_cl_nK, self.cost_nK):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def _should_record(it: int, dense_until: int = 1000, per_decade: int = 200) -> bool:
    if it <= dense_until:
        return True
    # logarithmic schedule: about ``per_decade`` records per decade
    prev = math.floor(per_decade * math.log10(it - 1))
    return math.floor(per_decade * math.log10(it)) != prev


def optimize(initial: ControlRamp, trap_map: TrapMap, ground: GroundStateSpec,
             weights: CostWeights, epsilon: float, max_iter: int = 10_000,
             constants: PhysicalConstants = RB87, stagnation_window: int = 10_000,
             stagnation_tol: float = 1e-8, grad_tol: float = 1e-12, target=None,
             method: str = "verlet", substeps: int = 1, max_halvings: int = 20,
             scheme: str = "fixed", callback=None) -> OptimizationResult:
    """First-order gradient loop ``u <- u + eps * dH/du`` (gradient in nK).

    Stops on ``max_iter``, when the gradient norm falls below ``grad_tol``,
    when C_tot changes by less than ``stagnation_tol`` (relative) over
    ``stagnation_window`` iterations, or when ``target(cost_nK_dict)``
    returns True. A step that leaves the trap map or collapses the
    condensate is retried with half the step, up to ``max_halvings`` times.

    ``scheme="nesterov"`` extrapolates ``y = u + (k-1)/(k+2) (u - u_prev)``
    before each gradient step and restarts the momentum whenever C_tot
    rises. It uses the same epsilon and only first derivatives; the cost
    landscape is badly conditioned (E_cl is far stiffer than E_qu), and the
    plain loop needs millions of iterations to settle the size modes.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if scheme not in ("fixed", "nesterov"):
        raise ValueError(f"unknown scheme {scheme!r}")
    ev = evaluate(initial, trap_map, ground, weights, constants, method, substeps)
    result = OptimizationResult(initial, epsilon=epsilon)
    result.initial_terminal_adjoint = ev.adjoint[-1].copy()
    result.record(0, ev.cost)
    window = deque([ev.cost.total], maxlen=stagnation_window + 1)
    it = 0
    k = 1
    u_prev = initial.u_values
    reason = "max_iter"
    while True:
        grad = ev.gradient / NK
        gnorm = math.sqrt(float(np.trapezoid(grad**2, dx=initial.dt)))
        if gnorm < grad_tol:
            reason = "gradient"
            break
        if target is not None and target(ev.cost.nK()):
            reason = "target"
            break
        if it >= max_iter:
            break
        step = epsilon
        for _ in range(max_halvings + 1):
            u = ev.ramp.u_values + step * grad
            if scheme == "nesterov":
                y = u + (k - 1) / (k + 2) * (u - u_prev)
            else:
                y = u
            try:
                new = evaluate(ev.ramp.with_values(y), trap_map, ground, weights, constants,
                               method, substeps)
                break
            except (MapRangeError, CollapseError, DivergingAdjointError) as exc:
                log.debug("iteration %d: %s; halving step", it + 1, exc)
                step *= 0.5
                k = 1
        else:
            raise OptimizationAborted(f"no feasible step at iteration {it + 1}")
        if scheme == "nesterov":
            if new.cost.total > ev.cost.total:
                k = 1
            else:
                k += 1
            u_prev = u
        ev = new
        it += 1
        if _should_record(it):
            result.record(it, ev.cost)
        if callback is not None:
            callback(it, ev)
        window.append(ev.cost.total)
        if len(window) > stagnation_window:
            old = window[0]
            if abs(old - ev.cost.total) <= stagnation_tol * abs(old):
                reason = "stagnation"
                break
    if result.iterations[-1] != it:
        result.record(it, ev.cost)
    result.ramp = ev.ramp
    result.termination = reason
    result.iteration_count = it
    result.final_terminal_adjoint = ev.adjoint[-1].copy()
    result.final_evaluation = ev
    return result
