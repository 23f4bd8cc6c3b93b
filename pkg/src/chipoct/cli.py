"""Command-line front end.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .constants import GAUSS, NK
from .dynamics import CollapseError, tf_ground_state, write_history_csv
from .metrics import simulate_with_hold, transport_metrics
from .oct import (DivergingAdjointError, OptimizationAborted, directional_derivative_check,
                  optimize, smooth_random_direction, CostWeights, CL_OCT_WEIGHTS,
                  CONVERGENCE_WEIGHTS, QU_OCT_WEIGHTS)
from .ramp import ControlRamp, InfeasibleSTAError, linear_ramp, sta_ramp
from .trap import (ENDPOINT_ANCHORS, MapRangeError, SingularGeometryError, TableParseError,
                   TrapNotFoundError, UnstableTrapError, anchor_errors, build_trap_map,
                   load_tabulated_map)

log = logging.getLogger("chipoct")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2

NUMERIC_ERRORS = (CollapseError, DivergingAdjointError, OptimizationAborted, InfeasibleSTAError,
                  TrapNotFoundError, UnstableTrapError, SingularGeometryError, FloatingPointError)


class UsageError(Exception):
    pass


# --- shared helpers ---------------------------------------------------------

def trap_map_for(config: ExperimentConfig):
    t = config.trap
    if t.table is not None:
        return load_tabulated_map(config.path(t.table))
    lo, hi = (v * GAUSS for v in t.map_range_gauss)
    return build_trap_map(t.geometry(), (lo, hi), t.map_samples, config.constants())


def initial_ramp(config: ExperimentConfig, trap_map, final_time=None, init=None) -> ControlRamp:
    r = config.ramp
    tf = final_time if final_time is not None else r.final_time_ms * 1e-3
    kw = dict(bias_start=r.bias_start_gauss * GAUSS, bias_end=r.bias_end_gauss * GAUSS)
    init = init or r.init
    if init == "linear":
        return linear_ramp(tf, r.node_count, **kw)
    if init == "sta":
        return sta_ramp(tf, trap_map, r.node_count, **kw)
    ramp = ControlRamp.load(config.path(r.file))
    if ramp.node_count != r.node_count:
        print(f"notice: ramp file has {ramp.node_count} nodes; resampled to {r.node_count}",
              file=sys.stderr)
        ramp = ramp.resampled(r.node_count)
    return ramp


def mode_weights(config: ExperimentConfig, mode: str) -> CostWeights:
    o = config.optimize
    if o.weights is None:
        return QU_OCT_WEIGHTS if mode == "qu-oct" else CL_OCT_WEIGHTS
    w = CostWeights(*o.weights)
    if mode == "cl-oct" and w.lambda2 != 0:
        log.warning("cl-oct ignores lambda2 = %g from the config; using 0", w.lambda2)
        w = dataclasses.replace(w, lambda2=0.0)
    return w


def run_optimization(config: ExperimentConfig, trap_map, ramp: ControlRamp, mode: str):
    o = config.optimize
    ground = tf_ground_state(trap_map.characterization(ramp.bias_start), config.constants())
    return optimize(ramp, trap_map, ground, mode_weights(config, mode), o.epsilon, o.max_iter,
                    config.constants(), o.stagnation_window, o.stagnation_tol,
                    method=o.method, scheme=o.scheme), ground


def _out_dir(args, config) -> Path:
    out = Path(args.out or config.path(config.output))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# --- commands ---------------------------------------------------------------

def cmd_characterize(config, args) -> int:
    trap_map = trap_map_for(config)
    out = _out_dir(args, config)
    trap_map.save(out / "trap_map.txt")
    rows = []
    for anchor in ENDPOINT_ANCHORS:
        trap = trap_map.characterization(anchor[0])
        err = anchor_errors(trap, anchor)
        row = {"B_gauss": anchor[0] / GAUSS, "z0_mm": trap.minimum_distance * 1e3}
        row.update(zip(("fx_Hz", "fy_Hz", "fz_Hz"), (float(f) for f in trap.frequencies_hz())))
        row.update(zip(("err_z0", "err_fx", "err_fy", "err_fz"), (float(e) for e in err)))
        rows.append(row)
        print("B = {B_gauss:5.2f} G  z0 = {z0_mm:.4f} mm  f = ({fx_Hz:.3f}, {fy_Hz:.3f}, "
              "{fz_Hz:.3f}) Hz  max rel. error = {e:.3%}".format(e=float(np.max(np.abs(err))), **row))
    for B in config.trap.report_bias_gauss:
        trap = trap_map.characterization(B * GAUSS)
        f = trap.frequencies_hz()
        print(f"B = {B:5.2f} G  z0 = {trap.minimum_distance * 1e3:.4f} mm  "
              f"f = ({f[0]:.3f}, {f[1]:.3f}, {f[2]:.3f}) Hz")
    _write_rows(out / "endpoints.csv", rows)
    return EXIT_OK


def _history_outputs(out, prefix, ramp, trap_map, ground, config):
    hist = simulate_with_hold(ramp, trap_map, method=config.optimize.method)
    write_history_csv(out / f"{prefix}_history.csv", hist, ground, config.constants())
    metrics = transport_metrics(hist, ground, config.constants())
    _write_rows(out / f"{prefix}_metrics.csv", [metrics.as_row()])
    return metrics


def cmd_optimize(config, args) -> int:
    mode = args.mode or config.optimize.mode
    trap_map = trap_map_for(config)
    ramp = initial_ramp(config, trap_map, init=args.init)
    result, ground = run_optimization(config, trap_map, ramp, mode)
    out = _out_dir(args, config)
    result.ramp.save(out / "ramp.txt")
    result.write_csv(out / "convergence.csv")
    m = _history_outputs(out, "final", result.ramp, trap_map, ground, config)
    print(f"{mode}: {result.termination} after {result.iteration_count} iterations; "
          f"E_cl(t_f) = {m.e_cl_final_nK:.4g} nK, E_qu(t_f) = {m.e_qu_final_nK:.6g} nK, "
          f"<E_cl> = {m.mean_e_cl_nK:.4g} nK")
    print("residual size amplitudes (um): " + ", ".join(f"{v * 1e6:.4g}" for v in m.residual_amplitudes))
    return EXIT_OK


def cmd_simulate(config, args) -> int:
    trap_map = trap_map_for(config)
    ramp = initial_ramp(config, trap_map, init=args.init)
    ground = tf_ground_state(trap_map.characterization(ramp.bias_start), config.constants())
    out = _out_dir(args, config)
    m = _history_outputs(out, "simulate", ramp, trap_map, ground, config)
    for k, v in m.as_row().items():
        print(f"{k} = {v:.6g}")
    return EXIT_OK


def sweep_point(config: ExperimentConfig, final_time: float, method: str, trap_map=None) -> dict:
    """Metrics for one (t_f, method); failures are reported in the row."""
    row = {"t_f_ms": final_time * 1e3, "method": method, "status": "ok"}
    try:
        trap_map = trap_map or trap_map_for(config)
        ramp = initial_ramp(config, trap_map, final_time, init="sta")
        ground = tf_ground_state(trap_map.characterization(ramp.bias_start), config.constants())
        if method != "sta":
            ramp = run_optimization(config, trap_map, ramp, method)[0].ramp
        hist = simulate_with_hold(ramp, trap_map, method=config.optimize.method)
        row.update(transport_metrics(hist, ground, config.constants()).as_row())
    except (*NUMERIC_ERRORS, MapRangeError) as exc:
        row["status"] = f"failed: {exc}"
    return row


def _sweep_worker(args):
    return sweep_point(*args)


def cmd_sweep(config, args) -> int:
    points = [(config, t * 1e-3, m) for t in config.sweep.final_times_ms
              for m in config.sweep.methods]
    workers = args.threads or config.sweep.workers
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_worker, points))
    else:
        trap_map = trap_map_for(config)
        rows = [sweep_point(c, t, m, trap_map) for c, t, m in points]
    out = _out_dir(args, config)
    _write_rows(out / "sweep.csv", rows)
    for row in rows:
        print(f"t_f = {row['t_f_ms']:6.1f} ms  {row['method']:7s}  {row['status']}  "
              + ("" if row["status"] != "ok" else
                 f"<E_cl> = {row['mean_E_cl_nK']:.4g} nK  max|z_A-z_0| = {row['max_offset_um']:.4g} um  "
                 f"res = ({row['dx_res_um']:.3g}, {row['dy_res_um']:.3g}, {row['dz_res_um']:.3g}) um"))
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


def cmd_gpe_verify(config, args) -> int:
    from . import gpe

    g = config.gpe
    threads = args.threads or 1
    if g.scenario == "harmonic":
        sc = gpe.harmonic_scenario(g.transport_distance_um * 1e-6, g.final_time_ms * 1e-3,
                                   g.hold_ms * 1e-3, points=g.points, dt=g.dt_us * 1e-6,
                                   threads=threads, constants=config.constants())
        trap_map, grid, hold = sc.trap_map, sc.grid, sc.hold
        ramp = sc.ramp
        if args.ramp is not None:
            ramp = ControlRamp.load(args.ramp)
        potential = gpe.MapHarmonicPotential(grid, trap_map, config.constants())
    else:
        if args.ramp is None:
            raise UsageError("the chip scenario needs --ramp")
        trap_map = trap_map_for(config)
        ramp = ControlRamp.load(args.ramp)
        z = [float(trap_map.z0(ramp.bias_start)), float(trap_map.z0(ramp.bias_end))]
        ext = tuple(v * 1e-6 for v in (g.extents_um or (200.0, 60.0, abs(z[1] - z[0]) * 1e6 + 200)))
        grid = gpe.SimulationGrid(ext, (g.points,) * 3, (0.0, 0.0, 0.5 * sum(z)), g.dt_us * 1e-6,
                                  threads)
        hold = g.hold_ms * 1e-3
        potential = gpe.ChipPotentialCache(grid, config.trap.geometry(),
                                           (ramp.bias_start, ramp.bias_end),
                                           constants=config.constants())
    report = gpe.run_verification(ramp, trap_map, grid, potential, hold, g.record_every,
                                  config.constants())
    out = _out_dir(args, config)
    report.record.write_csv(out)
    report.comparison.write_csv(out / "gpe_deviation.csv")
    com, width = report.comparison.max_com_fraction, report.comparison.max_width_deviation
    print(f"max centre-of-mass deviation = {com:.3%} of transport distance "
          f"(threshold {g.com_threshold:.3%})")
    print(f"max width deviation = {width:.3%} (threshold {g.width_threshold:.3%})")
    return EXIT_OK if com < g.com_threshold and width < g.width_threshold else EXIT_NUMERIC


def cmd_gradient_check(config, args) -> int:
    gc = config.gradient_check
    trap_map = trap_map_for(config)
    rng = np.random.default_rng(args.seed if args.seed is not None else config.seed)
    tf = config.ramp.final_time_ms * 1e-3
    base = linear_ramp(tf, gc.node_count)
    ground = tf_ground_state(trap_map.characterization(base.bias_start), config.constants())
    modes = {"convergence": CONVERGENCE_WEIGHTS, "cl-oct": CL_OCT_WEIGHTS, "qu-oct": QU_OCT_WEIGHTS}
    worst = 0.0
    for name, weights in modes.items():
        for i in range(gc.ramps):
            ramp = base.with_values(base.u_values + 0.1 * smooth_random_direction(rng, gc.node_count))
            for j in range(gc.directions):
                d = smooth_random_direction(rng, gc.node_count)
                fd, adj, err = directional_derivative_check(ramp, trap_map, ground, weights, d,
                                                            gc.step, config.constants())
                worst = max(worst, err)
                print(f"{name:12s} ramp {i} dir {j}: fd = {fd / NK:+.6e} nK  "
                      f"adjoint = {adj / NK:+.6e} nK  rel. error = {err:.2e}")
    print(f"worst relative error = {worst:.2e} (tolerance {gc.tolerance:.0e})")
    return EXIT_OK if worst < gc.tolerance else EXIT_NUMERIC


COMMANDS = {"characterize": cmd_characterize, "optimize": cmd_optimize,
            "simulate": cmd_simulate, "sweep": cmd_sweep, "gpe-verify": cmd_gpe_verify,
            "gradient-check": cmd_gradient_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chipoct", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker processes / FFT threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("characterize", help="build the trap map and report endpoint errors")
    o = sub.add_parser("optimize", help="optimal control of the bias ramp")
    o.add_argument("--mode", choices=("cl-oct", "qu-oct"))
    o.add_argument("--init", choices=("linear", "sta", "file"))
    s = sub.add_parser("simulate", help="integrate a ramp with the post-transport hold")
    s.add_argument("--init", choices=("linear", "sta", "file"))
    sub.add_parser("sweep", help="metrics versus transport duration")
    g = sub.add_parser("gpe-verify", help="Gross-Pitaevskii check of the scaling predictions")
    g.add_argument("--ramp", help="ramp file")
    sub.add_parser("gradient-check", help="adjoint gradient vs finite differences")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        if args.command in ("optimize", "simulate") and args.init == "file" and config.ramp.file is None:
            raise ConfigError("--init file needs ramp.file in the config")
        config.validate(args.command)
        if args.command == "gpe-verify" and args.ramp is not None and not os.path.isfile(args.ramp):
            raise UsageError(f"ramp file {args.ramp} does not exist")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        return COMMANDS[args.command](config, args)
    except (ConfigError, UsageError, TableParseError, MapRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
