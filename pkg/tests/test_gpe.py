import math

import numpy as np
import pytest

from chipoct.constants import GAUSS, RB87, PhysicalConstants
from chipoct.dynamics import (CondensateState, integrate_forward, tf_ground_state)
from chipoct.gpe import (ChipPotentialCache, GridError, GroundStateError, MapHarmonicPotential,
                         MarginalRecord, NumericalInstabilityError, SimulationGrid, WaveField,
                         chip_potential, compare_with_scaling, energy_per_particle,
                         harmonic_potential, harmonic_scenario, imaginary_time_ground_state,
                         propagate, thomas_fermi_field)
from chipoct.ramp import linear_ramp, ramp_to_trajectory
from chipoct.trap import SingularGeometryError, TrapMap, characterize_trap, find_minimum

HBAR, M = RB87.reduced_planck, RB87.atom_mass
F_TEST = np.array([30.0, 45.0, 40.0])


def constant_map(z0=100e-6, freqs=F_TEST):
    B = np.linspace(4.5, 21.5, 8) * GAUSS
    w2 = np.repeat(((2 * math.pi * np.asarray(freqs)) ** 2)[:, None], 8, axis=1)
    return TrapMap(B, np.full(8, z0), w2)


@pytest.fixture(scope="module")
def tf_case():
    """Interacting ground state on a 32^3 box around a static harmonic trap."""
    g = tf_ground_state(2 * math.pi * F_TEST)
    side = 4.4 * g.radii.max()
    grid = SimulationGrid((side,) * 3, (32,) * 3, (0.0, 0.0, 100e-6), dt=1e-5)
    V = harmonic_potential(grid, 100e-6, (2 * math.pi * F_TEST) ** 2)
    field = imaginary_time_ground_state(grid, V)
    return grid, V, field, g


def test_grid_validation():
    with pytest.raises(GridError):
        SimulationGrid((1e-5,) * 3, (32, 48, 32))
    with pytest.raises(GridError):
        SimulationGrid((1e-5,) * 3, (16, 32, 32))
    with pytest.raises(GridError):
        SimulationGrid((1e-5,) * 3, (32,) * 3, dt=0.0)


def test_grid_coverage():
    grid = SimulationGrid((40e-6, 40e-6, 60e-6), (32,) * 3, (0.0, 0.0, 105e-6))
    grid.check_coverage((100e-6, 110e-6), 10e-6)
    with pytest.raises(GridError, match="axis 2"):
        grid.check_coverage((100e-6, 130e-6), 10e-6)
    with pytest.raises(GridError, match="centred"):
        SimulationGrid((40e-6, 40e-6, 60e-6), (32,) * 3, (0.0, 0.0, 95e-6)).check_coverage(
            (100e-6, 110e-6), 10e-6)


def test_chip_potential_rejects_chip_plane(geometry):
    grid = SimulationGrid((1e-4,) * 3, (32,) * 3, (0.0, 0.0, 0.0))
    with pytest.raises(SingularGeometryError):
        chip_potential(grid, geometry, 10 * GAUSS)


@pytest.fixture(scope="module")
def chip_box(geometry):
    B = 21.5 * GAUSS
    x0 = find_minimum(geometry, B)
    trap = characterize_trap(geometry, B)
    grid = SimulationGrid((40e-6, 1.6e-6, 1.6e-6), (32,) * 3, tuple(x0))
    return grid, chip_potential(grid, geometry, B), trap


def test_chip_potential_zero_at_minimum(chip_box):
    grid, V, _ = chip_box
    c = tuple(n // 2 for n in grid.counts)
    scale = np.max(V)
    assert abs(V[c]) < 1e-9 * scale
    assert V.min() >= -1e-9 * scale


def test_chip_potential_quadratic_fit(chip_box):
    grid, V, trap = chip_box
    L = np.array(grid.extents)
    q = (grid.points() - np.array(grid.center)) / L  # unit box keeps lstsq well conditioned
    x, y, z = (q[..., i].ravel() for i in range(3))
    A = np.column_stack([x * x, y * y, z * z, x * y, x * z, y * z, x, y, z, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, V.ravel(), rcond=None)
    H = np.array([[2 * coef[0], coef[3], coef[4]],
                  [coef[3], 2 * coef[1], coef[5]],
                  [coef[4], coef[5], 2 * coef[2]]]) / np.outer(L, L)
    w = np.sqrt(np.sort(np.linalg.eigvalsh(H)) / M)
    np.testing.assert_allclose(w, np.sort(trap.omegas), rtol=0.01)


def test_chip_potential_single_well_along_normal(geometry):
    B = 10 * GAUSS
    x0 = find_minimum(geometry, B)
    grid = SimulationGrid((2e-6, 2e-6, 200e-6), (32,) * 3, tuple(x0))
    V = chip_potential(grid, geometry, B)
    line = V[16, 16, :]
    k = int(np.argmin(line))
    assert k == 16
    assert np.all(np.diff(line[:k + 1]) < 0) and np.all(np.diff(line[k:]) > 0)


def test_potential_cache_interpolates(geometry):
    B = 15 * GAUSS
    x0 = find_minimum(geometry, B)
    grid = SimulationGrid((40e-6, 4e-6, 4e-6), (32,) * 3, tuple(x0))
    cache = ChipPotentialCache(grid, geometry, (14 * GAUSS, 16 * GAUSS), samples=3)
    np.testing.assert_array_equal(cache(15 * GAUSS), chip_potential(grid, geometry, 15 * GAUSS))
    mid = cache(14.5 * GAUSS)
    np.testing.assert_allclose(mid, 0.5 * (cache(14 * GAUSS) + cache(15 * GAUSS)), rtol=1e-14)


def test_phase_step_kernels_match_numpy():
    grid = SimulationGrid((30e-6,) * 3, (32,) * 3, (0.0, 0.0, 100e-6))
    trap_map = constant_map()
    model = MapHarmonicPotential(grid, trap_map)
    rng = np.random.default_rng(0)
    psi = rng.normal(size=(32,) * 3) + 1j * rng.normal(size=(32,) * 3)
    gN, c = 1e-45, 1e25
    V = model(10 * GAUSS)
    expected = psi * np.exp(-1j * c * (V + gN * np.abs(psi) ** 2))
    got = psi.copy()
    total = model.phase_step(got, 10 * GAUSS, gN, c)
    np.testing.assert_allclose(got, expected, rtol=1e-10)
    assert total == pytest.approx(np.sum(np.abs(psi) ** 2), rel=1e-12)


def test_noninteracting_gaussian_width():
    w = 2 * math.pi * 100.0
    weak = PhysicalConstants(atom_count=1e-6)
    a = math.sqrt(HBAR / (M * w))
    grid = SimulationGrid((12 * a,) * 3, (32,) * 3, dt=1e-5)
    V = harmonic_potential(grid, 0.0, np.full(3, w * w))
    X, Y, Z = grid.mesh()
    guess = WaveField(np.exp(-(X**2 + Y**2 + Z**2) / (4 * a * a)) + 0j, grid)
    guess.psi /= math.sqrt(guess.norm)
    f = imaginary_time_ground_state(grid, V, weak, dt=2e-5, initial=guess)
    rec = MarginalRecord()
    rec.add(0.0, f.density(), grid)
    np.testing.assert_allclose(rec.sigma[0], a / math.sqrt(2), rtol=0.02)


def test_tf_widths(tf_case):
    grid, V, field, g = tf_case
    rec = MarginalRecord()
    rec.add(0.0, field.density(), grid)
    np.testing.assert_allclose(rec.sigma[0], g.widths(), rtol=0.05)
    assert rec.com[0][2] == pytest.approx(100e-6, abs=1e-9)


def test_ground_state_beats_tf_ansatz(tf_case):
    grid, V, field, _ = tf_case
    tf = thomas_fermi_field(grid, V)
    assert energy_per_particle(field, V) < energy_per_particle(tf, V)


def test_imaginary_time_energy_non_increasing(tf_case):
    e = np.array(tf_case[2].energies)
    assert np.all(np.diff(e) <= 1e-12 * abs(e[0]))


def test_ground_state_failure_reports_energies(tf_case):
    grid, V, _, _ = tf_case
    with pytest.raises(GroundStateError) as info:
        imaginary_time_ground_state(grid, V, max_steps=20)
    assert len(info.value.energies) >= 2


def test_marginals_normalized(tf_case):
    grid, _, field, _ = tf_case
    rec = MarginalRecord()
    rec.add(0.0, field.density(), grid)
    for a in range(3):
        assert np.sum(rec.marginals[a][0]) * grid.spacing[a] == pytest.approx(1.0, abs=1e-6)


def test_static_propagation_is_stationary_and_unitary(tf_case):
    grid, _, field, _ = tf_case
    start = WaveField(field.psi.copy(), grid)
    ramp = linear_ramp(0.1, 256)
    rec = propagate(ramp, MapHarmonicPotential(grid, constant_map()), start, record_every=1000,
                    hold=0.0)
    _, _, sigma = rec.arrays()
    assert np.max(np.abs(sigma / sigma[0] - 1)) < 0.01
    assert len(rec.times) == 11
    assert abs(start.norm - 1.0) < 1e-9


def test_norm_drift_raises(tf_case):
    grid, _, field, _ = tf_case
    bad = WaveField(field.psi * np.nan, grid)
    with pytest.raises(NumericalInstabilityError, match="step 1"):
        propagate(linear_ramp(0.001, 64), MapHarmonicPotential(grid, constant_map()), bad,
                  hold=0.0)


def test_compare_identity_and_offset():
    scen = harmonic_scenario(points=32)
    tr = ramp_to_trajectory(scen.ramp, scen.trap_map).with_hold(0.01)
    h = integrate_forward(tr, CondensateState.at_rest(tr.z0[0]), "rk4")
    g = tf_ground_state(np.sqrt(tr.omega2[:, 0]))
    rec = MarginalRecord()
    for k in range(0, tr.node_count, 100):
        rec.times.append(float(tr.times[k]))
        rec.com.append([0.0, 0.0, float(h.states[k, 0])])
        rec.sigma.append(list(h.states[k, 2::2] * g.radii / math.sqrt(7)))
    cmp = compare_with_scaling(rec, h, g)
    assert cmp.max_com_fraction == 0.0 and cmp.max_width_deviation < 1e-14
    rec.com = [[0.0, 0.0, c[2] + 10e-6] for c in rec.com]
    shifted = compare_with_scaling(rec, h, g)
    np.testing.assert_allclose(shifted.com_deviation, 10e-6, rtol=1e-9)


def test_record_csv(tmp_path, tf_case):
    grid, _, field, _ = tf_case
    rec = MarginalRecord()
    rec.add(0.0, field.density(), grid)
    rec.add(1e-3, field.density(), grid)
    rec.write_csv(tmp_path)
    summary = (tmp_path / "gpe_summary.csv").read_text().splitlines()
    assert summary[0] == "t,com_x,com_y,com_z,sigma_x,sigma_y,sigma_z" and len(summary) == 3
    mx = (tmp_path / "gpe_marginal_x.csv").read_text().splitlines()
    assert mx[0] == "t,x,density" and len(mx) == 1 + 2 * 32


def test_harmonic_scenario_geometry():
    scen = harmonic_scenario()
    lo, hi = scen.trap_map.bias_range
    assert float(scen.trap_map.z0(hi)) == pytest.approx(100e-6)
    assert float(scen.trap_map.z0(lo)) == pytest.approx(110e-6)
    assert scen.grid.counts == (64, 64, 64)
    # the fastest atom speed stays far below the grid's Nyquist speed
    tr = ramp_to_trajectory(scen.ramp, scen.trap_map)
    nyquist = math.pi * HBAR / (M * scen.grid.spacing.max())
    assert np.max(np.abs(tr.z0_dot)) < 0.25 * nyquist
