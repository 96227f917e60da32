import math

import numpy as np
import pytest

from src.exceptions import InsufficientSamplesError, InvalidParameterError
from src.kinetic import (DistributionGrid, ParticleEnsemble, VelocityGrid, coarsen, collision_operator_grid,
                         collision_transform, dsmc_moment_series, dsmc_run, fourth_moment_ratio, grid_moments_of,
                         histogram_density, knn_entropy, l1_distance, law_mean_free_time, maxwellian_fourth_ratio,
                         moments, picard_iterate)
from src.scattering import CrossSection
from src.schemas import RngState

HARD = CrossSection.hard_sphere(2)
GRID = VelocityGrid(cutoff=4.0, resolution=32)


def _value_at(values, grid, v):
    idx = np.argmin(np.abs(grid.centers - v[0])), np.argmin(np.abs(grid.centers - v[1]))
    return values[idx]


def test_collision_transform_conserves():
    v, v1 = np.array([1.0, -0.5]), np.array([-0.3, 2.0])
    omega = np.array([math.cos(0.7), math.sin(0.7)])
    a, b = collision_transform(v, v1, omega)
    assert np.allclose(a + b, v + v1, atol=1e-15)
    assert a @ a + b @ b == pytest.approx(v @ v + v1 @ v1, rel=1e-14)
    # involution
    c, d = collision_transform(a, b, omega)
    assert np.allclose(c, v) and np.allclose(d, v1)
    with pytest.raises(InvalidParameterError):
        collision_transform(v, v1, np.array([1.0, 1.0]))


def test_distribution_grid_validation(small_grid):
    with pytest.raises(InvalidParameterError):
        DistributionGrid(small_grid, np.zeros((8, 8)))
    with pytest.raises(InvalidParameterError):
        DistributionGrid(small_grid, -np.ones((16, 16)))
    f = DistributionGrid.maxwellian(small_grid)
    assert f.mass() == pytest.approx(1.0)
    assert len(f.to_frame()) == 16 * 16


def test_coarsen_and_l1(small_grid):
    values = np.arange(16 * 16, dtype=float).reshape(16, 16)
    assert coarsen(values, 2).shape == (8, 8)
    assert coarsen(values, 2).sum() * 4 == pytest.approx(values.sum())
    with pytest.raises(InvalidParameterError):
        coarsen(values, 3)
    assert l1_distance(values, values, small_grid, 2) == 0.0


def test_grid_operator_conserves_moments(two_bump):
    f = DistributionGrid.from_law(GRID, two_bump)
    q = collision_operator_grid(f, HARD)
    assert np.allclose(grid_moments_of(q, GRID), 0.0, atol=1e-10)


def test_grid_operator_sign_pattern(two_bump):
    f = DistributionGrid.from_law(GRID, two_bump)
    q = collision_operator_grid(f, HARD)
    # bumps are depleted, collisions feed the perpendicular direction
    assert _value_at(q, GRID, (1.375, 0.125)) < 0.0
    assert _value_at(q, GRID, (-1.375, 0.125)) < 0.0
    assert _value_at(q, GRID, (0.125, 1.375)) > 0.0


def _maxwellian_residual(resolution, **kwargs):
    grid = VelocityGrid(cutoff=4.0, resolution=resolution)
    return np.abs(collision_operator_grid(DistributionGrid.maxwellian(grid), HARD, **kwargs)).max()


def test_grid_operator_nearly_vanishes_on_maxwellian():
    coarse, default = _maxwellian_residual(16), _maxwellian_residual(32)
    assert default < 1e-3
    assert default < coarse


@pytest.mark.slow
def test_maxwellian_residual_shrinks_under_refinement():
    residuals = [_maxwellian_residual(g) for g in (16, 32, 64)]
    assert residuals[0] > residuals[1] > residuals[2]
    assert residuals[1] < 1e-3


def test_grid_operator_needs_enough_angles(small_grid):
    with pytest.raises(InvalidParameterError):
        collision_operator_grid(DistributionGrid.maxwellian(small_grid), HARD, n_angles=8)


def test_picard_orders(small_grid, two_bump):
    f0 = DistributionGrid.from_law(small_grid, two_bump)
    zero = picard_iterate(f0, HARD, 0, 0.1)
    assert np.array_equal(zero.values, f0.values)
    res = picard_iterate(f0, HARD, 2, 0.05, n_steps=4)
    assert len(res.iterates) == 3
    assert res.values.sum() * small_grid.cell_volume == pytest.approx(1.0, abs=1e-9)
    assert not np.array_equal(res.values, f0.values)
    with pytest.raises(InvalidParameterError):
        picard_iterate(f0, HARD, 5, 0.1)
    with pytest.raises(InvalidParameterError):
        picard_iterate(f0, HARD, 1, -0.1)


def test_picard_flags_negative_values(small_grid, two_bump, caplog):
    f0 = DistributionGrid.from_law(small_grid, two_bump)
    assert not picard_iterate(f0, HARD, 1, 0.01, n_steps=2).negative
    # several mean free times in one linear step empties the bumps past zero
    res = picard_iterate(f0, HARD, 1, 2.0, n_steps=2)
    assert res.negative
    assert res.values.min() < -1e-4
    assert "validity window" in caplog.text


def test_dsmc_conserves(rng, two_bump):
    ens = ParticleEnsemble.from_law(two_bump, 4000, rng)
    out = dsmc_run(ens, HARD, 0.5, 0.05, rng.child(1))
    assert out.collisions > 0
    assert np.allclose(out.velocities.sum(axis=0), ens.velocities.sum(axis=0), atol=1e-9)
    e0, e1 = np.sum(ens.velocities**2), np.sum(out.velocities**2)
    assert abs(e1 - e0) / e0 <= 1e-10
    assert out.time == pytest.approx(0.5)


def test_dsmc_is_reproducible(rng, two_bump):
    ens = ParticleEnsemble.from_law(two_bump, 1000, rng)
    a = dsmc_run(ens, HARD, 0.2, 0.05, rng.child(1))
    b = dsmc_run(ens, HARD, 0.2, 0.05, rng.child(1))
    assert np.array_equal(a.velocities, b.velocities)


def test_dsmc_collision_frequency_at_equilibrium(rng, maxwellian):
    ens = ParticleEnsemble.from_law(maxwellian, 20_000, rng)
    out = dsmc_run(ens, HARD, 1.0, 0.05, rng.child(1))
    assert out.collision_frequency() == pytest.approx(2.0 * math.sqrt(math.pi), rel=0.05)
    with pytest.raises(InsufficientSamplesError):
        ens.collision_frequency()


def test_dsmc_majorant_raised_when_too_small(rng, maxwellian):
    ens = ParticleEnsemble.from_law(maxwellian, 2000, rng)
    out = dsmc_run(ens, HARD, 0.2, 0.05, rng.child(1), b_max=0.05)
    assert out.collisions > 0


def test_dsmc_relaxes_fourth_moment(rng, two_bump):
    ens = ParticleEnsemble.from_law(two_bump, 20_000, rng)
    start = fourth_moment_ratio(ens)
    out = dsmc_run(ens, HARD, 3.0, 0.05, rng.child(1))
    target = maxwellian_fourth_ratio(2)
    assert target == 2.0
    assert abs(fourth_moment_ratio(out) - target) < abs(start - target)
    assert fourth_moment_ratio(out) == pytest.approx(target, rel=0.05)


def test_two_temperature_mixture_relaxes(rng):
    ens = ParticleEnsemble.two_temperature(20_000, 2, 4.0, 0.25, rng)
    start = fourth_moment_ratio(ens)
    assert start > 2.5
    mid = dsmc_run(ens, HARD, 0.1, 0.02, rng.child(1))
    end = dsmc_run(mid, HARD, 3.0, 0.05, rng.child(2))
    assert start > fourth_moment_ratio(mid) > fourth_moment_ratio(end)
    assert fourth_moment_ratio(end) == pytest.approx(2.0, rel=0.05)


def test_moment_series_rows(rng, two_bump):
    ens = ParticleEnsemble.from_law(two_bump, 500, rng)
    _, rows = dsmc_moment_series(ens, HARD, 0.4, 0.05, rng, every=2, with_entropy=False)
    assert len(rows) == 1 + 8 // 2
    assert rows[0]["t"] == 0.0
    assert {"mass", "px", "py", "energy", "m4", "entropy"} <= set(rows[0])


def test_knn_entropy_of_gaussian(rng):
    v = rng.generator().normal(size=(20_000, 2))
    assert knn_entropy(v) == pytest.approx(-(1.0 + math.log(2.0 * math.pi)), abs=0.03)
    with pytest.raises(InsufficientSamplesError):
        knn_entropy(v[:3])


def test_entropy_decreases_under_dsmc(rng, two_bump):
    ens = ParticleEnsemble.from_law(two_bump, 10_000, rng)
    out = dsmc_run(ens, HARD, 1.0, 0.05, rng.child(1))
    assert moments(out).entropy < moments(ens).entropy


def test_grid_and_particle_moments_agree(rng, maxwellian):
    grid_m = moments(DistributionGrid.maxwellian(GRID))
    assert grid_m.mass == pytest.approx(1.0)
    assert grid_m.energy == pytest.approx(1.0, rel=0.01)
    ens = ParticleEnsemble.from_law(maxwellian, 50_000, rng)
    part_m = moments(ens, rng=rng.child(2))
    assert part_m.energy == pytest.approx(1.0, rel=0.03)
    assert part_m.entropy == pytest.approx(grid_m.entropy, abs=0.05)
    assert part_m.entropy_stderr is not None and part_m.entropy_stderr > 0


def test_law_mean_free_time(rng, maxwellian):
    assert law_mean_free_time(maxwellian, rng) == pytest.approx(1.0 / (2.0 * math.sqrt(math.pi)), rel=0.02)


def test_histogram_density_normalised(rng, maxwellian, small_grid):
    v = maxwellian.sample(10_000, rng.generator())
    density = histogram_density(v, small_grid)
    assert density.sum() * small_grid.cell_volume == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(InsufficientSamplesError):
        histogram_density(np.empty((0, 2)), small_grid)


@pytest.mark.slow
def test_picard_matches_dsmc_at_short_time(two_bump):
    t = 0.1
    f0 = DistributionGrid.from_law(GRID, two_bump)
    picard = picard_iterate(f0, HARD, 3, t, n_steps=8)
    rng = RngState(seed=7)
    ens = dsmc_run(ParticleEnsemble.from_law(two_bump, 200_000, rng), HARD, t, 0.01, rng.child(1))
    dist = l1_distance(picard.values, histogram_density(ens.velocities, GRID), GRID, factor=2)
    assert dist <= 0.03
    # and the solution has moved away from the initial datum
    assert l1_distance(f0.values, picard.values, GRID) > 0.01
