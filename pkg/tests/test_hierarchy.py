import math

import numpy as np
import pytest

from src.core import Configuration
from src.exceptions import InvalidParameterError
from src.hierarchy import (CollisionTree, estimate_series, flow_bbgky_tree, flow_boltzmann_batch, flow_boltzmann_tree,
                           paired_decrease_test, recollision_statistics, sample_tree, sample_tree_batch)
from src.kinetic import DistributionGrid, VelocityGrid, law_mean_free_time, picard_iterate
from src.scattering import CrossSection
from src.schemas import PotentialSpec, RngState


def _point(v=(0.5, 0.0)):
    return Configuration([[0.5, 0.5]], [list(v)], 0.0, "free")


def test_tree_batch_is_well_formed(rng):
    batch = sample_tree_batch(500, 3, 0.2, 1.0, rng.generator(), s=2)
    assert batch.n == 500 and batch.k == 3 and batch.d == 2
    assert np.all(batch.times < 0.2) and np.all(batch.times > 0)
    assert np.all(np.diff(batch.times, axis=1) <= 0)
    assert np.all(batch.progenitors < 2 + np.arange(3))
    assert np.allclose(np.linalg.norm(batch.omegas, axis=-1), 1.0)
    assert np.all(batch.weights > 0)
    with pytest.raises(InvalidParameterError):
        sample_tree_batch(10, 1, 0.2, 0.0, rng.generator())


def test_order_zero_tree_has_unit_weight(rng):
    tree, weight = sample_tree(0, 0.3, 1.0, rng)
    assert tree.k == 0
    assert weight == 1.0


def test_batch_and_single_routes_agree(rng, two_bump):
    batch = sample_tree_batch(50, 2, 0.1, 1.0, rng.generator())
    z = _point()
    values = flow_boltzmann_batch(batch, two_bump, z)
    for i in range(batch.n):
        single = flow_boltzmann_tree(batch.tree(i), two_bump, z).value
        assert single == pytest.approx(values[i], rel=1e-12, abs=1e-300)


def test_value_sign_is_product_of_adjunction_signs(rng, two_bump):
    batch = sample_tree_batch(100, 3, 0.1, 1.0, rng.generator())
    for i in range(batch.n):
        traj = flow_boltzmann_tree(batch.tree(i), two_bump, _point())
        if traj.value != 0.0:
            assert np.sign(traj.value) == np.prod(traj.signs)


def test_boltzmann_flow_conserves_at_adjunction(rng):
    tree, _ = sample_tree(1, 0.1, 1.0, rng)
    z = _point()
    traj = flow_boltzmann_tree(tree, None, z)
    assert math.isnan(traj.value)
    expected = z.v[0] + tree.velocities[0]
    assert np.allclose(traj.velocities.sum(axis=0), expected, atol=1e-14)
    assert np.sum(traj.velocities**2) == pytest.approx(z.v[0] @ z.v[0] + tree.velocities[0] @ tree.velocities[0])


def test_bbgky_at_zero_diameter_is_boltzmann(rng, two_bump):
    batch = sample_tree_batch(40, 2, 0.1, 1.0, rng.generator())
    z = _point()
    for i in range(batch.n):
        a = flow_boltzmann_tree(batch.tree(i), two_bump, z)
        b = flow_bbgky_tree(batch.tree(i), 0.0, two_bump, z)
        assert a.value == b.value
        assert np.array_equal(a.velocities, b.velocities)
        assert not b.recollision and not b.exclusion


def test_bbgky_hard_flow_keeps_spheres_apart(rng, two_bump):
    eps = 0.01
    batch = sample_tree_batch(30, 1, 0.2, 1.0, rng.generator())
    z = _point()
    for i in range(batch.n):
        tree = batch.tree(i)
        traj = flow_bbgky_tree(tree, eps, two_bump, z)
        assert np.linalg.norm(traj.positions[1] - traj.positions[0]) >= eps * (1 - 1e-9)
        assert np.allclose(traj.velocities.sum(axis=0), z.v[0] + tree.velocities[0], atol=1e-12)


def _two_loss_tree(second_omega):
    # both adjunctions on the root, 1e-4 apart, new particles at rest
    omegas = np.array([[1.0, 0.0], second_omega])
    return CollisionTree(0.1, 1, np.array([0.05, 0.05 - 1e-4]), np.array([0, 0]), omegas, np.zeros((2, 2)), 1.0)


def test_bbgky_overlapping_adjunction_is_excluded(two_bump):
    z = _point((0.5, 0.0))
    # the second sphere lands on top of the first adjoined one
    traj = flow_bbgky_tree(_two_loss_tree([1.0, 0.0]), 0.01, two_bump, z)
    assert traj.exclusion
    assert traj.value == 0.0
    assert np.linalg.norm(traj.positions[2] - traj.positions[1]) < 0.01
    clear = flow_bbgky_tree(_two_loss_tree([-1.0, 0.0]), 0.01, two_bump, z)
    assert not clear.exclusion
    assert clear.value != 0.0
    # no exclusion constraint without a diameter
    assert not flow_bbgky_tree(_two_loss_tree([1.0, 0.0]), 0.0, two_bump, z).exclusion


def test_bbgky_smooth_flow_runs(rng, two_bump):
    tree, _ = sample_tree(1, 0.02, 1.0, rng)
    z = _point()
    traj = flow_bbgky_tree(tree, 0.05, two_bump, z, potential=PotentialSpec(kind="soft", stiffness=100.0))
    assert math.isfinite(traj.value)
    assert np.allclose(traj.velocities.sum(axis=0), z.v[0] + tree.velocities[0], atol=1e-10)


def test_flows_check_inputs(rng):
    tree, _ = sample_tree(1, 0.1, 1.0, rng)
    two = Configuration([[0.1, 0.1], [0.5, 0.5]], [[0.0, 0.0], [1.0, 0.0]], 0.0, "free")
    with pytest.raises(InvalidParameterError):
        flow_boltzmann_tree(tree, None, two)
    with pytest.raises(InvalidParameterError):
        flow_bbgky_tree(tree, -0.1, None, _point())


def test_order_zero_is_exact(rng, two_bump):
    z = _point((1.0, 0.5))
    est = estimate_series("boltzmann", 0, 0.1, z, 100, 0.0, rng, two_bump)
    assert est.orders[0].mean == pytest.approx(float(two_bump.velocity_density(np.array([1.0, 0.5]))))
    assert est.orders[0].stderr == 0.0
    assert est.total_stderr == 0.0
    assert not est.low_precision


def test_series_is_reproducible(rng, two_bump):
    a = estimate_series("boltzmann", 2, 0.05, _point(), 2000, 0.0, rng, two_bump, block_size=500)
    b = estimate_series("boltzmann", 2, 0.05, _point(), 2000, 0.0, rng, two_bump, block_size=500)
    assert [o.mean for o in a.orders] == [o.mean for o in b.orders]
    assert len(a.orders) == 3
    assert a.orders[1].n == 2000


def test_bbgky_series_approaches_boltzmann_at_tiny_diameter(rng, two_bump):
    boltz = estimate_series("boltzmann", 2, 0.05, _point(), 200, 0.0, rng, two_bump, block_size=100)
    bbgky = estimate_series("bbgky", 2, 0.05, _point(), 200, 1e-6, rng, two_bump, block_size=100)
    for a, b in zip(boltz.orders, bbgky.orders):
        assert b.mean == pytest.approx(a.mean, rel=1e-5, abs=1e-12)
    assert bbgky.orders[1].recollision_fraction == 0.0


def test_series_rejects_bad_input(rng, two_bump):
    with pytest.raises(InvalidParameterError):
        estimate_series("landau", 1, 0.1, _point(), 100, 0.0, rng, two_bump)
    with pytest.raises(InvalidParameterError):
        estimate_series("boltzmann", 5, 0.1, _point(), 100, 0.0, rng, two_bump)
    with pytest.raises(InvalidParameterError):
        estimate_series("boltzmann", 1, 0.1, _point(), 1, 0.0, rng, two_bump)


def test_paired_decrease_test():
    large = np.array([True] * 10 + [False] * 10)
    small = np.zeros(20, dtype=bool)
    assert paired_decrease_test(large, small) == pytest.approx(0.5**10)
    assert paired_decrease_test(large, large) == 1.0


def test_recollision_statistics_validates(rng):
    with pytest.raises(InvalidParameterError):
        recollision_statistics([0.02, 0.01], 1, 1.0, 100, rng)
    with pytest.raises(InvalidParameterError):
        recollision_statistics([0.01, 0.02], 2, 1.0, 100, rng)
    with pytest.raises(InvalidParameterError):
        recollision_statistics([0.02, 0.0], 2, 1.0, 100, rng)


@pytest.mark.slow
@pytest.mark.parametrize("fraction", [0.025, 0.05, 0.1])
def test_boltzmann_series_matches_picard(two_bump, fraction):
    t = fraction * law_mean_free_time(two_bump, RngState(seed=5))
    grid = VelocityGrid(cutoff=4.0, resolution=32)
    picard = picard_iterate(DistributionGrid.from_law(grid, two_bump), CrossSection.hard_sphere(2), 3, t, n_steps=8)
    v = (1.375, 0.125)
    ix = int(np.argmin(np.abs(grid.centers - v[0])))
    iy = int(np.argmin(np.abs(grid.centers - v[1])))
    expected = picard.values[ix, iy]
    est = estimate_series("boltzmann", 3, t, _point(v), 40_000, 0.0, RngState(seed=11), two_bump)
    assert abs(est.total - expected) <= 3 * est.total_stderr


@pytest.mark.slow
def test_recollisions_become_rare_as_diameter_shrinks():
    stats = recollision_statistics([0.02, 0.01, 0.005], 2, 1.0, 20_000, RngState(seed=13))
    assert stats.fractions[0] > stats.fractions[1] > stats.fractions[2] > 0.0
    assert all(p < 0.05 for p in stats.paired_pvalues)
    assert stats.slope >= 0.2
    # the exclusion constraint bites less often on smaller spheres
    assert stats.exclusion_fractions[0] > stats.exclusion_fractions[1] > stats.exclusion_fractions[2]
