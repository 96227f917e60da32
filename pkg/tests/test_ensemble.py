import logging

import numpy as np
import pytest

from src.core import Configuration, min_pair_distance, scaling_params
from src.ensemble import (PairStatistics, chaos_test, compare_to_kinetic, convergence_study, estimate_marginal,
                          estimate_truncated_marginal, run_replicas, sample_initial, truncation_weights)
from src.exceptions import DomainMismatchError, InsufficientSamplesError, InvalidParameterError
from src.harddyn import evolve_hard
from src.kinetic import DistributionGrid, VelocityGrid
from src.schemas import RngState


@pytest.fixture
def initial_replicas(rng, two_bump):
    return run_replicas(60, scaling_params(50, 2), two_bump, 0.0, rng)


def test_sample_initial_is_overlap_free(rng, two_bump):
    Z = sample_initial(100, 0.01, two_bump, rng)
    assert Z.n == 100 and Z.geometry == "torus"
    assert min_pair_distance(Z) > 0.01
    with pytest.raises(InvalidParameterError):
        sample_initial(1, 0.01, two_bump, rng)


def test_sample_initial_warns_off_scaling(rng, two_bump, caplog):
    with caplog.at_level(logging.WARNING, logger="src.ensemble"):
        sample_initial(50, 0.01, two_bump, rng)
    assert "off the Boltzmann-Grad scaling" in caplog.text


def test_single_replica_matches_direct_evolution(rng, two_bump):
    params = scaling_params(40, 2)
    result = run_replicas(1, params, two_bump, 0.05, rng)
    Z0 = sample_initial(params.N, params.eps, two_bump, rng.child(0))
    Z1, _ = evolve_hard(Z0, 0.05)
    assert np.array_equal(result.final[0].x, Z1.x)
    assert np.array_equal(result.final[0].v, Z1.v)
    assert result.reseeds == 0


def test_replicas_at_zero_time_and_determinism(rng, two_bump):
    params = scaling_params(30, 2)
    a = run_replicas(5, params, two_bump, 0.0, rng)
    for Z0, Z1 in zip(a.initial, a.final):
        assert np.array_equal(Z0.v, Z1.v)
    b = run_replicas(5, params, two_bump, 0.02, rng)
    c = run_replicas(5, params, two_bump, 0.02, rng)
    assert all(np.array_equal(x.v, y.v) for x, y in zip(b.final, c.final))
    assert a.M == 5
    with pytest.raises(InvalidParameterError):
        run_replicas(0, params, two_bump, 0.0, rng)


def test_marginal_mass_and_replica_count(initial_replicas, small_grid, rng):
    est = estimate_marginal(initial_replicas.final, small_grid, rng, n_boot=50)
    assert est.total == pytest.approx(1.0, abs=1e-3)
    assert est.n_replicas == 60
    assert est.boot.shape == (50, 16, 16)
    assert np.all(est.stderr >= 0)
    assert len(est.to_frame()) == 16 * 16
    with pytest.raises(InsufficientSamplesError):
        estimate_marginal(initial_replicas.final[:10], small_grid, rng)
    with pytest.raises(InsufficientSamplesError):
        estimate_marginal([], small_grid, rng)


def test_pair_covariance_vanishes_for_independent_draws(initial_replicas, small_grid, rng):
    pairs = estimate_marginal(initial_replicas.final, small_grid, rng, s=2)
    assert isinstance(pairs, PairStatistics)
    assert pairs.n_pairs == 60 * 25
    assert abs(pairs.covariance) <= 4 * pairs.stderr
    with pytest.raises(InvalidParameterError):
        estimate_marginal(initial_replicas.final, small_grid, rng, s=3)


def test_truncation_weights_on_torus():
    Z = Configuration([[0.001, 0.5], [0.999, 0.5], [0.5, 0.5]], np.zeros((3, 2)))
    assert truncation_weights(Z, 0.01).tolist() == [0.0, 0.0, 1.0]
    assert truncation_weights(Z, 0.0).tolist() == [1.0, 1.0, 1.0]


def test_truncated_marginal_is_dominated(initial_replicas, small_grid, rng):
    configs = initial_replicas.final
    plain = estimate_marginal(configs, small_grid, rng, n_boot=0)
    truncated = estimate_truncated_marginal(configs, 0.1, small_grid, rng, n_boot=0)
    assert np.all(truncated.per_replica <= plain.per_replica + 1e-15)
    assert 0.0 < truncated.removed_fraction < 1.0
    same = estimate_truncated_marginal(configs, 0.0, small_grid, rng, n_boot=0)
    assert np.allclose(same.density, plain.density, rtol=0, atol=1e-14)
    assert same.removed_fraction == 0.0


def test_compare_to_own_law(initial_replicas, small_grid, rng, two_bump):
    est = estimate_marginal(initial_replicas.final, small_grid, rng, n_boot=50)
    cmp = compare_to_kinetic(est, DistributionGrid.from_law(small_grid, two_bump), factor=2)
    assert cmp.weak["one"] < 1e-3
    assert set(cmp.weak) == {"one", "vx", "vy", "v2", "vxvy", "gauss"}
    assert cmp.noise_floor > 0 and cmp.l1_stderr > 0
    assert cmp.weak_max == max(cmp.weak.values())


def test_compare_detects_wrong_law(initial_replicas, small_grid, rng):
    est = estimate_marginal(initial_replicas.final, small_grid, rng, n_boot=50)
    cmp = compare_to_kinetic(est, DistributionGrid.maxwellian(small_grid), factor=2)
    assert cmp.l1 > 0.3
    assert cmp.l1 > 3 * cmp.l1_stderr


def test_compare_rejects_grid_mismatch(initial_replicas, small_grid, rng, two_bump):
    est = estimate_marginal(initial_replicas.final, small_grid, rng, n_boot=0)
    other = VelocityGrid(cutoff=4.0, resolution=32)
    with pytest.raises(DomainMismatchError):
        compare_to_kinetic(est, DistributionGrid.from_law(other, two_bump))


def test_chaos_at_initial_time(rng, two_bump):
    result = run_replicas(200, scaling_params(30, 2), two_bump, 0.0, rng)
    chaos = chaos_test(result.initial)
    assert chaos.n_replicas == 200
    assert chaos.deficit <= 4 * chaos.stderr
    flat = chaos_test(result.initial, pairs=[("one", "one")])
    assert flat.deficit == 0.0
    with pytest.raises(InsufficientSamplesError):
        chaos_test(result.initial[:50])


def test_small_convergence_study_is_deterministic(two_bump):
    seen = []
    kwargs = dict(grid=VelocityGrid(cutoff=4.0, resolution=16), K=1, n_steps=2, n_boot=20, dsmc_particles=2000)
    a = convergence_study([40, 20], two_bump, 0.02, 30, RngState(seed=3),
                          observer=lambda N, kind, est: seen.append((N, kind)), **kwargs)
    b = convergence_study([20, 40], two_bump, 0.02, 30, RngState(seed=3), **kwargs)
    assert [row.N for row in a.rows] == [20, 40]
    assert seen == [(20, "plain"), (20, "truncated"), (40, "plain"), (40, "truncated")]
    assert [row.L1 for row in a.rows] == [row.L1 for row in b.rows]
    assert a.dsmc_check_l1 == b.dsmc_check_l1
    assert a.rows[0].slope_partial is None
    assert a.inconclusive == (a.slope is None or all(r.L1 <= r.noise_floor for r in a.rows))
    if a.inconclusive:
        assert a.required_m == 270
    with pytest.raises(InvalidParameterError):
        convergence_study([20], two_bump, 0.02, 30, RngState(seed=3), **kwargs)
