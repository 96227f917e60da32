import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.core import (Configuration, energy, epsilon_from_N, gaussian_bound_holds, maxwellian_velocities,
                      min_pair_distance, n_from_epsilon, random_unit_vectors, sample_positions, scaling_params,
                      torus_displacement)
from src.exceptions import InsufficientSamplesError, InvalidConfigurationError, InvalidParameterError
from src.schemas import GaussianBoundParams, InitialLaw, PotentialSpec, RngState


def test_boltzmann_grad_scaling():
    assert epsilon_from_N(100, 2) == pytest.approx(0.01)
    assert epsilon_from_N(100, 3) == pytest.approx(0.1)
    assert n_from_epsilon(0.01, 2) == 100
    assert n_from_epsilon(0.1, 3) == 100
    ladder = np.array([125, 250, 500, 1000])
    assert np.array_equal(n_from_epsilon(epsilon_from_N(ladder, 2), 2), ladder)


def test_scaling_rejects_bad_input():
    with pytest.raises(InvalidParameterError):
        epsilon_from_N(1, 2)
    with pytest.raises(InvalidParameterError):
        epsilon_from_N(10, 4)
    with pytest.raises(InvalidParameterError):
        scaling_params(2, 2)
    params = scaling_params(1000, 2)
    assert params.N * params.eps == pytest.approx(1.0)


def test_torus_displacement_is_minimum_image():
    assert np.allclose(torus_displacement([0.9, 0.5], [0.1, 0.5]), [0.2, 0.0])
    assert np.allclose(torus_displacement([0.1, 0.5], [0.9, 0.5]), [-0.2, 0.0])
    Z = Configuration([[1.25, -0.25]], [[0.0, 0.0]])
    assert np.allclose(Z.x, [[0.25, 0.75]])


def test_min_distance_wraps_around():
    Z = Configuration([[0.001, 0.5], [0.999, 0.5]], np.zeros((2, 2)))
    assert min_pair_distance(Z) == pytest.approx(0.002)
    free = Configuration([[0.001, 0.5], [0.999, 0.5]], np.zeros((2, 2)), geometry="free")
    assert min_pair_distance(free) == pytest.approx(0.998)


def test_overlap_is_rejected():
    Z = Configuration([[0.1, 0.1], [0.105, 0.1]], np.zeros((2, 2)), diameter=0.01)
    with pytest.raises(InvalidConfigurationError):
        Z.validate_hard_spheres()
    with pytest.raises(InvalidConfigurationError):
        energy(Z, PotentialSpec(), 0.01)


def test_configuration_rejects_bad_shapes():
    with pytest.raises(InvalidParameterError):
        Configuration(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(InvalidConfigurationError):
        Configuration([[0.1, 0.2]], [[np.nan, 0.0]])


def test_pairs_within_sorted():
    x = np.array([[0.5, 0.5], [0.1, 0.1], [0.505, 0.5], [0.105, 0.1]])
    pairs = Configuration(x, np.zeros_like(x)).pairs_within(0.01)
    assert pairs.tolist() == [[0, 2], [1, 3]]


def test_energy_hard_and_soft():
    v = np.array([[1.0, 0.0], [0.0, 2.0]])
    Z = Configuration([[0.5, 0.5], [0.505, 0.5]], v)
    assert energy(Z, PotentialSpec(), 0.001) == pytest.approx(2.5)
    soft = PotentialSpec(kind="soft", stiffness=100.0)
    # r / eps = 0.5 -> 100 * 0.5^2
    assert energy(Z, soft, 0.01) == pytest.approx(2.5 + 25.0)


def test_gaussian_bound_check():
    Z = Configuration([[0.2, 0.2]], [[1.0, 0.0]])
    params = GaussianBoundParams(beta=1.0, mu=0.0)
    assert gaussian_bound_holds(Z, 0.5, params, PotentialSpec(), 0.01)
    assert not gaussian_bound_holds(Z, 0.7, params, PotentialSpec(), 0.01)


def test_sample_positions_overlap_free(rng):
    x, attempts = sample_positions(100, 2, 0.01, rng.generator())
    assert attempts >= 1
    assert min_pair_distance(Configuration(x, np.zeros_like(x))) > 0.01


def test_sample_positions_gives_up():
    with pytest.raises(InsufficientSamplesError):
        sample_positions(100, 2, 0.5, RngState(seed=1).generator(), max_attempts=5)


def test_rng_streams_are_reproducible(rng):
    a = rng.generator().random(5)
    b = rng.generator().random(5)
    c = rng.child(1).generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert rng.child(3) == rng.child(3)


def test_equilibrium_draws(rng):
    gen = rng.generator()
    v = maxwellian_velocities(50_000, 2, 2.0, gen)
    assert np.var(v, axis=0) == pytest.approx([0.5, 0.5], rel=0.03)
    omega = random_unit_vectors(100, 3, gen)
    assert np.allclose(np.linalg.norm(omega, axis=1), 1.0)
    with pytest.raises(InvalidParameterError):
        maxwellian_velocities(10, 2, 0.0, gen)


def test_potential_profile():
    soft = PotentialSpec(kind="soft", stiffness=10.0)
    assert soft.phi(1.2) == 0.0
    assert soft.phi(0.0) == pytest.approx(10.0)
    assert soft.dphi(0.5) == pytest.approx(-10.0)
    with pytest.raises(ValueError):
        PotentialSpec().dphi(0.5)
    with pytest.raises(ValidationError):
        PotentialSpec(kind="soft", profile=lambda r: 1.0 - r)


def test_initial_law(two_bump):
    axis = np.linspace(-6, 6, 601)
    h = axis[1] - axis[0]
    mesh = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    assert two_bump.velocity_density(mesh).sum() * h * h == pytest.approx(1.0, abs=1e-6)
    assert math.isfinite(two_bump.gaussian_bound())
    assert two_bump.lipschitz_constant() > 0
    v = two_bump.sample(20_000, RngState(seed=3).generator())
    assert np.mean(v[:, 0] ** 2) == pytest.approx(1.5**2 + 0.25, rel=0.03)
    with pytest.raises(ValidationError):
        InitialLaw.two_bump(beta=5.0)
