"""
src/core.py

Shared geometry and phase-space types:
- minimum-image displacement on the unit torus
- Boltzmann-Grad scaling (N eps^{d-1} = 1)
- Configuration value type and the energy functional
- overlap-free position sampling and equilibrium velocities
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from src.config import CONTACT_TOL
from src.exceptions import InsufficientSamplesError, InvalidConfigurationError, InvalidParameterError
from src.schemas import GaussianBoundParams, PotentialSpec, ScalingParams

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

Geometry = Literal["torus", "free"]


# ---------------------------------------------------------------------
# Phase-space types
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.x.shape != self.v.shape or self.x.shape not in ((2,), (3,)):
            raise InvalidParameterError(f"phase point needs matching d-vectors with d in (2, 3), got {self.x.shape}")
        if not np.all(np.isfinite(self.v)):
            raise InvalidConfigurationError("non-finite velocity")


@dataclass
class Configuration:
    """s particles: positions x (s, d), velocities v (s, d).

    On the torus the positions are reduced to [0, 1)^d on construction.
    """
    x: np.ndarray
    v: np.ndarray
    diameter: float = 0.0
    geometry: Geometry = "torus"
    _tree: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        v = np.array(self.v, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if v.ndim == 1:
            v = v[None, :]
        if x.shape != v.shape or x.ndim != 2 or x.shape[1] not in (2, 3):
            raise InvalidParameterError(f"positions {x.shape} and velocities {v.shape} must be (s, d), d in (2, 3)")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise InvalidConfigurationError("non-finite positions or velocities")
        if self.diameter < 0:
            raise InvalidParameterError("diameter must be nonnegative")
        if self.geometry not in ("torus", "free"):
            raise InvalidParameterError(f"unknown geometry {self.geometry!r}")
        if self.geometry == "torus":
            x = reduce_to_torus(x)
        self.x = x
        self.v = v

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def with_state(self, x: np.ndarray, v: np.ndarray) -> "Configuration":
        return Configuration(x, v, self.diameter, self.geometry)

    def copy(self) -> "Configuration":
        return self.with_state(self.x.copy(), self.v.copy())

    def kdtree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.x, boxsize=1.0 if self.geometry == "torus" else None)
        return self._tree

    def pairs_within(self, radius: float) -> np.ndarray:
        """Index pairs (i < j) at distance <= radius, shape (P, 2)."""
        if self.n < 2 or radius <= 0:
            return np.empty((0, 2), dtype=int)
        pairs = self.kdtree().query_pairs(radius, output_type="ndarray")
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if len(pairs) else pairs

    def validate_hard_spheres(self) -> None:
        if self.diameter > 0 and self.n > 1 and min_pair_distance(self) < self.diameter * (1.0 - CONTACT_TOL):
            raise InvalidConfigurationError(
                f"overlapping hard spheres: min distance {min_pair_distance(self):.6g} < diameter {self.diameter:.6g}")


# ---------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------
def reduce_to_torus(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    reduced = x - np.floor(x)
    # x - floor(x) rounds up to 1.0 for tiny negative x
    return np.where(reduced >= 1.0, 0.0, reduced)


def torus_displacement(x, y) -> np.ndarray:
    """Minimum-image representative of y - x, components in [-1/2, 1/2)."""
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    return diff - np.floor(diff + 0.5)


def min_pair_distance(Z: Configuration) -> float:
    if Z.n < 2:
        return math.inf
    dist, _ = Z.kdtree().query(Z.x, k=2)
    return float(dist[:, 1].min())


# ---------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------
def epsilon_from_N(N, d: int):
    """Diameter fixing N eps^{d-1} = 1."""
    if d not in (2, 3):
        raise InvalidParameterError(f"unsupported dimension d={d}")
    n = np.asarray(N)
    if np.any(n < 2):
        raise InvalidParameterError("N must be at least 2")
    eps = 1.0 / n if d == 2 else n ** -0.5
    return float(eps) if np.ndim(eps) == 0 else eps


def n_from_epsilon(eps, d: int):
    if d not in (2, 3):
        raise InvalidParameterError(f"unsupported dimension d={d}")
    n = np.rint(np.asarray(eps, dtype=float) ** (1 - d)).astype(np.int64)
    return int(n) if np.ndim(n) == 0 else n


def scaling_params(N: int, d: int, mean_free_time=None) -> ScalingParams:
    eps = epsilon_from_N(N, d)
    if eps >= 0.25:
        raise InvalidParameterError(f"N={N} gives eps={eps} >= 0.25 in d={d}")
    return ScalingParams(d=d, N=N, eps=eps, mean_free_time=mean_free_time)


# ---------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------
def energy(Z: Configuration, potential: PotentialSpec, eps: float) -> float:
    """sum |v|^2/2 + sum_{i<k} Phi(|x_i - x_k| / eps)."""
    kinetic = 0.5 * float(np.sum(np.sort((Z.v * Z.v).ravel())))
    if Z.n < 2 or eps <= 0:
        return kinetic
    if not potential.is_soft:
        if min_pair_distance(Z) < eps * (1.0 - CONTACT_TOL):
            raise InvalidConfigurationError("hard-sphere overlap in energy evaluation")
        return kinetic
    pairs = Z.pairs_within(eps)
    if len(pairs) == 0:
        return kinetic
    r = _pair_vectors(Z, pairs)
    dist = np.sqrt(np.sum(r * r, axis=1))
    interaction = np.sort(potential.phi(dist / eps))
    return kinetic + float(np.sum(interaction))


def _pair_vectors(Z: Configuration, pairs: np.ndarray) -> np.ndarray:
    """x_i - x_j for each row (i, j) of pairs."""
    if Z.geometry == "torus":
        return torus_displacement(Z.x[pairs[:, 1]], Z.x[pairs[:, 0]])
    return Z.x[pairs[:, 0]] - Z.x[pairs[:, 1]]


def gaussian_bound_holds(Z: Configuration, value: float, params: GaussianBoundParams,
                         potential: PotentialSpec, eps: float) -> bool:
    """|f(Z_s)| <= exp(mu s) exp(-beta E_eps(Z_s)) at one sampled configuration."""
    bound = math.exp(params.mu * Z.n - params.beta * energy(Z, potential, eps))
    return abs(value) <= bound


# ---------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------
def maxwellian_velocities(n: int, d: int, beta: float, gen: np.random.Generator) -> np.ndarray:
    if beta <= 0:
        raise InvalidParameterError("beta must be positive")
    return gen.normal(0.0, 1.0, size=(n, d)) / math.sqrt(beta)


def random_unit_vectors(n: int, d: int, gen: np.random.Generator) -> np.ndarray:
    omega = gen.normal(size=(n, d))
    return omega / np.sqrt(np.sum(omega * omega, axis=1, keepdims=True))


def sample_positions(n: int, d: int, eps: float, gen: np.random.Generator,
                     max_attempts: int = 1000) -> tuple[np.ndarray, int]:
    """Uniform positions on the torus conditioned on no pair within eps.

    Whole configurations are redrawn. Returns (positions, attempts used).
    """
    for attempt in range(1, max_attempts + 1):
        x = gen.random((n, d))
        if n < 2 or eps <= 0:
            return x, attempt
        tree = cKDTree(x, boxsize=1.0)
        if not tree.query_pairs(eps):
            return x, attempt
    raise InsufficientSamplesError(
        f"no overlap-free configuration in {max_attempts} attempts (n={n}, eps={eps}); "
        "acceptance rate below 1e-3, check the scaling")
