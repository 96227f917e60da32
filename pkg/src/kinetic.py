"""
src/kinetic.py

Spatially homogeneous Boltzmann equation:
- collision transform and the grid collision operator Q(f, f)
- Picard iteration of f(t) = f0 + int_0^t Q(f, f)
- a Nanbu-Babovsky particle solver (DSMC)
- moments and entropy estimates for grids and ensembles
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from src.config import GRID_CUTOFF, GRID_RESOLUTION, N_ANGLES, UNIT_TOL
from src.core import random_unit_vectors
from src.exceptions import AdmissibilityError, InsufficientSamplesError, InvalidParameterError
from src.scattering import CrossSection
from src.schemas import InitialLaw, Moments, RngState

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def collision_transform(v, v1, omega) -> tuple[np.ndarray, np.ndarray]:
    """v' = v + (omega.(v1 - v)) omega, v1' = v1 - (omega.(v1 - v)) omega."""
    v = np.asarray(v, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    omega = np.asarray(omega, dtype=float)
    norm = np.sqrt(np.sum(omega * omega, axis=-1))
    if np.any(np.abs(norm - 1.0) > UNIT_TOL):
        raise InvalidParameterError("omega must be a unit vector")
    exchange = np.sum(omega * (v1 - v), axis=-1, keepdims=True) * omega
    return v + exchange, v1 - exchange


# ---------------------------------------------------------------------
# Velocity grids
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class VelocityGrid:
    """Cell-centred (G x G) grid on [-V, V]^2."""
    cutoff: float = GRID_CUTOFF
    resolution: int = GRID_RESOLUTION

    def __post_init__(self):
        if self.cutoff <= 0 or self.resolution < 2:
            raise InvalidParameterError("grid needs positive cutoff and resolution >= 2")

    @property
    def d(self) -> int:
        return 2

    @property
    def h(self) -> float:
        return 2.0 * self.cutoff / self.resolution

    @property
    def cell_volume(self) -> float:
        return self.h**2

    @property
    def centers(self) -> np.ndarray:
        return -self.cutoff + self.h * (np.arange(self.resolution) + 0.5)

    @property
    def points(self) -> np.ndarray:
        """Cell centres, shape (G, G, 2), axis 0 is v_x."""
        c = self.centers
        return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)

    def contains(self, v: np.ndarray) -> np.ndarray:
        return np.all(np.abs(v) <= self.cutoff, axis=-1)

    def fractional_index(self, v: np.ndarray) -> np.ndarray:
        """Map coordinates of velocities, shape (2, ...) for map_coordinates."""
        return np.moveaxis((v + self.cutoff) / self.h - 0.5, -1, 0)

    def histogram(self, velocities: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
        edges = np.linspace(-self.cutoff, self.cutoff, self.resolution + 1)
        counts, _, _ = np.histogram2d(velocities[:, 0], velocities[:, 1], bins=[edges, edges], weights=weights)
        return counts


@dataclass(frozen=True, eq=False)
class DistributionGrid:
    grid: VelocityGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.resolution, self.grid.resolution):
            raise InvalidParameterError(f"values shape {values.shape} does not match the grid")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise InvalidParameterError("distribution values must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: VelocityGrid, density: Callable[[np.ndarray], np.ndarray],
                      normalize: bool = True) -> "DistributionGrid":
        out = cls(grid, density(grid.points))
        return out.normalized() if normalize else out

    @classmethod
    def from_law(cls, grid: VelocityGrid, law: InitialLaw) -> "DistributionGrid":
        if law.d != 2:
            raise InvalidParameterError("grid work is two-dimensional")
        return cls.from_function(grid, law.velocity_density)

    @classmethod
    def maxwellian(cls, grid: VelocityGrid, beta: float = 1.0, mean=(0.0, 0.0)) -> "DistributionGrid":
        return cls.from_law(grid, InitialLaw(d=2, means=[list(mean)], covariances=[(np.eye(2) / beta).tolist()],
                                             weights=[1.0], beta=0.5 * beta))

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def normalized(self) -> "DistributionGrid":
        return DistributionGrid(self.grid, self.values / self.mass())

    def to_frame(self) -> pd.DataFrame:
        pts = self.grid.points.reshape(-1, 2)
        return pd.DataFrame({"vx": pts[:, 0], "vy": pts[:, 1], "f": self.values.ravel()})


def coarsen(values: np.ndarray, factor: int) -> np.ndarray:
    """Average factor x factor blocks of cells."""
    if factor == 1:
        return values
    G = values.shape[0]
    if G % factor:
        raise InvalidParameterError(f"resolution {G} not divisible by {factor}")
    return values.reshape(G // factor, factor, G // factor, factor).mean(axis=(1, 3))


def l1_distance(a: np.ndarray, b: np.ndarray, grid: VelocityGrid, factor: int = 1) -> float:
    h2 = grid.cell_volume * factor**2
    return float(np.sum(np.abs(coarsen(a, factor) - coarsen(b, factor))) * h2)


# ---------------------------------------------------------------------
# Grid collision operator
# ---------------------------------------------------------------------
def _moment_basis(grid: VelocityGrid) -> np.ndarray:
    pts = grid.points.reshape(-1, 2)
    return np.column_stack([np.ones(len(pts)), pts[:, 0], pts[:, 1], np.sum(pts * pts, axis=1)])


def _collision_values(values: np.ndarray, grid: VelocityGrid, b: CrossSection, n_angles: int = N_ANGLES,
                      order: int = 3, conservative: bool = True, chunk: int = 16) -> np.ndarray:
    """Q(f, f) on the grid for a (possibly signed) array of values."""
    if n_angles < 16:
        raise InvalidParameterError("at least 16 angular nodes are required")
    if b.d != 2:
        raise InvalidParameterError("grid collision operator is two-dimensional")
    if not math.isfinite(b.bound(2.0 * math.sqrt(2.0) * grid.cutoff)):
        raise AdmissibilityError("collision kernel unbounded on the grid's velocity range")
    G = grid.resolution
    vel = grid.points.reshape(-1, 2)
    f = values.ravel()
    angles = 2.0 * math.pi * np.arange(n_angles) / n_angles
    omega = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    weight = b.sphere_factor * grid.cell_volume * (2.0 * math.pi / n_angles)
    q = np.empty(len(vel))
    for start in range(0, len(vel), chunk):
        v = vel[start:start + chunk]
        w = v[:, None, :] - vel[None, :, :]
        proj = np.einsum("cpk,ak->cpa", w, omega)
        kernel = b(w[:, :, None, :], omega[None, None, :, :])
        shift = proj[..., None] * omega
        v_post = v[:, None, None, :] - shift
        v1_post = vel[None, :, None, :] + shift
        inside = grid.contains(v_post) & grid.contains(v1_post)
        f_post = map_coordinates(values, grid.fractional_index(v_post).reshape(2, -1),
                                 order=order, mode="constant", cval=0.0).reshape(proj.shape)
        f1_post = map_coordinates(values, grid.fractional_index(v1_post).reshape(2, -1),
                                  order=order, mode="constant", cval=0.0).reshape(proj.shape)
        kernel = np.where(inside, kernel, 0.0)
        gain = np.sum(f_post * f1_post * kernel, axis=(1, 2))
        loss = f[start:start + chunk] * np.sum(f[None, :, None] * kernel, axis=(1, 2))
        q[start:start + chunk] = weight * (gain - loss)

    basis = _moment_basis(grid)
    defect = basis.T @ q * grid.cell_volume
    logger.debug("raw collision-operator defect: mass %.3e momentum (%.3e, %.3e) energy %.3e", *defect)
    if conservative:
        # f-weighted least-change correction removing the four moments
        wts = np.abs(f) + 1e-12 * np.abs(f).max()
        gram = (basis * wts[:, None]).T @ basis * grid.cell_volume
        lam = np.linalg.solve(gram, defect)
        q = q - wts * (basis @ lam)
    return q.reshape(G, G)


def collision_operator_grid(f: DistributionGrid, b: CrossSection, n_angles: int = N_ANGLES, order: int = 3,
                            conservative: bool = True) -> np.ndarray:
    """Strong-form Q(f, f)(v) on the grid's cell centres.

    Gain values at post-collisional velocities are interpolated (order 1:
    bilinear, order 3: cubic spline, the default). A (v, v1, omega) term whose
    post-collisional pair leaves the grid is dropped as a whole.
    """
    return _collision_values(f.values, f.grid, b, n_angles=n_angles, order=order, conservative=conservative)


def grid_moments_of(q: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """(mass, p_x, p_y, sum |v|^2) moments of a grid function."""
    return _moment_basis(grid).T @ q.ravel() * grid.cell_volume


# ---------------------------------------------------------------------
# Picard iteration
# ---------------------------------------------------------------------
@dataclass(eq=False)
class PicardResult:
    grid: VelocityGrid
    values: np.ndarray
    t: float
    K: int
    negative: bool = False
    # final-time value of each iterate 0..K
    iterates: list[np.ndarray] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        pts = self.grid.points.reshape(-1, 2)
        return pd.DataFrame({"vx": pts[:, 0], "vy": pts[:, 1], "f": self.values.ravel()})


def picard_iterate(f0: DistributionGrid, b: CrossSection, K: int, t: float, n_steps: int = 8,
                   n_angles: int = N_ANGLES, order: int = 3, mean_free_time: Optional[float] = None) -> PicardResult:
    """f^{(n+1)}(t) = f0 + int_0^t Q(f^{(n)}, f^{(n)}) ds, trapezoid rule on n_steps intervals."""
    if not 0 <= K <= 4:
        raise InvalidParameterError("Picard order must be in 0..4")
    if t < 0:
        raise InvalidParameterError("t must be nonnegative")
    if mean_free_time is not None and t > 0.5 * mean_free_time:
        logger.warning("Picard iteration at t=%.3g beyond half a mean free time (%.3g)", t, mean_free_time)
    grid = f0.grid
    base = f0.values
    iterates = [base.copy()]
    if K == 0 or t == 0:
        return PicardResult(grid, base.copy(), t, K, False, iterates * (K + 1) if K else iterates)
    nodes = np.linspace(0.0, t, n_steps + 1)
    q0 = _collision_values(base, grid, b, n_angles=n_angles, order=order)
    current = base[None] + nodes[:, None, None] * q0[None]
    iterates.append(current[-1].copy())
    for _ in range(K - 1):
        q = np.stack([_collision_values(current[m], grid, b, n_angles=n_angles, order=order)
                      for m in range(n_steps + 1)])
        current = base[None] + cumulative_trapezoid(q, nodes, axis=0, initial=0.0)
        iterates.append(current[-1].copy())
    result = current[-1]
    negative = bool(result.min() < -1e-4)
    if negative:
        logger.warning("Picard iterate %d has values down to %.3e: expansion outside its validity window",
                       K, result.min())
    return PicardResult(grid, result, t, K, negative, iterates)


# ---------------------------------------------------------------------
# Particle solver
# ---------------------------------------------------------------------
@dataclass(eq=False)
class ParticleEnsemble:
    velocities: np.ndarray
    time: float = 0.0
    # cumulative accepted collisions
    collisions: int = 0

    def __post_init__(self):
        self.velocities = np.array(self.velocities, dtype=float, ndmin=2)

    @property
    def size(self) -> int:
        return self.velocities.shape[0]

    @property
    def d(self) -> int:
        return self.velocities.shape[1]

    @classmethod
    def from_law(cls, law: InitialLaw, M: int, rng: RngState) -> "ParticleEnsemble":
        return cls(law.sample(M, rng.generator()))

    @classmethod
    def two_temperature(cls, M: int, d: int, beta_hot: float, beta_cold: float, rng: RngState) -> "ParticleEnsemble":
        gen = rng.generator()
        half = M // 2
        hot = gen.normal(size=(half, d)) / math.sqrt(beta_hot)
        cold = gen.normal(size=(M - half, d)) / math.sqrt(beta_cold)
        return cls(np.vstack([hot, cold]))

    def collision_frequency(self) -> float:
        """Accepted collisions per particle per unit time."""
        if self.time <= 0:
            raise InsufficientSamplesError("ensemble has not been evolved")
        return 2.0 * self.collisions / (self.size * self.time)


def _collide_candidates(v: np.ndarray, n_cand: int, b: CrossSection, b_max: float,
                        gen: np.random.Generator) -> tuple[int, float]:
    """Nanbu-Babovsky sweep over n_cand disjoint candidate pairs, in place.

    Returns (accepted, largest kernel value seen); the sweep stops as soon
    as a value above b_max shows up.
    """
    M, d = v.shape
    done = 0
    accepted = 0
    while done < n_cand:
        batch = min(n_cand - done, M // 2)
        perm = gen.permutation(M)
        i, j = perm[:batch], perm[batch:2 * batch]
        omega = random_unit_vectors(batch, d, gen)
        kernel = b(v[i] - v[j], omega)
        peak = float(kernel.max())
        if peak > b_max:
            return accepted, peak
        take = gen.random(batch) * b_max < kernel
        v[i[take]], v[j[take]] = collision_transform(v[i[take]], v[j[take]], omega[take])
        accepted += int(take.sum())
        done += batch
    return accepted, 0.0


def dsmc_run(ens: ParticleEnsemble, b: CrossSection, t: float, dt: float, rng: RngState,
             b_max: Optional[float] = None, mean_free_time: Optional[float] = None,
             observer: Optional[Callable[[float, np.ndarray], None]] = None) -> ParticleEnsemble:
    """Majorant-rate particle solver for the homogeneous Boltzmann equation.

    Per step, (M-1) * sphere_factor * |S| * b_max * dt / 2 candidate pairs
    (fractional part carried over) are tried and accepted with
    probability b / b_max.
    """
    if t < 0 or dt <= 0:
        raise InvalidParameterError("t must be nonnegative and dt positive")
    if mean_free_time is not None and dt > 0.1 * mean_free_time:
        logger.warning("DSMC step %.3g exceeds a tenth of the mean free time %.3g", dt, mean_free_time)
    v = ens.velocities.copy()
    M, d = v.shape
    if M < 2 or t == 0:
        return ParticleEnsemble(v, ens.time + t, ens.collisions)
    gen = rng.generator()
    steps = max(1, math.ceil(t / dt - 1e-9))
    h = t / steps
    if b_max is None:
        speeds = np.sqrt(np.sum(v * v, axis=1))
        b_max = b.bound(2.0 * float(speeds.max()))
    rate_const = b.sphere_factor * sphere_area(d) * h / 2.0
    carry = 0.0
    collisions = ens.collisions
    for step in range(steps):
        while True:
            expected = (M - 1) * rate_const * b_max + carry
            n_cand = int(expected)
            trial = v.copy()
            accepted, peak = _collide_candidates(trial, n_cand, b, b_max, gen)
            if peak > b_max:
                while b_max < peak:
                    b_max *= 2.0
                logger.info("DSMC majorant raised to %.4g at step %d, recounting", b_max, step)
                continue
            break
        v = trial
        carry = expected - n_cand
        collisions += accepted
        if observer is not None:
            observer(ens.time + (step + 1) * h, v)
    out = ParticleEnsemble(v, ens.time + t, collisions)
    logger.info("DSMC: %d collisions over t=%.4g, M=%d", collisions - ens.collisions, t, M)
    return out


# ---------------------------------------------------------------------
# Moments and entropy
# ---------------------------------------------------------------------
def knn_entropy(velocities: np.ndarray, k: int = 4) -> float:
    """Kozachenko-Leonenko estimate of int f log f."""
    M, d = velocities.shape
    if M <= k:
        raise InsufficientSamplesError(f"need more than {k} samples for the k-NN entropy")
    dist, _ = cKDTree(velocities).query(velocities, k=k + 1)
    radius = np.maximum(dist[:, k], 1e-300)
    log_ball = (d / 2) * math.log(math.pi) - gammaln(d / 2 + 1)
    h = digamma(M) - digamma(k) + log_ball + d * float(np.mean(np.log(radius)))
    return -float(h)


def entropy_stderr(velocities: np.ndarray, rng: RngState, n_sub: int = 10, k: int = 4) -> float:
    """Error bar of knn_entropy from disjoint subsamples, rescaled to the full size."""
    M = velocities.shape[0]
    size = M // n_sub
    if size <= k + 1:
        raise InsufficientSamplesError("ensemble too small for subsampled entropy errors")
    perm = rng.generator().permutation(M)
    estimates = [knn_entropy(velocities[perm[s * size:(s + 1) * size]], k) for s in range(n_sub)]
    return float(np.std(estimates, ddof=1) * math.sqrt(size / M))


def _sorted_sum(values: np.ndarray) -> float:
    return float(np.sum(np.sort(values)))


def moments(source: Union[DistributionGrid, ParticleEnsemble, PicardResult], rng: Optional[RngState] = None,
            with_entropy: bool = True) -> Moments:
    """Mass, momentum, energy (|v|^2/2), fourth moment and entropy int f log f."""
    if isinstance(source, ParticleEnsemble):
        v = source.velocities
        if v.shape[0] == 0:
            raise InsufficientSamplesError("empty ensemble")
        M = v.shape[0]
        sq = np.sum(v * v, axis=1)
        entropy = knn_entropy(v) if with_entropy and M > 4 else None
        stderr = entropy_stderr(v, rng) if (entropy is not None and rng is not None and M >= 100) else None
        return Moments(
            mass=1.0,
            momentum=[_sorted_sum(v[:, a]) / M for a in range(v.shape[1])],
            energy=0.5 * _sorted_sum(sq) / M,
            fourth=_sorted_sum(sq * sq) / M,
            entropy=entropy,
            entropy_stderr=stderr,
        )
    grid, values = source.grid, source.values
    pts = grid.points
    h2 = grid.cell_volume
    sq = np.sum(pts * pts, axis=-1)
    positive = values > 0
    entropy = float(np.sum(values[positive] * np.log(values[positive])) * h2) if with_entropy else None
    return Moments(
        mass=float(values.sum() * h2),
        momentum=[float(np.sum(values * pts[..., a]) * h2) for a in range(2)],
        energy=0.5 * float(np.sum(values * sq) * h2),
        fourth=float(np.sum(values * sq * sq) * h2),
        entropy=entropy,
    )


def dsmc_moment_series(ens: ParticleEnsemble, b: CrossSection, t: float, dt: float, rng: RngState,
                       every: int = 1, with_entropy: bool = True) -> tuple[ParticleEnsemble, list[dict]]:
    """Run dsmc_run and record {t, mass, px, py, energy, m4, entropy} every few steps."""
    rows = []
    counter = {"step": 0}

    def record(time, v):
        m = moments(ParticleEnsemble(v), with_entropy=with_entropy)
        row = {"t": time, "mass": m.mass}
        row.update({f"p{axis}": p for axis, p in zip("xyz", m.momentum)})
        row.update({"energy": m.energy, "m4": m.fourth, "entropy": m.entropy})
        rows.append(row)

    def observer(time, v):
        counter["step"] += 1
        if counter["step"] % every == 0:
            record(time, v)

    record(ens.time, ens.velocities)
    out = dsmc_run(ens, b, t, dt, rng.child(0), observer=observer)
    return out, rows


def maxwellian_fourth_ratio(d: int) -> float:
    """<|v|^4> / <|v|^2>^2 for a Maxwellian in d dimensions."""
    return (d + 2.0) / d


def fourth_moment_ratio(ens: ParticleEnsemble) -> float:
    sq = np.sum(ens.velocities**2, axis=1)
    return float(np.mean(sq * sq) / np.mean(sq) ** 2)


# ---------------------------------------------------------------------
# Time unit
# ---------------------------------------------------------------------
def kinetic_mean_free_time(velocities: np.ndarray, rng: RngState, n_pairs: int = 200_000) -> float:
    """tau = 1 / (c_d E|v - v1|) for N eps^{d-1} = 1, c_2 = 2, c_3 = pi."""
    M, d = velocities.shape
    if M < 2:
        raise InsufficientSamplesError("need at least two velocities")
    gen = rng.generator()
    i = gen.integers(0, M, n_pairs)
    j = (i + gen.integers(1, M, n_pairs)) % M
    rel = velocities[i] - velocities[j]
    mean_speed = float(np.mean(np.sqrt(np.sum(rel * rel, axis=1))))
    c_d = 2.0 if d == 2 else math.pi
    return 1.0 / (c_d * mean_speed)


def law_mean_free_time(law: InitialLaw, rng: RngState, samples: int = 200_000) -> float:
    velocities = law.sample(samples, rng.generator())
    return kinetic_mean_free_time(velocities, rng.child(1))


def histogram_density(velocities: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Normalized histogram on the grid cells (mass outside the grid is lost)."""
    if velocities.shape[0] == 0:
        raise InsufficientSamplesError("empty velocity sample")
    return grid.histogram(velocities) / (velocities.shape[0] * grid.cell_volume)
