"""
src/ensemble.py

N-particle replicas and their one-particle statistics:
- overlap-free sampling of the initial law on the torus
- replica evolution with reseeding of pathological draws
- plain and truncated velocity marginals with replica-bootstrap errors
- comparison to the kinetic solution, factorization deficit
- convergence study along a ladder of N
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from src.core import Configuration, epsilon_from_N, sample_positions, scaling_params
from src.exceptions import (DomainMismatchError, InsufficientSamplesError, InvalidParameterError,
                            RunawayEvolutionError, SimultaneousContactError)
from src.harddyn import TrajectoryLog, evolve_hard
from src.kinetic import (DistributionGrid, ParticleEnsemble, PicardResult, VelocityGrid, coarsen, dsmc_run,
                         histogram_density, l1_distance, law_mean_free_time, picard_iterate)
from src.parallel import ordered_map
from src.scattering import CrossSection
from src.schemas import (ChaosResult, ConvergenceReport, ConvergenceRow, InitialLaw, KineticComparison, RngState,
                         ScalingParams)

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

# weak-distance test functions of the velocity, evaluated on (..., 2) arrays
TEST_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "one": lambda v: np.ones(v.shape[:-1]),
    "vx": lambda v: v[..., 0],
    "vy": lambda v: v[..., 1],
    "v2": lambda v: np.sum(v * v, axis=-1),
    "vxvy": lambda v: v[..., 0] * v[..., 1],
    "gauss": lambda v: np.exp(-0.5 * np.sum(v * v, axis=-1)),
}
CHAOS_PAIRS: list[tuple[str, str]] = [("v2", "v2"), ("vx", "vx"), ("vy", "vy"), ("gauss", "gauss"), ("vx", "vy")]


# ---------------------------------------------------------------------
# Sampling and replicas
# ---------------------------------------------------------------------
def sample_initial(N: int, eps: float, law: InitialLaw, rng: RngState) -> Configuration:
    """N points from the law conditioned on no pair within eps (whole-configuration rejection)."""
    if N < 2:
        raise InvalidParameterError("need N >= 2")
    if not math.isclose(N * eps ** (law.d - 1), 1.0, rel_tol=1e-6):
        logger.warning("N eps^{d-1} = %.4g is off the Boltzmann-Grad scaling", N * eps ** (law.d - 1))
    gen = rng.generator()
    x, attempts = sample_positions(N, law.d, eps, gen)
    if attempts > 1:
        logger.debug("initial positions accepted after %d attempts", attempts)
    v = law.sample(N, gen)
    return Configuration(x, v, eps, "torus")


@dataclass(eq=False)
class ReplicaResult:
    initial: list[Configuration]
    final: list[Configuration]
    logs: list[TrajectoryLog]
    reseeds: int = 0

    @property
    def M(self) -> int:
        return len(self.final)


def _run_replica(args) -> tuple[Configuration, Configuration, TrajectoryLog, int]:
    params, law, t, rng, max_reseeds = args
    for attempt in range(max_reseeds + 1):
        stream = rng if attempt == 0 else rng.child(attempt)
        Z0 = sample_initial(params.N, params.eps, law, stream)
        try:
            Z1, log = evolve_hard(Z0, t)
        except (SimultaneousContactError, RunawayEvolutionError) as e:
            logger.warning("replica reseeded after attempt %d: %s", attempt, e)
            continue
        return Z0, Z1, log, attempt
    raise InsufficientSamplesError(f"replica failed {max_reseeds + 1} times in a row")


def run_replicas(M: int, params: ScalingParams, law: InitialLaw, t: float, rng: RngState, workers: int = 1,
                 max_reseeds: int = 10) -> ReplicaResult:
    """M independent hard-sphere evolutions; replica m draws from rng.child(m)."""
    if M < 1:
        raise InvalidParameterError("need at least one replica")
    if params.mean_free_time is not None and t > 0.2 * params.mean_free_time:
        logger.warning("t=%.3g beyond a fifth of the mean free time %.3g", t, params.mean_free_time)
    tasks = [(params, law, t, rng.child(m), max_reseeds) for m in range(M)]
    results = ordered_map(_run_replica, tasks, workers=workers)
    out = ReplicaResult([r[0] for r in results], [r[1] for r in results], [r[2] for r in results],
                        sum(r[3] for r in results))
    events = sum(len(log) for log in out.logs)
    logger.info("%d replicas of N=%d to t=%.4g: %d events, %d reseeds", M, params.N, t, events, out.reseeds)
    return out


# ---------------------------------------------------------------------
# Marginals
# ---------------------------------------------------------------------
@dataclass(eq=False)
class MarginalEstimate:
    """Velocity histogram of the one-particle marginal, x integrated out.

    density is normalized by the total particle weight, so mass outside
    the grid or removed by truncation shows up as a deficit.
    """
    grid: VelocityGrid
    density: np.ndarray
    # per-replica densities, (M, G, G)
    per_replica: np.ndarray
    stderr: np.ndarray
    n_replicas: int
    removed_fraction: float = 0.0
    boot: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def total(self) -> float:
        return float(self.density.sum() * self.grid.cell_volume)

    def to_frame(self):
        frame = DistributionGrid(self.grid, self.density).to_frame()
        frame["stderr"] = self.stderr.ravel()
        return frame


@dataclass(eq=False)
class PairStatistics:
    """Covariance of |v|^2 across disjoint tagged pairs (2m, 2m+1)."""
    covariance: float
    stderr: float
    n_pairs: int


def _check_replicas(configs: Sequence[Configuration], minimum: int) -> None:
    if len(configs) == 0:
        raise InsufficientSamplesError("no replicas")
    if len(configs) < minimum:
        raise InsufficientSamplesError(f"{len(configs)} replicas, need at least {minimum}")


def _marginal(densities: np.ndarray, grid: VelocityGrid, rng: RngState, n_boot: int,
              removed: float) -> MarginalEstimate:
    M = densities.shape[0]
    mean = densities.mean(axis=0)
    boot = None
    if n_boot > 0:
        idx = rng.generator().integers(0, M, size=(n_boot, M))
        boot = np.stack([densities[row].mean(axis=0) for row in idx])
        stderr = boot.std(axis=0, ddof=1)
    else:
        stderr = densities.std(axis=0, ddof=1) / math.sqrt(M)
    return MarginalEstimate(grid, mean, densities, stderr, M, removed, boot)


def _pair_statistics(configs: Sequence[Configuration]) -> PairStatistics:
    a, b = [], []
    for Z in configs:
        sq = np.sum(Z.v * Z.v, axis=1)
        half = Z.n // 2
        a.append(sq[0:2 * half:2])
        b.append(sq[1:2 * half:2])
    a, b = np.concatenate(a), np.concatenate(b)
    prod = (a - a.mean()) * (b - b.mean())
    return PairStatistics(float(prod.mean()), float(prod.std(ddof=1) / math.sqrt(prod.size)), int(prod.size))


def estimate_marginal(configs: Sequence[Configuration], grid: VelocityGrid, rng: RngState, s: int = 1,
                      n_boot: int = 200, min_replicas: int = 30):
    """s=1: pooled velocity histogram with replica-bootstrap errors. s=2: pair covariance summary."""
    _check_replicas(configs, min_replicas)
    if s == 2:
        return _pair_statistics(configs)
    if s != 1:
        raise InvalidParameterError("marginals are estimated for s in (1, 2)")
    densities = np.stack([histogram_density(Z.v, grid) for Z in configs])
    return _marginal(densities, grid, rng, n_boot, 0.0)


def truncation_weights(Z: Configuration, radius: float) -> np.ndarray:
    """1 for particles with no other particle within radius, else 0."""
    weights = np.ones(Z.n)
    if radius <= 0 or Z.n < 2:
        return weights
    tree = cKDTree(Z.x, boxsize=1.0) if Z.geometry == "torus" else cKDTree(Z.x)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    weights[pairs.ravel()] = 0.0
    return weights


def estimate_truncated_marginal(configs: Sequence[Configuration], radius: float, grid: VelocityGrid,
                                rng: RngState, n_boot: int = 200, min_replicas: int = 30) -> MarginalEstimate:
    """Histogram of tagged particles with no neighbour within radius.

    Normalized by the untruncated particle count, so the truncated
    density never exceeds the plain one in any cell of any replica.
    """
    _check_replicas(configs, min_replicas)
    densities, removed = [], 0.0
    for Z in configs:
        w = truncation_weights(Z, radius)
        densities.append(grid.histogram(Z.v, weights=w) / (Z.n * grid.cell_volume))
        removed += 1.0 - w.mean()
    return _marginal(np.stack(densities), grid, rng, n_boot, removed / len(configs))


# ---------------------------------------------------------------------
# Comparisons
# ---------------------------------------------------------------------
def _reference_values(reference) -> tuple[VelocityGrid, np.ndarray]:
    if isinstance(reference, (DistributionGrid, PicardResult)):
        return reference.grid, reference.values
    raise InvalidParameterError(f"unsupported kinetic reference {type(reference).__name__}")


def compare_to_kinetic(est: MarginalEstimate, reference, factor: int = 1) -> KineticComparison:
    """L1 on (optionally coarsened) cells and weak distances over TEST_FUNCTIONS."""
    grid, ref = _reference_values(reference)
    if grid != est.grid:
        raise DomainMismatchError(f"marginal grid {est.grid} differs from kinetic grid {grid}")
    h2 = grid.cell_volume
    l1 = l1_distance(est.density, ref, grid, factor)
    cell_err = coarsen(est.stderr**2, factor) / factor**2
    # expected |noise| per cell of a zero-mean Gaussian error
    noise_floor = float(np.sum(math.sqrt(2.0 / math.pi) * np.sqrt(cell_err)) * h2 * factor**2)
    if est.boot is not None:
        boot_l1 = [l1_distance(b, ref, grid, factor) for b in est.boot]
        l1_err = float(np.std(boot_l1, ddof=1))
    else:
        l1_err = noise_floor

    pts = grid.points
    weak, weak_err = {}, {}
    for name, phi in TEST_FUNCTIONS.items():
        p = phi(pts)
        per_replica = np.sum(est.per_replica * p, axis=(1, 2)) * h2
        weak[name] = float(abs(per_replica.mean() - np.sum(ref * p) * h2))
        weak_err[name] = float(per_replica.std(ddof=1) / math.sqrt(len(per_replica))) if len(per_replica) > 1 else 0.0
    return KineticComparison(l1=l1, l1_stderr=l1_err, noise_floor=noise_floor, weak=weak, weak_stderr=weak_err,
                             weak_max=max(weak.values()))


def chaos_test(configs: Sequence[Configuration], pairs: Sequence[tuple[str, str]] = tuple(CHAOS_PAIRS),
               min_replicas: int = 100) -> ChaosResult:
    """Largest |E[phi(v1) psi(v2)] - E[phi(v1)] E[psi(v2)]| over the test pairs.

    Particles 0 and 1 of each replica are the tagged pair; exchangeable
    draws make the label choice immaterial.
    """
    _check_replicas(configs, min_replicas)
    v1 = np.stack([Z.v[0] for Z in configs])
    v2 = np.stack([Z.v[1] for Z in configs])
    M = v1.shape[0]
    best, best_err, best_pair = -1.0, 0.0, tuple(pairs[0])
    for name_a, name_b in pairs:
        a = TEST_FUNCTIONS[name_a](v1)
        b = TEST_FUNCTIONS[name_b](v2)
        # centered product is the covariance estimator's influence function
        term = (a - a.mean()) * (b - b.mean())
        deficit = abs(float(term.mean()))
        err = float(term.std(ddof=1) / math.sqrt(M))
        if deficit > best:
            best, best_err, best_pair = deficit, err, (name_a, name_b)
    return ChaosResult(deficit=best, stderr=best_err, pair=best_pair, n_pairs=len(pairs), n_replicas=M)


# ---------------------------------------------------------------------
# Convergence study
# ---------------------------------------------------------------------
def _fit_slope(eps: np.ndarray, signal: np.ndarray) -> Optional[float]:
    keep = signal > 0
    if keep.sum() < 2:
        return None
    return float(np.polyfit(np.log(eps[keep]), np.log(signal[keep]), 1)[0])


def kinetic_reference(law: InitialLaw, t: float, b: CrossSection, grid: VelocityGrid, K: int = 3, n_steps: int = 8,
                      mean_free_time: Optional[float] = None) -> PicardResult:
    return picard_iterate(DistributionGrid.from_law(grid, law), b, K, t, n_steps=n_steps, mean_free_time=mean_free_time)


def convergence_study(ladder: Sequence[int], law: InitialLaw, t: float, M: int, rng: RngState,
                      b: Optional[CrossSection] = None, grid: Optional[VelocityGrid] = None, K: int = 3,
                      n_steps: int = 8, factor: int = 2, n_boot: int = 200, workers: int = 1,
                      mean_free_time: Optional[float] = None, dsmc_particles: int = 100_000,
                      observer: Optional[Callable[[int, str, MarginalEstimate], None]] = None) -> ConvergenceReport:
    """Distance between the N-particle marginal and the kinetic solution along the ladder.

    The kinetic reference is the Picard iterate K on the grid; an
    independent DSMC run on the same kernel gives dsmc_check_l1. Each
    rung also carries a t=0 control, the truncated-vs-plain gap at twice
    the diameter and the chaos deficit.
    """
    if law.d != 2:
        raise InvalidParameterError("the convergence study runs in d=2")
    ladder = sorted(int(N) for N in ladder)
    if len(ladder) < 2:
        raise InvalidParameterError("ladder needs at least two values of N")
    b = b or CrossSection.hard_sphere(2)
    grid = grid or VelocityGrid()
    tau = mean_free_time or law_mean_free_time(law, rng.child(10_000))
    if t > 0.2 * tau:
        logger.warning("study time %.3g exceeds a fifth of the mean free time %.3g", t, tau)

    f0 = DistributionGrid.from_law(grid, law)
    reference = kinetic_reference(law, t, b, grid, K, n_steps, tau)
    dsmc = dsmc_run(ParticleEnsemble.from_law(law, dsmc_particles, rng.child(20_000)), b, t,
                    min(t, 0.02 * tau) if t > 0 else 1.0, rng.child(20_001))
    dsmc_l1 = l1_distance(histogram_density(dsmc.velocities, grid), reference.values, grid, factor)
    logger.info("kinetic reference: Picard K=%d vs DSMC L1 = %.4f", K, dsmc_l1)

    rows = []
    for r, N in enumerate(ladder):
        eps = float(epsilon_from_N(N, 2))
        params = scaling_params(N, 2, mean_free_time=tau)
        replicas = run_replicas(M, params, law, t, rng.child(r), workers=workers)
        sub = rng.child(r).child(M + 1)
        plain = estimate_marginal(replicas.final, grid, sub.child(0), n_boot=n_boot)
        plain0 = estimate_marginal(replicas.initial, grid, sub.child(1), n_boot=n_boot)
        truncated = estimate_truncated_marginal(replicas.final, 2.0 * eps, grid, sub.child(2), n_boot=0)
        cmp_t = compare_to_kinetic(plain, reference, factor)
        cmp_0 = compare_to_kinetic(plain0, f0, factor)
        chaos = chaos_test(replicas.final, min_replicas=min(100, M))
        chaos0 = chaos_test(replicas.initial, min_replicas=min(100, M))
        if observer is not None:
            observer(N, "plain", plain)
            observer(N, "truncated", truncated)
        row = ConvergenceRow(
            N=N, eps=eps, t=t, M=M, L1=cmp_t.l1, L1_err=cmp_t.l1_stderr, noise_floor=cmp_t.noise_floor,
            weak_max=cmp_t.weak_max, L1_t0=cmp_0.l1, L1_t0_err=cmp_0.l1_stderr,
            truncation_gap=l1_distance(truncated.density, plain.density, grid),
            chaos=chaos.deficit, chaos_err=chaos.stderr, chaos_t0=chaos0.deficit, chaos_t0_err=chaos0.stderr,
            reseeds=replicas.reseeds,
        )
        rows.append(row)
        logger.info("N=%d eps=%.4g: L1 %.4f +- %.4f (floor %.4f), t=0 control %.4f, chaos %.3g",
                    N, eps, row.L1, row.L1_err, row.noise_floor, row.L1_t0, row.chaos)

    eps_arr = np.array([row.eps for row in rows])
    signal = np.array([row.L1 - row.noise_floor for row in rows])
    for n in range(2, len(rows) + 1):
        rows[n - 1].slope_partial = _fit_slope(eps_arr[:n], signal[:n])
    slope = _fit_slope(eps_arr, signal)
    inconclusive = bool(np.all(signal <= 0)) or slope is None
    required_m = None
    if inconclusive:
        # the noise floor shrinks like 1/sqrt(M)
        required_m = 9 * M
        logger.warning("noise floor dominates at every N; about %d replicas per rung needed", required_m)
    return ConvergenceReport(d=2, t=t, M=M, rows=rows, slope=slope, inconclusive=inconclusive,
                             required_m=required_m, dsmc_check_l1=dsmc_l1)
