"""
src/hierarchy.py

Monte Carlo evaluation of the hierarchical collision series.

A term of order k is sampled as a collision tree (adjunction times,
progenitors, directions, new velocities) and evaluated along a backward
pseudo-trajectory:
- Boltzmann side: zero diameter, free flow between adjunctions
- BBGKY side: the new particle sits at distance eps from its progenitor
  and the flow between adjunctions is the hard-sphere (or smooth) flow

All pseudo-trajectories live in free space.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Union

import numpy as np
from scipy.stats import binomtest, linregress

from src.core import Configuration
from src.exceptions import (ConvergenceError, InsufficientSamplesError, InvalidParameterError,
                            SimultaneousContactError)
from src.harddyn import evolve_hard
from src.kinetic import collision_transform, sphere_area
from src.parallel import ordered_map
from src.scattering import evolve_smooth, stable_step
from src.schemas import InitialLaw, OrderEstimate, PotentialSpec, RecollisionStatistics, RngState, SeriesEstimate

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

# relative energy drift tolerated along one smooth backward segment
_SMOOTH_DRIFT_TOL = 1e-4

PhaseDensity = Callable[[np.ndarray, np.ndarray], np.ndarray]
Side = Literal["boltzmann", "bbgky"]


def _density(f0: Union[InitialLaw, PhaseDensity, None]) -> Optional[PhaseDensity]:
    if f0 is None:
        return None
    return f0.phase_density if hasattr(f0, "phase_density") else f0


# ---------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------
@dataclass(eq=False)
class CollisionTree:
    """One term sample: t > times[0] > ... > times[k-1] > 0.

    The weight carries the proposal part (simplex volume, sphere area,
    progenitor count, 1/proposal density); the kernel factor and sign
    omega.(v_new - v_prog) depend on the flow and are applied there.
    """
    t: float
    s: int
    times: np.ndarray
    progenitors: np.ndarray
    omegas: np.ndarray
    velocities: np.ndarray
    weight: float

    @property
    def k(self) -> int:
        return self.times.shape[0]

    def as_batch(self) -> "TreeBatch":
        return TreeBatch(self.t, self.s, self.times[None], self.progenitors[None], self.omegas[None],
                         self.velocities[None], np.array([self.weight]))


@dataclass(eq=False)
class TreeBatch:
    t: float
    s: int
    times: np.ndarray        # (n, k)
    progenitors: np.ndarray  # (n, k)
    omegas: np.ndarray       # (n, k, d)
    velocities: np.ndarray   # (n, k, d)
    weights: np.ndarray      # (n,)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.times.shape[1]

    @property
    def d(self) -> int:
        return self.omegas.shape[2]

    def tree(self, index: int) -> CollisionTree:
        return CollisionTree(self.t, self.s, self.times[index], self.progenitors[index], self.omegas[index],
                             self.velocities[index], float(self.weights[index]))


def sample_tree_batch(n: int, k: int, t: float, beta_p: float, gen: np.random.Generator,
                      s: int = 1, d: int = 2) -> TreeBatch:
    if k < 0 or t < 0 or beta_p <= 0 or s < 1:
        raise InvalidParameterError("need k >= 0, t >= 0, beta' > 0 and s >= 1")
    times = -np.sort(-gen.random((n, k)) * t, axis=1)
    eligible = s + np.arange(k)
    progenitors = np.floor(gen.random((n, k)) * eligible).astype(np.int64)
    omegas = gen.normal(size=(n, k, d))
    omegas /= np.sqrt(np.sum(omegas * omegas, axis=-1, keepdims=True))
    velocities = gen.normal(size=(n, k, d)) / math.sqrt(beta_p)

    log_g = 0.5 * d * math.log(beta_p / (2.0 * math.pi)) - 0.5 * beta_p * np.sum(velocities**2, axis=-1)
    log_simplex = (k * math.log(t) if t > 0 else (0.0 if k == 0 else -math.inf)) - math.lgamma(k + 1)
    log_w = log_simplex + np.sum(math.log(sphere_area(d)) + np.log(eligible) - log_g, axis=1)
    return TreeBatch(float(t), s, times, progenitors, omegas, velocities, np.exp(log_w))


def sample_tree(k: int, t: float, beta_p: float, rng: RngState, s: int = 1, d: int = 2) -> tuple[CollisionTree, float]:
    tree = sample_tree_batch(1, k, t, beta_p, rng.generator(), s=s, d=d).tree(0)
    return tree, tree.weight


# ---------------------------------------------------------------------
# Backward flows
# ---------------------------------------------------------------------
@dataclass(eq=False)
class PseudoTrajectory:
    value: float
    eps: float
    recollision: bool
    exclusion: bool
    # sign of omega.(v_new - v_prog) at each adjunction
    signs: np.ndarray
    kernel: float
    # phase points at time 0
    positions: np.ndarray
    velocities: np.ndarray


def _free_segment(X: np.ndarray, V: np.ndarray, m: int, dt: np.ndarray) -> None:
    X[:, :m] -= dt[:, None, None] * V[:, :m]


def _adjoin(X: np.ndarray, V: np.ndarray, m: int, prog: np.ndarray, omega: np.ndarray,
            v_new: np.ndarray, offset: float) -> np.ndarray:
    """Place particle m at x_prog + offset * omega; pre-collisional swap on gain branches."""
    rows = np.arange(X.shape[0])
    v_prog = V[rows, prog]
    cdot = np.sum(omega * (v_new - v_prog), axis=-1)
    X[:, m] = X[rows, prog] + offset * omega
    V[:, m] = v_new
    gain = cdot > 0
    if np.any(gain):
        pre_prog, pre_new = collision_transform(v_prog[gain], v_new[gain], omega[gain])
        V[rows[gain], prog[gain]] = pre_prog
        V[rows[gain], m] = pre_new
    return cdot


def _evaluate(batch: TreeBatch, f0: Optional[PhaseDensity], X: np.ndarray, V: np.ndarray,
              kernel: np.ndarray) -> np.ndarray:
    if f0 is None:
        return np.full(batch.n, np.nan)
    n, m, d = X.shape
    dens = np.asarray(f0(X.reshape(-1, d), V.reshape(-1, d)), dtype=float).reshape(n, m)
    return batch.weights * kernel * np.prod(dens, axis=1)


def _roots(z: Configuration, s: int) -> tuple[np.ndarray, np.ndarray]:
    if z.n != s:
        raise InvalidParameterError(f"tree has {s} roots but the evaluation point has {z.n} particles")
    return z.x, z.v


def _boltzmann_state(batch: TreeBatch, zx: np.ndarray, zv: np.ndarray):
    n, k, d, s = batch.n, batch.k, batch.d, batch.s
    X = np.empty((n, s + k, d))
    V = np.empty((n, s + k, d))
    X[:, :s] = zx
    V[:, :s] = zv
    kernel = np.ones(n)
    signs = np.empty((n, k))
    t_prev = np.full(n, batch.t)
    for j in range(k):
        t_j = batch.times[:, j]
        _free_segment(X, V, s + j, t_prev - t_j)
        cdot = _adjoin(X, V, s + j, batch.progenitors[:, j], batch.omegas[:, j], batch.velocities[:, j], 0.0)
        kernel = kernel * cdot
        signs[:, j] = np.sign(cdot)
        t_prev = t_j
    _free_segment(X, V, s + k, t_prev)
    return X, V, kernel, signs


def flow_boltzmann_batch(batch: TreeBatch, f0, z: Configuration) -> np.ndarray:
    """Signed values of a batch of Boltzmann-side terms at z."""
    zx, zv = _roots(z, batch.s)
    X, V, kernel, _ = _boltzmann_state(batch, zx, zv)
    return _evaluate(batch, _density(f0), X, V, kernel)


def flow_boltzmann_tree(tree: CollisionTree, f0, z: Configuration) -> PseudoTrajectory:
    batch = tree.as_batch()
    zx, zv = _roots(z, batch.s)
    X, V, kernel, signs = _boltzmann_state(batch, zx, zv)
    value = _evaluate(batch, _density(f0), X, V, kernel)
    return PseudoTrajectory(float(value[0]), 0.0, False, False, signs[0], float(kernel[0]), X[0], V[0])


def _hard_segment(X: np.ndarray, V: np.ndarray, m: int, duration: float, eps: float) -> bool:
    """Backward hard-sphere flow of the first m particles; True on any collision."""
    if duration <= 0:
        return False
    Z = Configuration(X[0, :m], -V[0, :m], eps, "free")
    Z_out, log = evolve_hard(Z, duration)
    X[0, :m] = Z_out.x
    V[0, :m] = -Z_out.v
    return len(log) > 0


def _smooth_segment(X: np.ndarray, V: np.ndarray, m: int, duration: float, eps: float,
                    potential: PotentialSpec, dt: float, exempt: set) -> bool:
    """Backward smooth flow; True if a pair other than a fresh adjunction pair comes within eps."""
    if duration <= 0:
        return False
    hit = {"flag": False}

    def monitor(x):
        close = Configuration(x, np.zeros_like(x), eps, "free").pairs_within(eps)
        inside = {(int(a), int(b)) for a, b in close}
        for pair in list(exempt):
            if pair not in inside:
                exempt.discard(pair)
        if inside - exempt:
            hit["flag"] = True

    Z = Configuration(X[0, :m], -V[0, :m], eps, "free")
    Z_out = evolve_smooth(Z, potential, eps, duration, min(dt, duration), drift_tol=_SMOOTH_DRIFT_TOL, monitor=monitor)
    X[0, :m] = Z_out.x
    V[0, :m] = -Z_out.v
    return hit["flag"]


def _excluded(X: np.ndarray, m: int, prog: int, eps: float) -> bool:
    """New particle m within eps of a particle other than its progenitor."""
    others = np.array([i for i in range(m) if i != prog], dtype=np.int64)
    if others.size == 0:
        return False
    r = X[0, others] - X[0, m]
    return bool(np.any(np.sum(r * r, axis=1) <= eps * eps))


def flow_bbgky_tree(tree: CollisionTree, eps: float, f0, z: Configuration,
                    potential: Optional[PotentialSpec] = None, smooth_dt: Optional[float] = None) -> PseudoTrajectory:
    """BBGKY-side pseudo-trajectory of one tree at diameter eps.

    The flow stops at the first violation of the exclusion constraint
    (the term is zero). With eps = 0 the arithmetic is that of the
    Boltzmann-side flow.
    """
    if eps < 0:
        raise InvalidParameterError("diameter must be nonnegative")
    smooth = potential is not None and potential.is_soft and eps > 0
    if smooth and smooth_dt is None:
        smooth_dt = 0.5 * stable_step(potential, eps, _SMOOTH_DRIFT_TOL)
    batch = tree.as_batch()
    n, k, d, s = 1, batch.k, batch.d, batch.s
    zx, zv = _roots(z, s)
    X = np.empty((n, s + k, d))
    V = np.empty((n, s + k, d))
    X[:, :s] = zx
    V[:, :s] = zv
    kernel = np.ones(n)
    signs = np.empty((n, k))
    t_prev = np.full(n, batch.t)
    recollision = False
    exempt: set = set()
    f0 = _density(f0)

    for j in range(k):
        m = s + j
        t_j = batch.times[:, j]
        if eps == 0:
            _free_segment(X, V, m, t_prev - t_j)
        elif smooth:
            recollision |= _smooth_segment(X, V, m, float(t_prev[0] - t_j[0]), eps, potential, smooth_dt, exempt)
        else:
            recollision |= _hard_segment(X, V, m, float(t_prev[0] - t_j[0]), eps)
        prog = batch.progenitors[:, j]
        if smooth:
            # the force realizes the scattering: no velocity swap at adjunction
            rows = np.arange(n)
            cdot = np.sum(batch.omegas[:, j] * (batch.velocities[:, j] - V[rows, prog]), axis=-1)
            X[:, m] = X[rows, prog] + eps * batch.omegas[:, j]
            V[:, m] = batch.velocities[:, j]
            exempt.add((int(prog[0]), m))
        else:
            cdot = _adjoin(X, V, m, prog, batch.omegas[:, j], batch.velocities[:, j], eps)
        kernel = kernel * cdot
        signs[:, j] = np.sign(cdot)
        t_prev = t_j
        if eps > 0 and _excluded(X, m, int(prog[0]), eps):
            signs[:, j + 1:] = 0.0
            return PseudoTrajectory(0.0, eps, recollision, True, signs[0], float(kernel[0]),
                                    X[0, :m + 1], V[0, :m + 1])

    if eps == 0:
        _free_segment(X, V, s + k, t_prev)
    elif smooth:
        recollision |= _smooth_segment(X, V, s + k, float(t_prev[0]), eps, potential, smooth_dt, exempt)
    else:
        recollision |= _hard_segment(X, V, s + k, float(t_prev[0]), eps)
    value = _evaluate(batch, f0, X, V, kernel)
    return PseudoTrajectory(float(value[0]), eps, bool(recollision), False, signs[0], float(kernel[0]), X[0], V[0])


# ---------------------------------------------------------------------
# Series estimates
# ---------------------------------------------------------------------
def _series_block(args) -> tuple[np.ndarray, int, int, int]:
    side, k, t, z, f0, beta_p, eps, rng, size, potential = args
    batch = sample_tree_batch(size, k, t, beta_p, rng.generator(), s=z.n, d=z.d)
    if side == "boltzmann":
        return flow_boltzmann_batch(batch, f0, z), 0, 0, 0
    values = []
    recollisions = exclusions = discarded = 0
    for i in range(batch.n):
        try:
            traj = flow_bbgky_tree(batch.tree(i), eps, f0, z, potential=potential)
        except (SimultaneousContactError, ConvergenceError) as e:
            logger.warning("pseudo-trajectory discarded: %s", e)
            discarded += 1
            continue
        values.append(traj.value)
        recollisions += traj.recollision
        exclusions += traj.exclusion
    return np.asarray(values), recollisions, exclusions, discarded


def estimate_series(side: Side, K: int, t: float, z: Configuration, nsamples: int, eps: float, rng: RngState,
                    f0: Union[InitialLaw, PhaseDensity], beta_p: Optional[float] = None, block_size: int = 2000,
                    workers: int = 1, mean_free_time: Optional[float] = None,
                    potential: Optional[PotentialSpec] = None) -> SeriesEstimate:
    """Per-order Monte Carlo means of the series at z, through order K.

    Order k uses the stream rng.child(k).child(block); the same rng gives
    the same trees on both sides.
    """
    if side not in ("boltzmann", "bbgky"):
        raise InvalidParameterError(f"unknown side {side!r}")
    if not 0 <= K <= 4:
        raise InvalidParameterError("series order must be in 0..4")
    if nsamples < 2:
        raise InvalidParameterError("need at least two samples per order")
    if mean_free_time is not None and t > 0.2 * mean_free_time:
        logger.warning("series at t=%.3g beyond a fifth of the mean free time %.3g", t, mean_free_time)
    if beta_p is None:
        beta_p = 0.5 * f0.beta if hasattr(f0, "beta") else 0.5
    if side == "boltzmann":
        eps = 0.0

    orders = []
    empty = TreeBatch(t, z.n, np.empty((1, 0)), np.empty((1, 0), dtype=np.int64), np.empty((1, 0, z.d)),
                      np.empty((1, 0, z.d)), np.ones(1))
    if side == "boltzmann":
        value0 = float(flow_boltzmann_batch(empty, f0, z)[0])
    else:
        value0 = flow_bbgky_tree(empty.tree(0), eps, f0, z, potential=potential).value
    orders.append(OrderEstimate(k=0, mean=value0, stderr=0.0, n=1))

    for k in range(1, K + 1):
        sizes = [min(block_size, nsamples - b) for b in range(0, nsamples, block_size)]
        tasks = [(side, k, t, z, f0, beta_p, eps, rng.child(k).child(b), size, potential)
                 for b, size in enumerate(sizes)]
        results = ordered_map(_series_block, tasks, workers=workers)
        values = np.concatenate([r[0] for r in results])
        recollisions = sum(r[1] for r in results)
        exclusions = sum(r[2] for r in results)
        discarded = sum(r[3] for r in results)
        n = values.size
        if n < 2:
            raise InsufficientSamplesError(f"order {k}: fewer than two usable samples")
        orders.append(OrderEstimate(
            k=k,
            mean=float(values.mean()),
            stderr=float(values.std(ddof=1) / math.sqrt(n)),
            n=n,
            recollision_fraction=recollisions / n,
            exclusion_fraction=exclusions / n,
            discarded=discarded,
        ))
        logger.info("%s order %d: %.6g +- %.2g (n=%d)", side, k, orders[-1].mean, orders[-1].stderr, n)

    total = float(sum(o.mean for o in orders))
    total_stderr = float(math.sqrt(sum(o.stderr**2 for o in orders)))
    low = total_stderr > 0.2 * abs(total)
    if low:
        logger.warning("series total %.4g has relative standard error above 20%%", total)
    return SeriesEstimate(side=side, t=t, eps=eps, orders=orders, total=total, total_stderr=total_stderr,
                          low_precision=low)


# ---------------------------------------------------------------------
# Recollisions
# ---------------------------------------------------------------------
def paired_decrease_test(flags_large: np.ndarray, flags_small: np.ndarray) -> float:
    """One-sided exact test that the flag rate drops from the first to the second sample.

    Only discordant pairs carry information.
    """
    drop = int(np.sum(flags_large & ~flags_small))
    rise = int(np.sum(~flags_large & flags_small))
    if drop + rise == 0:
        return 1.0
    return float(binomtest(drop, drop + rise, 0.5, alternative="greater").pvalue)


def _recollision_block(args):
    batch, roots, eps_list = args
    d = batch.d
    rec = np.zeros((len(eps_list), batch.n), dtype=bool)
    exc = np.zeros_like(rec)
    bad = np.zeros(batch.n, dtype=bool)
    for i in range(batch.n):
        tree = batch.tree(i)
        z = Configuration(np.zeros(d), roots[i], 0.0, "free")
        for e, eps in enumerate(eps_list):
            try:
                traj = flow_bbgky_tree(tree, eps, None, z)
            except SimultaneousContactError:
                bad[i] = True
                break
            rec[e, i] = traj.recollision
            exc[e, i] = traj.exclusion
    return rec, exc, bad


def recollision_statistics(eps_list, k: int, t: float, nsamples: int, rng: RngState, beta_p: float = 1.0,
                           d: int = 2, block_size: int = 1000, workers: int = 1) -> RecollisionStatistics:
    """Recollision and exclusion fractions across eps with common random numbers.

    Every eps sees the same trees and root velocities (drawn from the
    proposal law); a tree that hits a simultaneous contact at any eps is
    discarded at all of them.
    """
    eps_arr = np.asarray(eps_list, dtype=float)
    if k < 2:
        raise InvalidParameterError("recollisions need k >= 2")
    if eps_arr.size == 0 or np.any(eps_arr <= 0) or np.any(np.diff(eps_arr) >= 0):
        raise InvalidParameterError("eps list must be positive and strictly decreasing")
    gen = rng.generator()
    batch = sample_tree_batch(nsamples, k, t, beta_p, gen, s=1, d=d)
    roots = gen.normal(size=(nsamples, d)) / math.sqrt(beta_p)
    tasks = []
    for start in range(0, nsamples, block_size):
        sl = slice(start, start + block_size)
        sub = TreeBatch(batch.t, 1, batch.times[sl], batch.progenitors[sl], batch.omegas[sl],
                        batch.velocities[sl], batch.weights[sl])
        tasks.append((sub, roots[sl], eps_arr.tolist()))
    results = ordered_map(_recollision_block, tasks, workers=workers)
    rec = np.concatenate([r[0] for r in results], axis=1)
    exc = np.concatenate([r[1] for r in results], axis=1)
    keep = ~np.concatenate([r[2] for r in results])
    rec, exc = rec[:, keep], exc[:, keep]
    n = int(keep.sum())
    if n == 0:
        raise InsufficientSamplesError("every sampled tree was discarded")

    fractions = rec.mean(axis=1)
    if not np.any(fractions > 0):
        raise InsufficientSamplesError(f"no recollisions in {n} samples at any eps; increase nsamples")
    stderr = np.sqrt(fractions * (1 - fractions) / n)
    exc_frac = exc.mean(axis=1)
    exc_err = np.sqrt(exc_frac * (1 - exc_frac) / n)
    pvalues = [paired_decrease_test(rec[e], rec[e + 1]) for e in range(len(eps_arr) - 1)]

    positive = fractions > 0
    slope, slope_err = math.nan, None
    if positive.sum() >= 2:
        fit = linregress(np.log(eps_arr[positive]), np.log(fractions[positive]))
        slope = float(fit.slope)
        slope_err = float(fit.stderr) if positive.sum() > 2 else None
    logger.info("recollision fractions %s at eps %s, slope %.3f", np.round(fractions, 5).tolist(),
                eps_arr.tolist(), slope)
    return RecollisionStatistics(
        k=k, t=t, n=n, eps=eps_arr.tolist(), fractions=fractions.tolist(), stderr=stderr.tolist(),
        exclusion_fractions=exc_frac.tolist(), exclusion_stderr=exc_err.tolist(), paired_pvalues=pvalues,
        slope=slope, slope_stderr=slope_err, discarded=int((~keep).sum()),
    )
