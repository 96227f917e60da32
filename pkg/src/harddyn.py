"""
src/harddyn.py

Exact event-driven dynamics of hard spheres of diameter eps, on the unit
torus or in free space.

Between events particles stream freely; at an event the colliding pair
is reflected elastically. Each particle keeps only its earliest predicted
event in the queue, plus (on the torus) a horizon event that forces a
re-prediction before the minimum-image window expires.
"""
import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from src.config import CONTACT_TOL, GRAZING_TOL, MAX_EVENTS, SIMULTANEITY_TOL, UNIT_TOL
from src.core import (Configuration, Geometry, PhasePoint, maxwellian_velocities, min_pair_distance,
                      reduce_to_torus, sample_positions, torus_displacement)
from src.exceptions import (InsufficientSamplesError, InvalidConfigurationError, InvalidParameterError,
                            RunawayEvolutionError, SimultaneousContactError)
from src.schemas import MeanFreeTimeEstimate, RngState, ScalingParams

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

# neighbouring images of the unit cell; images beyond these are at least
# 1.5 - eps > 1.25 away from a minimum-image displacement
_IMAGES = {d: np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=d))) for d in (2, 3)}
_IMAGE_REACH = 1.2


# ---------------------------------------------------------------------
# Event records
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class CollisionEvent:
    time: float
    pair: tuple[int, int]
    normal: np.ndarray
    v_i_pre: np.ndarray
    v_j_pre: np.ndarray
    v_i_post: np.ndarray
    v_j_post: np.ndarray

    def to_record(self) -> dict:
        return {
            "t": self.time,
            "i": self.pair[0],
            "j": self.pair[1],
            "nu": self.normal.tolist(),
            "v_i_pre": self.v_i_pre.tolist(),
            "v_j_pre": self.v_j_pre.tolist(),
            "v_i_post": self.v_i_post.tolist(),
            "v_j_post": self.v_j_post.tolist(),
        }


@dataclass
class TrajectoryLog:
    events: list[CollisionEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.events])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.to_record() for e in self.events],
                            columns=["t", "i", "j", "nu", "v_i_pre", "v_j_pre", "v_i_post", "v_j_post"])

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event.to_record()) + "\n")


class EventQueue:
    """Min-time heap of (time, i, j, stamp_i, stamp_j, owner).

    j = -1 marks a horizon event. An entry is stale once either
    particle's stamp has moved on; stale entries are dropped on pop.
    """

    def __init__(self, n: int):
        self._heap: list[tuple] = []
        self.stamps = np.zeros(n, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, time: float, i: int, j: int, owner: int) -> None:
        stamp_j = int(self.stamps[j]) if j >= 0 else 0
        heapq.heappush(self._heap, (time, i, j, int(self.stamps[i]), stamp_j, owner))

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def pop(self) -> tuple:
        return heapq.heappop(self._heap)

    def is_current(self, entry: tuple) -> bool:
        _, i, j, stamp_i, stamp_j, _ = entry
        return self.stamps[i] == stamp_i and (j < 0 or self.stamps[j] == stamp_j)

    def invalidate(self, *particles: int) -> None:
        for p in particles:
            self.stamps[p] += 1


# ---------------------------------------------------------------------
# Pair kinematics
# ---------------------------------------------------------------------
def _contact_times(r: np.ndarray, w: np.ndarray, eps: float, window: float) -> np.ndarray:
    """First time |r + t w| = eps with r.w < 0, for t in [0, window]; inf otherwise.

    r is x_i - x_j and w is v_i - v_j, broadcast over leading axes.
    """
    b = np.sum(r * w, axis=-1)
    w2 = np.sum(w * w, axis=-1)
    gap = np.sum(r * r, axis=-1) - eps * eps
    disc = b * b - w2 * gap
    hit = (b < 0.0) & (disc > GRAZING_TOL * w2 * eps * eps)
    root = np.sqrt(np.where(hit, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        # gap / (-b + sqrt(disc)) is the smaller root without cancellation
        t = np.where(hit, gap / (root - b), np.inf)
    # approaching pairs already within tolerance of contact collide now
    t = np.maximum(t, 0.0)
    return np.where(t <= window, t, np.inf)


def predict_pair_collision(z_i: PhasePoint, z_j: PhasePoint, eps: float, horizon: float,
                           geometry: Geometry = "torus") -> Optional[float]:
    """Smallest contact time in (0, horizon], or None.

    On the torus the flight is cut into windows over which the nearest
    images of the partner are the only candidates.
    """
    if horizon <= 0:
        return None
    if geometry == "torus":
        r = -torus_displacement(z_i.x, z_j.x)
    else:
        r = z_i.x - z_j.x
    if float(np.sqrt(r @ r)) < eps * (1.0 - CONTACT_TOL):
        raise InvalidConfigurationError("pair overlaps at prediction time")
    w = z_i.v - z_j.v
    speed = float(np.sqrt(w @ w))
    if speed == 0.0:
        return None
    if geometry == "free":
        t = float(_contact_times(r, w, eps, horizon))
        return t if math.isfinite(t) and t > 0 else None

    window = _IMAGE_REACH / speed
    images = _IMAGES[r.shape[0]]
    elapsed = 0.0
    while elapsed < horizon:
        span = min(window, horizon - elapsed)
        t = float(_contact_times(r + images, w, eps, span).min())
        if math.isfinite(t) and elapsed + t > 0:
            return elapsed + t
        elapsed += span
        r = torus_displacement(np.zeros_like(r), r + span * w)
    return None


def elastic_reflect(v_i, v_j, nu) -> tuple[np.ndarray, np.ndarray]:
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if abs(float(np.sqrt(nu @ nu)) - 1.0) > UNIT_TOL:
        raise InvalidParameterError("collision normal must be a unit vector")
    exchange = float(nu @ (v_i - v_j)) * nu
    return v_i - exchange, v_j + exchange


def reverse_velocities(Z: Configuration) -> Configuration:
    return Z.with_state(Z.x.copy(), -Z.v)


# ---------------------------------------------------------------------
# Event-driven evolution
# ---------------------------------------------------------------------
class HardSphereSystem:
    """Mutable state of one event-driven run. Positions are kept current
    with the clock: every executed event advances all particles."""

    def __init__(self, Z: Configuration, max_events: int = MAX_EVENTS):
        Z.validate_hard_spheres()
        self.x = Z.x.copy()
        self.v = Z.v.copy()
        self.eps = Z.diameter
        self.torus = Z.geometry == "torus"
        self.template = Z
        self.now = 0.0
        self.events_done = 0
        self.max_events = max_events
        self.queue = EventQueue(Z.n)
        self.log = TrajectoryLog()
        if self.eps > 0 and Z.n > 1:
            for i in range(Z.n):
                self._schedule(i)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def _relative(self, i: int, others: np.ndarray) -> np.ndarray:
        """x_i - x_k for k in others."""
        if self.torus:
            return -torus_displacement(self.x[i], self.x[others])
        return self.x[i] - self.x[others]

    def _schedule(self, i: int) -> None:
        others = np.flatnonzero(np.arange(self.n) != i)
        r = self._relative(i, others)
        w = self.v[i] - self.v[others]
        if self.torus:
            speeds = np.sqrt(np.sum(self.v * self.v, axis=1))
            reach = speeds[i] + speeds.max()
            window = _IMAGE_REACH / reach if reach > 0 else math.inf
            images = _IMAGES[self.x.shape[1]]
            times = _contact_times(r[:, None, :] + images, w[:, None, :], self.eps, window).min(axis=1)
        else:
            window = math.inf
            times = _contact_times(r, w, self.eps, window)
        k = int(np.argmin(times))
        if math.isfinite(times[k]):
            j = int(others[k])
            self.queue.push(self.now + float(times[k]), min(i, j), max(i, j), owner=i)
        elif math.isfinite(window):
            # nothing inside the trusted window: look again when it closes
            self.queue.push(self.now + window, i, -1, owner=i)

    def _advance(self, t: float) -> None:
        dt = t - self.now
        if dt > 0:
            self.x = self.x + dt * self.v
            if self.torus:
                self.x = reduce_to_torus(self.x)
        self.now = t

    def _check_simultaneous(self, i: int, j: int) -> None:
        for a in (i, j):
            others = np.flatnonzero((np.arange(self.n) != i) & (np.arange(self.n) != j))
            if others.size == 0:
                return
            r = self._relative(a, others)
            w = self.v[a] - self.v[others]
            dist = np.sqrt(np.sum(r * r, axis=1))
            closing = -np.sum(r * w, axis=1) / np.maximum(dist, 1e-300)
            touching = (dist - self.eps <= SIMULTANEITY_TOL * np.maximum(closing, 1.0)) & (closing > 0)
            if np.any(touching):
                k = int(others[np.argmax(touching)])
                raise SimultaneousContactError(
                    f"particles {i}, {j} and {k} in contact at t={self.now:.17g}")

    def _collide(self, i: int, j: int) -> None:
        self._check_simultaneous(i, j)
        r = self._relative(i, np.array([j]))[0]
        nu = r / math.sqrt(float(r @ r))
        vi, vj = self.v[i].copy(), self.v[j].copy()
        vi_post, vj_post = elastic_reflect(vi, vj, nu)
        self.v[i] = vi_post
        self.v[j] = vj_post
        self.log.events.append(CollisionEvent(self.now, (i, j), nu, vi, vj, vi_post, vj_post))
        self.events_done += 1
        if self.events_done > self.max_events:
            raise RunawayEvolutionError(f"more than {self.max_events} events before t={self.now:.6g}")
        self.queue.invalidate(i, j)
        self._schedule(i)
        self._schedule(j)

    def run_until(self, t_end: float) -> None:
        while self.queue.peek_time() <= t_end:
            entry = self.queue.pop()
            time, i, j, _, _, owner = entry
            if not self.queue.is_current(entry):
                # owner still unchanged: its coverage ended with this entry
                if self.queue.stamps[owner] == entry[3 if owner == i else 4]:
                    self._advance(time)
                    self._schedule(owner)
                continue
            self._advance(time)
            if j < 0:
                self._schedule(i)
            else:
                self._collide(i, j)
        self._advance(t_end)

    def configuration(self) -> Configuration:
        return self.template.with_state(self.x.copy(), self.v.copy())


def evolve_hard(Z: Configuration, t: float, max_events: int = MAX_EVENTS) -> tuple[Configuration, TrajectoryLog]:
    if t < 0:
        raise InvalidParameterError("duration must be nonnegative")
    if t == 0:
        Z.validate_hard_spheres()
        return Z.copy(), TrajectoryLog()
    system = HardSphereSystem(Z, max_events=max_events)
    system.run_until(float(t))
    logger.debug("evolve_hard: %d events over t=%g (n=%d)", system.events_done, t, Z.n)
    return system.configuration(), system.log


# ---------------------------------------------------------------------
# Collision rates
# ---------------------------------------------------------------------
def mean_relative_speed(d: int, beta: float) -> float:
    """E|v - v1| for two independent Maxwellian(beta) velocities."""
    if d == 2:
        return math.sqrt(math.pi / beta)
    return 4.0 / math.sqrt(math.pi * beta)


def kinetic_collision_frequency(params: ScalingParams, beta: float) -> float:
    """Per-particle collision frequency (N-1) eps^{d-1} c_d E|w|, c_2 = 2, c_3 = pi."""
    c_d = 2.0 if params.d == 2 else math.pi
    return (params.N - 1) * params.eps ** (params.d - 1) * c_d * mean_relative_speed(params.d, beta)


def measure_mean_free_time(params: ScalingParams, beta: float, t_burn: float, t_meas: float,
                           rng: RngState, blocks: int = 10, min_events: int = 100) -> MeanFreeTimeEstimate:
    """Equilibrium mean time between collisions per particle.

    tau = (2 events / (N t_meas))^{-1}; the standard error comes from
    the spread of the block frequencies.
    """
    if t_meas <= 0 or t_burn < 0:
        raise InvalidParameterError("t_meas must be positive and t_burn nonnegative")
    gen = rng.generator()
    x, _ = sample_positions(params.N, params.d, params.eps, gen)
    v = maxwellian_velocities(params.N, params.d, beta, gen)
    Z = Configuration(x, v, params.eps, "torus")
    if t_burn > 0:
        Z, _ = evolve_hard(Z, t_burn)
    span = t_meas / blocks
    counts = []
    for _ in range(blocks):
        Z, log = evolve_hard(Z, span)
        counts.append(len(log))
    events = int(sum(counts))
    if events == 0:
        raise InsufficientSamplesError(f"no collisions in t_meas={t_meas} (N={params.N}, eps={params.eps})")
    freqs = 2.0 * np.asarray(counts, dtype=float) / (params.N * span)
    frequency = float(freqs.mean())
    freq_err = float(freqs.std(ddof=1) / math.sqrt(blocks)) if blocks > 1 else math.nan
    flagged = events < min_events
    if flagged:
        logger.warning("only %d collisions measured, mean free time estimate unreliable", events)
    estimate = MeanFreeTimeEstimate(
        tau=1.0 / frequency,
        stderr=freq_err / frequency**2,
        frequency=frequency,
        frequency_stderr=freq_err,
        events=events,
        predicted_tau=1.0 / kinetic_collision_frequency(params, beta),
        flagged=flagged,
    )
    logger.info("mean free time %.5g +- %.2g from %d events (kinetic prediction %.5g)",
                estimate.tau, estimate.stderr, events, estimate.predicted_tau)
    return estimate


def nonpenetration_holds(Z: Configuration) -> bool:
    return Z.n < 2 or min_pair_distance(Z) >= Z.diameter * (1.0 - CONTACT_TOL)
