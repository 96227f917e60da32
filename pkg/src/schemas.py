import math
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


# ---------------------------------------------------------------------
# Parameter records
# ---------------------------------------------------------------------
class ScalingParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    d: Literal[2, 3]
    N: int = Field(ge=2)
    eps: float = Field(gt=0, lt=0.25)
    # None means "unmeasured"
    mean_free_time: Optional[float] = Field(default=None, gt=0)


class GaussianBoundParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta: float = Field(gt=0)
    mu: float = 0.0


class RngState(BaseModel):
    """Counter-based random stream: (seed, stream) fixes the draw sequence.

    Streams are split with child(i); a replica or tree block that owns
    rng.child(i) never shares draws with its siblings, whatever the
    scheduling of the workers.
    """
    model_config = ConfigDict(frozen=True)

    seed: int = Field(ge=0, lt=2**64)
    stream: int = Field(default=0, ge=0, lt=2**64)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "RngState":
        mixed = np.random.SeedSequence([self.stream, int(index)]).generate_state(1, np.uint64)[0]
        return RngState(seed=self.seed, stream=int(mixed))


class PotentialSpec(BaseModel):
    """Pair potential in scaled units (range 1).

    kind="soft" uses kappa*(1-r)**exponent unless a custom profile is
    supplied; the profile and its gradient must then both be given.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: Literal["hard-sphere", "soft"] = "hard-sphere"
    stiffness: float = Field(default=100.0, gt=0)
    exponent: float = Field(default=2.0, ge=2)
    profile: Optional[Callable] = Field(default=None, exclude=True)
    profile_gradient: Optional[Callable] = Field(default=None, exclude=True)

    @model_validator(mode="after")
    def _check_profile(self):
        if (self.profile is None) != (self.profile_gradient is None):
            raise ValueError("profile and profile_gradient must be given together")
        if self.kind == "soft" and self.profile is not None:
            r = np.linspace(1e-3, 1.0, 1001)
            values = np.asarray(self.profile(r), dtype=float)
            if abs(values[-1]) > 1e-12:
                raise ValueError("profile must vanish at r = 1")
            if np.any(np.diff(values) > 1e-12):
                raise ValueError("profile must be non-increasing on (0, 1]")
        return self

    @property
    def is_soft(self) -> bool:
        return self.kind == "soft"

    def phi(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if not self.is_soft:
            return np.where(r < 1.0, np.inf, 0.0)
        inside = r < 1.0
        rc = np.clip(r, 0.0, 1.0)
        if self.profile is not None:
            return np.where(inside, self.profile(rc), 0.0)
        return np.where(inside, self.stiffness * (1.0 - rc) ** self.exponent, 0.0)

    def dphi(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if not self.is_soft:
            raise ValueError("hard-sphere potential has no smooth gradient")
        inside = r < 1.0
        rc = np.clip(r, 0.0, 1.0)
        if self.profile_gradient is not None:
            return np.where(inside, self.profile_gradient(rc), 0.0)
        slope = -self.stiffness * self.exponent * (1.0 - rc) ** (self.exponent - 1.0)
        return np.where(inside, slope, 0.0)


class InitialLaw(BaseModel):
    """x-uniform one-particle law with a Gaussian-mixture velocity part."""
    model_config = ConfigDict(frozen=True)

    d: Literal[2, 3] = 2
    means: list[list[float]]
    covariances: list[list[list[float]]]
    weights: list[float]
    # Gaussian bound parameter: sup f0 * exp(beta |v|^2 / 2) < inf
    beta: float = Field(gt=0)

    @model_validator(mode="after")
    def _check_components(self):
        n = len(self.weights)
        if n == 0 or len(self.means) != n or len(self.covariances) != n:
            raise ValueError("means, covariances and weights must have equal nonzero length")
        if any(w <= 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        for mean, cov in zip(self.means, self.covariances):
            cov = np.asarray(cov, dtype=float)
            if len(mean) != self.d or cov.shape != (self.d, self.d):
                raise ValueError("component shapes do not match d")
            if not np.allclose(cov, cov.T):
                raise ValueError("covariance must be symmetric")
            eig = np.linalg.eigvalsh(cov)
            if eig.min() <= 0:
                raise ValueError("covariance must be positive definite")
            if self.beta * eig.max() >= 1.0:
                raise ValueError("beta too large: Gaussian bound fails for a component")
        return self

    @classmethod
    def two_bump(cls, d: int = 2, separation: float = 1.5, variance: float = 0.25,
                 beta: Optional[float] = None) -> "InitialLaw":
        shift = [separation] + [0.0] * (d - 1)
        cov = (variance * np.eye(d)).tolist()
        return cls(
            d=d,
            means=[shift, [-s for s in shift]],
            covariances=[cov, cov],
            weights=[0.5, 0.5],
            beta=beta if beta is not None else 0.5 / variance,
        )

    @classmethod
    def maxwellian(cls, d: int = 2, temperature_beta: float = 1.0) -> "InitialLaw":
        cov = (np.eye(d) / temperature_beta).tolist()
        return cls(d=d, means=[[0.0] * d], covariances=[cov], weights=[1.0],
                   beta=0.5 * temperature_beta)

    def _components(self):
        for mean, cov, w in zip(self.means, self.covariances, self.weights):
            cov = np.asarray(cov, dtype=float)
            precision = np.linalg.inv(cov)
            norm = w / math.sqrt((2.0 * math.pi) ** self.d * np.linalg.det(cov))
            yield np.asarray(mean, dtype=float), cov, precision, norm

    def velocity_density(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        flat = v.reshape(-1, self.d)
        out = np.zeros(flat.shape[0])
        for mean, _, precision, norm in self._components():
            dev = flat - mean
            q = np.einsum("ni,ij,nj->n", dev, precision, dev)
            out += norm * np.exp(-0.5 * q)
        return out.reshape(v.shape[:-1])

    def phase_density(self, x, v) -> np.ndarray:
        # spatial part is uniform on the unit torus
        return self.velocity_density(v)

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        labels = gen.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        out = np.empty((n, self.d))
        for k, (mean, cov, _, _) in enumerate(self._components()):
            idx = np.flatnonzero(labels == k)
            if idx.size:
                out[idx] = gen.multivariate_normal(mean, cov, size=idx.size)
        return out

    def gaussian_bound(self, extent: float = 10.0, resolution: int = 201) -> float:
        """sup of f0(v) exp(beta |v|^2 / 2) on a dense grid."""
        axis = np.linspace(-extent, extent, resolution if self.d == 2 else max(resolution // 3, 21))
        mesh = np.stack(np.meshgrid(*([axis] * self.d), indexing="ij"), axis=-1)
        values = self.velocity_density(mesh) * np.exp(0.5 * self.beta * np.sum(mesh**2, axis=-1))
        return float(values.max())

    def lipschitz_constant(self) -> float:
        # |grad N(v)| <= N_max * sqrt(lambda_max(P)) * exp(-1/2) per component
        total = 0.0
        for _, _, precision, norm in self._components():
            total += norm * math.sqrt(np.linalg.eigvalsh(precision).max()) * math.exp(-0.5)
        return total


# ---------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------
class MeanFreeTimeEstimate(BaseModel):
    tau: float
    stderr: float
    frequency: float
    frequency_stderr: float
    events: int
    predicted_tau: float
    # too few events for a trustworthy estimate
    flagged: bool = False


class Moments(BaseModel):
    mass: float
    momentum: list[float]
    energy: float
    fourth: float
    entropy: Optional[float] = None
    entropy_stderr: Optional[float] = None


class OrderEstimate(BaseModel):
    k: int
    mean: float
    stderr: float
    n: int
    recollision_fraction: float = 0.0
    exclusion_fraction: float = 0.0
    discarded: int = 0


class SeriesEstimate(BaseModel):
    side: Literal["boltzmann", "bbgky"]
    t: float
    eps: float
    orders: list[OrderEstimate]
    total: float
    total_stderr: float
    low_precision: bool = False


class RecollisionStatistics(BaseModel):
    k: int
    t: float
    n: int
    eps: list[float]
    fractions: list[float]
    stderr: list[float]
    exclusion_fractions: list[float]
    exclusion_stderr: list[float]
    # one-sided p-values, consecutive eps pairs
    paired_pvalues: list[float]
    slope: float
    slope_stderr: Optional[float] = None
    discarded: int = 0


class KineticComparison(BaseModel):
    l1: float
    l1_stderr: float
    noise_floor: float
    weak: dict[str, float]
    weak_stderr: dict[str, float]
    weak_max: float


class ChaosResult(BaseModel):
    deficit: float
    stderr: float
    pair: tuple[str, str]
    n_pairs: int
    n_replicas: int


class ConvergenceRow(BaseModel):
    N: int
    eps: float
    t: float
    M: int
    L1: float
    L1_err: float
    noise_floor: float
    weak_max: float
    L1_t0: float
    L1_t0_err: float
    truncation_gap: float
    chaos: float
    chaos_err: float
    chaos_t0: float
    chaos_t0_err: float
    reseeds: int
    slope_partial: Optional[float] = None


class ConvergenceReport(BaseModel):
    d: int
    t: float
    M: int
    rows: list[ConvergenceRow]
    slope: Optional[float]
    inconclusive: bool
    required_m: Optional[int] = None
    dsmc_check_l1: Optional[float] = None
