"""
src/experiments.py

One runner per CLI subcommand.

This file defines:
- the validated config model of each subcommand (unknown keys rejected)
- runner functions: (config, run directory) -> summary dict
- RUNNERS, the subcommand -> (config model, runner) routing map
"""
import logging
from typing import Callable, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.artifacts import RunDirectory
from src.config import DEFAULT_SEED, GRAZING_CUTOFF, GRID_CUTOFF, GRID_RESOLUTION, N_ANGLES, WORKERS
from src.core import Configuration, min_pair_distance, scaling_params
from src.ensemble import (MarginalEstimate, chaos_test, convergence_study, kinetic_reference, run_replicas,
                          sample_initial)
from src.exceptions import ConvergenceError, InvalidParameterError
from src.harddyn import evolve_hard, kinetic_collision_frequency, measure_mean_free_time
from src.hierarchy import estimate_series, recollision_statistics
from src.kinetic import (DistributionGrid, ParticleEnsemble, VelocityGrid, dsmc_moment_series, dsmc_run,
                         histogram_density, law_mean_free_time, moments, picard_iterate)
from src.scattering import (CrossSection, build_deflection_table, cross_section_from_deflection,
                            deflection_angle_ode, deflection_angle_quadrature, hard_sphere_deflection)
from src.schemas import InitialLaw, PotentialSpec, RngState

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


# -----------------------------------------------------------------------------
# Config building blocks
# -----------------------------------------------------------------------------
class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LawConfig(StrictModel):
    kind: Literal["two-bump", "maxwellian", "mixture"] = "two-bump"
    d: Literal[2, 3] = 2
    separation: float = 1.5
    variance: float = Field(default=0.25, gt=0)
    # inverse temperature of the maxwellian kind
    temperature_beta: float = Field(default=1.0, gt=0)
    means: Optional[list[list[float]]] = None
    covariances: Optional[list[list[list[float]]]] = None
    weights: Optional[list[float]] = None
    beta: Optional[float] = Field(default=None, gt=0)

    def build(self) -> InitialLaw:
        if self.kind == "two-bump":
            return InitialLaw.two_bump(self.d, self.separation, self.variance, self.beta)
        if self.kind == "maxwellian":
            return InitialLaw.maxwellian(self.d, self.temperature_beta)
        if self.means is None or self.covariances is None or self.weights is None or self.beta is None:
            raise InvalidParameterError("a mixture law needs means, covariances, weights and beta")
        return InitialLaw(d=self.d, means=self.means, covariances=self.covariances, weights=self.weights,
                          beta=self.beta)


class KernelConfig(StrictModel):
    kind: Literal["hard-sphere", "soft"] = "hard-sphere"
    stiffness: float = Field(default=100.0, gt=0)
    exponent: float = Field(default=2.0, ge=2)
    chi_min: float = Field(default=GRAZING_CUTOFF, ge=0)
    n_rho: int = Field(default=201, ge=3)
    energies: list[float] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0]

    def potential(self) -> PotentialSpec:
        return PotentialSpec(kind=self.kind, stiffness=self.stiffness, exponent=self.exponent)

    def build(self, d: int = 2, workers: int = 1) -> CrossSection:
        if self.kind == "hard-sphere":
            return CrossSection.hard_sphere(d)
        table = build_deflection_table(self.potential(), np.linspace(0.0, 1.0, self.n_rho), sorted(self.energies),
                                       workers=workers)
        return cross_section_from_deflection(table, chi_min=self.chi_min, d=d)


class GridConfig(StrictModel):
    cutoff: float = Field(default=GRID_CUTOFF, gt=0)
    resolution: int = Field(default=GRID_RESOLUTION, ge=2)
    n_angles: int = Field(default=N_ANGLES, ge=4)
    order: Literal[1, 3] = 3

    def build(self) -> VelocityGrid:
        return VelocityGrid(self.cutoff, self.resolution)


class ExperimentConfig(StrictModel):
    seed: int = Field(default=DEFAULT_SEED, ge=0)
    workers: int = Field(default=WORKERS, ge=1)
    # "mft": times are multiples of the kinetic mean free time of the law
    time_unit: Literal["mft", "absolute"] = "mft"

    def rng(self) -> RngState:
        return RngState(seed=self.seed)


# -----------------------------------------------------------------------------
# Subcommand configs
# -----------------------------------------------------------------------------
class ScatterConfig(ExperimentConfig):
    stiffness: list[float] = [10.0, 100.0, 1000.0]
    exponent: float = Field(default=2.0, ge=2)
    n_rho: int = Field(default=20, ge=2)
    energies: list[float] = [0.25, 0.5, 1.0, 2.0, 4.0]
    ladder_rho: float = Field(default=0.5, gt=0, lt=1)
    ladder_energy: float = Field(default=1.0, gt=0)
    compare_ode: bool = True
    oracle_stiffness: float = Field(default=100.0, gt=0)
    table_n_rho: int = Field(default=101, ge=3)
    d: Literal[2, 3] = 2


class MdRunConfig(ExperimentConfig):
    N: int = Field(default=100, ge=2)
    d: Literal[2, 3] = 2
    t: float = Field(default=1.0, ge=0)
    law: LawConfig = LawConfig(kind="maxwellian")
    dump_trajectory: bool = True


class DsmcConfig(ExperimentConfig):
    M: int = Field(default=100_000, ge=2)
    t: float = Field(default=0.1, ge=0)
    dt: float = Field(default=0.01, gt=0)
    every: int = Field(default=1, ge=1)
    law: LawConfig = LawConfig()
    kernel: KernelConfig = KernelConfig()
    grid: GridConfig = GridConfig()
    entropy: bool = True


class PicardConfig(ExperimentConfig):
    K: int = Field(default=3, ge=0, le=4)
    t: float = Field(default=0.1, ge=0)
    n_steps: int = Field(default=8, ge=1)
    law: LawConfig = LawConfig()
    kernel: KernelConfig = KernelConfig()
    grid: GridConfig = GridConfig()


class SeriesConfig(ExperimentConfig):
    side: Literal["boltzmann", "bbgky", "both"] = "both"
    K: int = Field(default=3, ge=0, le=4)
    t: float = Field(default=0.05, ge=0)
    eps: float = Field(default=0.01, ge=0)
    nsamples: int = Field(default=20_000, ge=2)
    block_size: int = Field(default=2000, ge=1)
    velocity: list[float] = [0.5, 0.0]
    beta_p: Optional[float] = Field(default=None, gt=0)
    law: LawConfig = LawConfig()


class RecollideConfig(ExperimentConfig):
    k: int = Field(default=2, ge=2)
    t: float = Field(default=1.0, gt=0)
    eps: list[float] = [0.02, 0.01, 0.005]
    nsamples: int = Field(default=20_000, ge=1)
    beta_p: float = Field(default=1.0, gt=0)
    d: Literal[2, 3] = 2

    @field_validator("eps")
    @classmethod
    def _decreasing(cls, value):
        if any(b >= a for a, b in zip(value, value[1:])):
            raise ValueError("eps list must be strictly decreasing")
        return value


class GradLimitConfig(ExperimentConfig):
    ladder: list[int] = [125, 250, 500, 1000]
    M: int = Field(default=200, ge=2)
    t: float = Field(default=0.1, ge=0)
    K: int = Field(default=3, ge=0, le=4)
    n_steps: int = Field(default=8, ge=1)
    factor: int = Field(default=2, ge=1)
    n_boot: int = Field(default=200, ge=0)
    dsmc_particles: int = Field(default=100_000, ge=2)
    law: LawConfig = LawConfig()
    grid: GridConfig = GridConfig()
    dump_histograms: bool = True


class ChaosConfig(ExperimentConfig):
    ladder: list[int] = [125, 250, 500, 1000]
    M: int = Field(default=200, ge=2)
    t: float = Field(default=0.1, ge=0)
    law: LawConfig = LawConfig()


class MftConfig(ExperimentConfig):
    N: int = Field(default=1000, ge=2)
    d: Literal[2, 3] = 2
    beta: float = Field(default=1.0, gt=0)
    # burn-in and measurement spans in units of the predicted mean free time
    t_burn: float = Field(default=1.0, ge=0)
    t_meas: float = Field(default=10.0, gt=0)
    blocks: int = Field(default=10, ge=1)
    dsmc_particles: int = Field(default=100_000, ge=2)
    dsmc_dt: float = Field(default=0.05, gt=0)


# -----------------------------------------------------------------------------
# Helpers
# -----------------------------------------------------------------------------
def _time_scale(config: ExperimentConfig, law: InitialLaw) -> float:
    """Absolute length of one time unit."""
    if config.time_unit == "absolute":
        return 1.0
    return law_mean_free_time(law, config.rng().child(999_999))


def _totals(v: np.ndarray) -> tuple[np.ndarray, float]:
    return np.sum(v, axis=0), 0.5 * float(np.sum(v * v))


# -----------------------------------------------------------------------------
# Runners
# -----------------------------------------------------------------------------
def run_scatter(config: ScatterConfig, out: RunDirectory) -> dict:
    rho = np.linspace(0.0, 1.0, config.n_rho + 1)[:-1] + 0.5 / config.n_rho
    hard = [{"rho": r, "chi": hard_sphere_deflection(float(r), 1.0)} for r in rho]
    out.write_csv("hard_sphere.csv", hard)

    ladder, oracle = [], []
    for kappa in config.stiffness:
        potential = PotentialSpec(kind="soft", stiffness=kappa, exponent=config.exponent)
        chi = deflection_angle_quadrature(potential, config.ladder_rho, config.ladder_energy)
        ladder.append({"stiffness": kappa, "rho": config.ladder_rho, "E": config.ladder_energy, "chi": chi,
                       "chi_hard": hard_sphere_deflection(config.ladder_rho, 1.0)})
        table = build_deflection_table(potential, np.linspace(0.0, 1.0, config.table_n_rho), config.energies,
                                       workers=config.workers)
        table.to_csv(out.register(f"deflection_k{kappa:g}.csv"))
        cs = cross_section_from_deflection(table, d=config.d)
        out.write_csv(f"total_rate_k{kappa:g}.csv",
                      [{"speed": s, "rate": cs.total_rate(s)} for s in np.sqrt(4.0 * np.asarray(config.energies))])
    out.write_csv("stiffness_ladder.csv", ladder)

    max_gap = None
    if config.compare_ode:
        potential = PotentialSpec(kind="soft", stiffness=config.oracle_stiffness, exponent=config.exponent)
        for E in config.energies:
            for r in rho:
                quad_chi = deflection_angle_quadrature(potential, float(r), E)
                ode_chi = deflection_angle_ode(potential, float(r), E)
                oracle.append({"stiffness": config.oracle_stiffness, "rho": r, "E": E, "chi_quadrature": quad_chi,
                               "chi_ode": ode_chi, "gap": abs(quad_chi - ode_chi)})
        out.write_csv("oracle.csv", oracle)
        max_gap = max(row["gap"] for row in oracle)
    return {"stiffness_ladder": ladder, "max_oracle_gap": max_gap}


def run_mdrun(config: MdRunConfig, out: RunDirectory) -> dict:
    law = config.law.model_copy(update={"d": config.d}).build()
    params = scaling_params(config.N, config.d)
    t = config.t * _time_scale(config, law)
    Z0 = sample_initial(config.N, params.eps, law, config.rng().child(0))
    Z1, log = evolve_hard(Z0, t)
    p0, e0 = _totals(Z0.v)
    p1, e1 = _totals(Z1.v)
    if config.dump_trajectory:
        log.to_jsonl(out.register("trajectory.jsonl"))
    summary = {
        "N": config.N, "eps": params.eps, "t": t, "events": len(log),
        "momentum_drift": float(np.max(np.abs(p1 - p0))),
        "energy_drift": abs(e1 - e0) / e0,
        "min_pair_distance": min_pair_distance(Z1),
    }
    out.write_json("summary.json", summary)
    return summary


def run_dsmc(config: DsmcConfig, out: RunDirectory) -> dict:
    law = config.law.build()
    scale = _time_scale(config, law)
    b = config.kernel.build(law.d, config.workers)
    rng = config.rng()
    ens = ParticleEnsemble.from_law(law, config.M, rng.child(0))
    final, rows = dsmc_moment_series(ens, b, config.t * scale, config.dt * scale, rng.child(1), every=config.every,
                                     with_entropy=config.entropy)
    out.write_jsonl("moments.jsonl", rows)
    if law.d == 2:
        grid = config.grid.build()
        out.write_csv("f_final.csv", DistributionGrid(grid, histogram_density(final.velocities, grid)).to_frame())
    summary = {"t": final.time, "collisions": final.collisions,
               "collision_frequency": final.collision_frequency() if final.time > 0 else None,
               "final": moments(final, rng.child(2), with_entropy=config.entropy).model_dump()}
    out.write_json("summary.json", summary)
    return summary


def run_picard(config: PicardConfig, out: RunDirectory) -> dict:
    law = config.law.build()
    scale = _time_scale(config, law)
    grid = config.grid.build()
    f0 = DistributionGrid.from_law(grid, law)
    b = config.kernel.build(2, config.workers)
    result = picard_iterate(f0, b, config.K, config.t * scale, n_steps=config.n_steps,
                            n_angles=config.grid.n_angles, order=config.grid.order, mean_free_time=scale)
    out.write_csv("f0.csv", f0.to_frame())
    out.write_csv("picard.csv", result.to_frame())
    rows = []
    for n, values in enumerate(result.iterates):
        m = moments(DistributionGrid(grid, np.maximum(values, 0.0)), with_entropy=False)
        rows.append({"iterate": n, "mass": float(values.sum() * grid.cell_volume), "energy": m.energy,
                     "min": float(values.min())})
    out.write_jsonl("iterates.jsonl", rows)
    summary = {"t": result.t, "K": config.K, "negative": result.negative}
    out.write_json("summary.json", summary)
    return summary


def run_series(config: SeriesConfig, out: RunDirectory) -> dict:
    law = config.law.build()
    if len(config.velocity) != law.d:
        raise InvalidParameterError("root velocity must match the law's dimension")
    scale = _time_scale(config, law)
    t = config.t * scale
    z = Configuration(np.zeros(law.d), np.asarray(config.velocity), 0.0, "free")
    sides = ["boltzmann", "bbgky"] if config.side == "both" else [config.side]
    summary = {}
    for side in sides:
        # both sides read the same streams, hence the same trees
        est = estimate_series(side, config.K, t, z, config.nsamples, config.eps, config.rng(), law,
                              beta_p=config.beta_p, block_size=config.block_size, workers=config.workers,
                              mean_free_time=scale if config.time_unit == "mft" else None)
        out.write_jsonl(f"series_{side}.jsonl",
                        [o.model_dump(include={"k", "mean", "stderr", "n", "recollision_fraction",
                                               "exclusion_fraction"}) for o in est.orders])
        summary[side] = {"total": est.total, "total_stderr": est.total_stderr, "low_precision": est.low_precision}
    out.write_json("summary.json", summary)
    return summary


def run_recollide(config: RecollideConfig, out: RunDirectory) -> dict:
    scale = 1.0
    if config.time_unit == "mft":
        scale = law_mean_free_time(InitialLaw.maxwellian(config.d, config.beta_p), config.rng().child(999_999))
    stats = recollision_statistics(config.eps, config.k, config.t * scale, config.nsamples, config.rng(),
                                   beta_p=config.beta_p, d=config.d, workers=config.workers)
    out.write_csv("recollisions.csv", pd.DataFrame({
        "eps": stats.eps, "fraction": stats.fractions, "stderr": stats.stderr,
        "exclusion_fraction": stats.exclusion_fractions, "exclusion_stderr": stats.exclusion_stderr,
    }))
    out.write_json("summary.json", stats)
    return stats.model_dump()


def run_grad_limit(config: GradLimitConfig, out: RunDirectory) -> dict:
    law = config.law.build()
    scale = _time_scale(config, law)
    grid = config.grid.build()
    tau = scale if config.time_unit == "mft" else None
    histograms: list[pd.DataFrame] = []

    def keep(N: int, kind: str, est: MarginalEstimate) -> None:
        frame = est.to_frame()
        frame.insert(0, "kind", kind)
        frame.insert(0, "N", N)
        histograms.append(frame)

    b = CrossSection.hard_sphere(2)
    report = convergence_study(config.ladder, law, config.t * scale, config.M, config.rng(), b=b, grid=grid,
                               K=config.K, n_steps=config.n_steps, factor=config.factor, n_boot=config.n_boot,
                               workers=config.workers, mean_free_time=tau, dsmc_particles=config.dsmc_particles,
                               observer=keep if config.dump_histograms else None)
    out.write_csv("convergence.csv", [row.model_dump() for row in report.rows])
    out.write_json("convergence.json", report)
    if config.dump_histograms:
        reference = kinetic_reference(law, config.t * scale, b, grid, config.K, config.n_steps, tau)
        out.write_csv("kinetic_reference.csv", reference.to_frame())
        out.write_csv("marginals.csv", pd.concat(histograms, ignore_index=True))
    if report.inconclusive:
        logger.warning("grad-limit study inconclusive; rerun with M=%s", report.required_m)
    return {"slope": report.slope, "inconclusive": report.inconclusive, "dsmc_check_l1": report.dsmc_check_l1}


def run_chaos(config: ChaosConfig, out: RunDirectory) -> dict:
    law = config.law.build()
    scale = _time_scale(config, law)
    rng = config.rng()
    rows = []
    for r, N in enumerate(sorted(config.ladder)):
        params = scaling_params(N, law.d, mean_free_time=scale if config.time_unit == "mft" else None)
        replicas = run_replicas(config.M, params, law, config.t * scale, rng.child(r), workers=config.workers)
        for label, configs in (("t0", replicas.initial), ("t", replicas.final)):
            result = chaos_test(configs, min_replicas=min(100, config.M))
            rows.append({"N": N, "eps": params.eps, "time": label, "deficit": result.deficit,
                         "stderr": result.stderr, "pair": "/".join(result.pair), "M": result.n_replicas})
    out.write_csv("chaos.csv", rows)
    return {"rows": rows}


def run_mft(config: MftConfig, out: RunDirectory) -> dict:
    params = scaling_params(config.N, config.d)
    predicted = 1.0 / kinetic_collision_frequency(params, config.beta)
    rng = config.rng()
    md = measure_mean_free_time(params, config.beta, config.t_burn * predicted, config.t_meas * predicted,
                                rng.child(0), blocks=config.blocks)

    # same kernel normalization on the kinetic side; DSMC frequency is per particle with N eps^{d-1} = 1
    law = InitialLaw.maxwellian(config.d, config.beta)
    ens = ParticleEnsemble.from_law(law, config.dsmc_particles, rng.child(1))
    span = config.t_meas * predicted
    final = dsmc_run_frequency(ens, CrossSection.hard_sphere(config.d), span, config.dsmc_dt * predicted,
                               rng.child(2))
    summary = {
        "md": md.model_dump(),
        "dsmc_frequency": final,
        "relative_gap": abs(md.frequency - final) / final,
        "predicted_tau": predicted,
    }
    out.write_json("mft.json", summary)
    return summary


def dsmc_run_frequency(ens: ParticleEnsemble, b: CrossSection, t: float, dt: float, rng: RngState) -> float:
    """Per-particle collision frequency of a DSMC run under the unit-density scaling."""
    final = dsmc_run(ens, b, t, dt, rng)
    if final.collisions == 0:
        raise ConvergenceError("DSMC accepted no collisions; lengthen the run")
    return final.collision_frequency()


Runner = Callable[[BaseModel, RunDirectory], dict]

RUNNERS: dict[str, tuple[type[ExperimentConfig], Runner]] = {
    "scatter": (ScatterConfig, run_scatter),
    "mdrun": (MdRunConfig, run_mdrun),
    "dsmc": (DsmcConfig, run_dsmc),
    "picard": (PicardConfig, run_picard),
    "series": (SeriesConfig, run_series),
    "recollide": (RecollideConfig, run_recollide),
    "grad-limit": (GradLimitConfig, run_grad_limit),
    "chaos": (ChaosConfig, run_chaos),
    "mft": (MftConfig, run_mft),
}
