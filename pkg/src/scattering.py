"""
src/scattering.py

Two-body classical scattering for compactly supported repulsive potentials.

Conventions: unit masses, so the relative motion has reduced mass 1/2 and
reduced energy E = |w|^2 / 4. Distances are in units of the potential's
range. Deflection chi is the angle between incoming and outgoing relative
velocity.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np
import pandas as pd
from scipy.integrate import quad, solve_ivp, trapezoid
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from src.config import ENERGY_DRIFT_TOL, GRAZING_CUTOFF
from src.core import Configuration, energy, reduce_to_torus, torus_displacement
from src.exceptions import AdmissibilityError, ConvergenceError, InvalidParameterError
from src.parallel import ordered_map
from src.schemas import PotentialSpec

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def _require_soft(potential: PotentialSpec) -> None:
    if not potential.is_soft:
        raise InvalidParameterError("operation needs a soft potential; hard spheres have no smooth force")


# ---------------------------------------------------------------------
# Deflection angles
# ---------------------------------------------------------------------
def hard_sphere_deflection(rho: float, eps: float) -> float:
    if rho < 0:
        raise InvalidParameterError("impact parameter must be nonnegative")
    if rho >= eps:
        return 0.0
    return 2.0 * math.acos(rho / eps)


def turning_point(potential: PotentialSpec, rho: float, E: float, scan: int = 4000) -> float:
    """Outermost root of g(r) = 1 - rho^2/r^2 - Phi(r)/E in (0, 1)."""
    def g(r):
        return 1.0 - (rho / r) ** 2 - float(potential.phi(r)) / E

    grid = np.linspace(1.0, 0.0, scan + 1)[:-1]
    values = 1.0 - (rho / grid) ** 2 - potential.phi(grid) / E
    below = np.flatnonzero(values <= 0.0)
    if below.size == 0:
        raise ConvergenceError(f"no turning point for rho={rho}, E={E}: energy above the barrier")
    k = int(below[0])
    lo, hi = float(grid[k]), float(grid[k - 1])
    if values[k] == 0.0:
        return lo
    r_star = brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    # stay on the allowed side of the root
    while g(r_star) < 0.0 and r_star < hi:
        r_star = np.nextafter(r_star, 2.0)
    return float(r_star)


def deflection_angle_quadrature(potential: PotentialSpec, rho: float, E: float) -> float:
    """chi = pi - 2 arcsin(rho) - 2 rho * int_{r*}^1 dr / (r^2 sqrt(g(r))).

    The endpoint singularity is removed with r = r* + u^2.
    """
    _require_soft(potential)
    if E <= 0:
        raise InvalidParameterError("reduced energy must be positive")
    if rho < 0:
        raise InvalidParameterError("impact parameter must be nonnegative")
    if rho >= 1.0:
        return 0.0
    r_star = turning_point(potential, rho, E)
    if rho == 0.0:
        return math.pi

    slope = 2.0 * rho**2 / r_star**3 - float(potential.dphi(r_star)) / E

    def integrand(u):
        r = r_star + u * u
        g = 1.0 - (rho / r) ** 2 - float(potential.phi(r)) / E
        if g <= 0.0:
            return 2.0 / (r * r * math.sqrt(slope))
        return 2.0 * u / (r * r * math.sqrt(g))

    value, err = quad(integrand, 0.0, math.sqrt(1.0 - r_star), epsabs=1e-13, epsrel=1e-12, limit=400)
    if not math.isfinite(value) or err > 1e-9:
        raise ConvergenceError(f"turning-point quadrature did not converge (rho={rho}, E={E}, err={err:.2e})")
    chi = math.pi - 2.0 * math.asin(rho) - 2.0 * rho * value
    return min(max(chi, 0.0), math.pi)


def _ode_deflection(potential: PotentialSpec, rho: float, E: float, dt: float, start: float) -> float:
    speed = 2.0 * math.sqrt(E)

    def rhs(_, y):
        r = y[:2]
        dist = math.hypot(r[0], r[1])
        out = np.empty(4)
        out[:2] = y[2:]
        if dist < 1.0:
            # relative acceleration of two unit masses: -2 Phi'(|r|) r/|r|
            out[2:] = -2.0 * float(potential.dphi(dist)) * r / dist
        else:
            out[2:] = 0.0
        return out

    def leave(_, y):
        return y[0] ** 2 + y[1] ** 2 - start**2
    leave.terminal = True
    leave.direction = 1.0

    y0 = np.array([-math.sqrt(start**2 - rho**2), rho, speed, 0.0])
    t_max = 200.0 * start / speed + 10.0
    sol = solve_ivp(rhs, (0.0, t_max), y0, method="DOP853", rtol=1e-12, atol=1e-14,
                    max_step=dt, events=leave)
    if sol.status != 1:
        raise ConvergenceError(f"two-body orbit did not leave the interaction range (rho={rho}, E={E})")
    w_out = sol.y_events[0][0][2:]
    cross = speed * w_out[1]
    dot = speed * w_out[0]
    return math.atan2(abs(cross), dot)


def deflection_angle_ode(potential: PotentialSpec, rho: float, E: float, dt: float = 1e-2,
                         tol: float = 1e-8, max_refinements: int = 4) -> float:
    """Deflection from direct integration of the reduced two-body problem.

    The result at dt is accepted once halving dt moves it by less than tol.
    """
    _require_soft(potential)
    if E <= 0 or dt <= 0:
        raise InvalidParameterError("reduced energy and dt must be positive")
    if rho >= 1.0:
        return 0.0
    start = 1.05
    coarse = _ode_deflection(potential, rho, E, dt, start)
    for _ in range(max_refinements):
        dt *= 0.5
        fine = _ode_deflection(potential, rho, E, dt, start)
        if abs(fine - coarse) < tol:
            return fine
        coarse = fine
    raise ConvergenceError(f"deflection did not converge under dt refinement (rho={rho}, E={E})")


# ---------------------------------------------------------------------
# Deflection tables
# ---------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class DeflectionTable:
    rho: np.ndarray
    energy: np.ndarray
    # chi[m, n] at (energy[m], rho[n])
    chi: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        E = np.asarray(self.energy, dtype=float)
        chi = np.asarray(self.chi, dtype=float).reshape(E.size, rho.size)
        if np.any(np.diff(rho) <= 0) or np.any(np.diff(E) <= 0):
            raise InvalidParameterError("table grids must be strictly increasing")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "energy", E)
        object.__setattr__(self, "chi", chi)

    def to_frame(self) -> pd.DataFrame:
        E, rho = np.meshgrid(self.energy, self.rho, indexing="ij")
        return pd.DataFrame({"rho": rho.ravel(), "E": E.ravel(), "chi": self.chi.ravel()})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path) -> "DeflectionTable":
        frame = pd.read_csv(path, float_precision="round_trip")
        rho = np.unique(frame["rho"].to_numpy())
        E = np.unique(frame["E"].to_numpy())
        frame = frame.sort_values(["E", "rho"], kind="mergesort")
        return cls(rho, E, frame["chi"].to_numpy().reshape(E.size, rho.size))


def _deflection_row(args) -> list[float]:
    potential, rho_grid, E = args
    return [deflection_angle_quadrature(potential, float(r), float(E)) for r in rho_grid]


def build_deflection_table(potential: PotentialSpec, rho_grid, energy_grid, workers: int = 1) -> DeflectionTable:
    _require_soft(potential)
    rho_grid = np.asarray(rho_grid, dtype=float)
    energy_grid = np.asarray(energy_grid, dtype=float)
    rows = ordered_map(_deflection_row, [(potential, rho_grid, E) for E in energy_grid], workers=workers)
    logger.info("deflection table %d x %d built", energy_grid.size, rho_grid.size)
    return DeflectionTable(rho_grid, energy_grid, np.array(rows))


# ---------------------------------------------------------------------
# Cross-sections
# ---------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class CrossSection:
    """Collision kernel b(w, omega).

    b depends on w only through |w| and the angle between w and omega.
    Integrals over the full sphere carry sphere_factor = 1/2 because
    omega and -omega describe the same collision.
    """
    kind: Literal["hard-sphere", "soft"]
    d: int = 2
    chi_min: float = 0.0
    strength: float = 1.0
    table: Optional[DeflectionTable] = None
    sphere_factor: float = 0.5
    n_chi: int = 2049
    _interp: Optional[Callable] = field(default=None, init=False, repr=False, compare=False)
    _sigma_max: float = field(default=1.0, init=False, repr=False, compare=False)
    _warned_range: bool = field(default=False, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d not in (2, 3):
            raise InvalidParameterError(f"unsupported dimension d={self.d}")
        if self.kind == "soft":
            if self.table is None:
                raise InvalidParameterError("soft cross-section needs a deflection table")
            self._assemble()

    @classmethod
    def hard_sphere(cls, d: int = 2, strength: float = 1.0) -> "CrossSection":
        return cls("hard-sphere", d=d, strength=strength)

    def _assemble(self) -> None:
        table = self.table
        chi_axis = np.linspace(0.0, math.pi, self.n_chi)
        rho_of_chi = np.empty((table.energy.size, self.n_chi))
        for m, row in enumerate(table.chi):
            # chi decreases along rho; flip so the abscissa increases
            rho_of_chi[m] = np.interp(chi_axis, row[::-1], table.rho[::-1])
        jac = np.abs(np.gradient(rho_of_chi, chi_axis, axis=1))
        energy_axis = table.energy
        if energy_axis.size == 1:
            energy_axis = np.array([energy_axis[0], energy_axis[0] + 1.0])
            rho_of_chi = np.repeat(rho_of_chi, 2, axis=0)
            jac = np.repeat(jac, 2, axis=0)
        values = np.stack([rho_of_chi, jac], axis=-1)
        interp = RegularGridInterpolator((energy_axis, chi_axis), values, method="linear",
                                         bounds_error=False, fill_value=None)
        sigma = self._sigma(rho_of_chi, jac, chi_axis[None, :])
        sigma = np.where(chi_axis[None, :] >= self.chi_min, sigma, 0.0)
        object.__setattr__(self, "_interp", interp)
        object.__setattr__(self, "_sigma_max", float(np.max(sigma)))

    def _sigma(self, rho, jac, chi) -> np.ndarray:
        """b / |w| from the deflection Jacobian."""
        if self.d == 2:
            return 2.0 * jac
        sin_theta = np.cos(0.5 * chi)
        safe = np.where(sin_theta > 1e-8, sin_theta, 1.0)
        return np.where(sin_theta > 1e-8, 2.0 * rho * jac / safe, 4.0 * jac * jac)

    def __call__(self, w, omega) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        omega = np.asarray(omega, dtype=float)
        proj = np.abs(np.sum(w * omega, axis=-1))
        if self.kind == "hard-sphere":
            return self.strength * proj
        speed = np.sqrt(np.sum(w * w, axis=-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            cos_theta = np.where(speed > 0, np.clip(proj / speed, 0.0, 1.0), 0.0)
        chi = math.pi - 2.0 * np.arccos(cos_theta)
        E = 0.25 * speed * speed
        self._check_energy_range(np.asarray(E)[np.asarray(speed) > 0])
        E = np.clip(E, self.table.energy[0], self.table.energy[-1])
        pts = np.stack(np.broadcast_arrays(E, chi), axis=-1)
        rho_jac = self._interp(pts)
        sigma = self._sigma(rho_jac[..., 0], rho_jac[..., 1], chi)
        b = self.strength * speed * sigma
        return np.where((chi >= self.chi_min) & (speed > 0), b, 0.0)

    def _check_energy_range(self, E: np.ndarray) -> None:
        lo, hi = self.table.energy[0], self.table.energy[-1]
        outside = (E < lo) | (E > hi)
        if self._warned_range or not np.any(outside):
            return
        logger.warning("reduced energies in [%.4g, %.4g] fall outside the deflection table [%.4g, %.4g]; "
                       "using the nearest tabulated energy (%d of %d evaluations)",
                       float(E.min()), float(E.max()), lo, hi, int(outside.sum()), E.size)
        object.__setattr__(self, "_warned_range", True)

    def bound(self, speed: float) -> float:
        """Upper bound of b over all omega and relative speeds <= speed."""
        return self.strength * speed * self._sigma_max

    def total_rate(self, speed: float, n_angles: int = 4096) -> float:
        """sphere_factor * int_S b(w, omega) d omega at |w| = speed."""
        if self.d == 2:
            phi = np.linspace(0.0, 2.0 * math.pi, n_angles + 1)
            omega = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
            w = np.array([speed, 0.0])
            return self.sphere_factor * float(trapezoid(self(w, omega), phi))
        theta = np.linspace(0.0, math.pi, n_angles + 1)
        omega = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=-1)
        w = np.array([speed, 0.0, 0.0])
        return self.sphere_factor * 2.0 * math.pi * float(trapezoid(self(w, omega) * np.sin(theta), theta))


def cross_section_from_deflection(table: Optional[DeflectionTable], chi_min: float = GRAZING_CUTOFF,
                                  d: int = 2, kind: str = "soft") -> CrossSection:
    if kind == "hard-sphere":
        return CrossSection.hard_sphere(d)
    for m, row in enumerate(table.chi):
        if np.any(np.diff(row) >= 0):
            raise AdmissibilityError(
                f"deflection not strictly decreasing in rho at E={table.energy[m]:.6g}; "
                "potential outside the admissible class")
    cs = CrossSection("soft", d=d, chi_min=chi_min, table=table)
    logger.info("soft cross-section assembled: sup b/|w| = %.4g for chi >= %.3g", cs.bound(1.0), chi_min)
    return cs


# ---------------------------------------------------------------------
# Smooth N-body flow
# ---------------------------------------------------------------------
def _accelerations(x: np.ndarray, potential: PotentialSpec, eps: float, torus: bool) -> np.ndarray:
    acc = np.zeros_like(x)
    if x.shape[0] < 2:
        return acc
    tree = cKDTree(x, boxsize=1.0 if torus else None)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    if len(pairs) == 0:
        return acc
    if torus:
        r = -torus_displacement(x[pairs[:, 0]], x[pairs[:, 1]])
    else:
        r = x[pairs[:, 0]] - x[pairs[:, 1]]
    dist = np.sqrt(np.sum(r * r, axis=1))
    magnitude = -potential.dphi(dist / eps) / eps
    force = (magnitude / np.maximum(dist, 1e-300))[:, None] * r
    np.add.at(acc, pairs[:, 0], force)
    np.add.at(acc, pairs[:, 1], -force)
    return acc


def force_frequency(potential: PotentialSpec, eps: float, samples: int = 2001) -> float:
    """Fastest relative-motion frequency sqrt(2 max|Phi''|) / eps of a pair inside the range."""
    _require_soft(potential)
    if eps <= 0:
        raise InvalidParameterError("eps must be positive")
    r = np.linspace(0.0, 1.0, samples)
    curvature = float(np.abs(np.gradient(potential.dphi(r), r)).max())
    return math.sqrt(2.0 * curvature) / eps


def stable_step(potential: PotentialSpec, eps: float, drift_tol: float = ENERGY_DRIFT_TOL) -> float:
    """Largest dt evolve_smooth accepts for this drift tolerance."""
    return math.sqrt(drift_tol) / force_frequency(potential, eps)


def evolve_smooth(Z: Configuration, potential: PotentialSpec, eps: float, t: float, dt: float,
                  drift_tol: float = ENERGY_DRIFT_TOL,
                  monitor: Optional[Callable[[np.ndarray], None]] = None) -> Configuration:
    """Velocity-Verlet integration of dv_i/dt = -(1/eps) sum_j grad Phi((x_i - x_j)/eps).

    Verlet's energy error over a collision grows like (omega dt)^2, so dt
    must satisfy omega dt <= sqrt(drift_tol) with omega = force_frequency.
    """
    _require_soft(potential)
    if eps <= 0 or dt <= 0 or t < 0:
        raise InvalidParameterError("eps and dt must be positive and t nonnegative")
    limit = stable_step(potential, eps, drift_tol)
    if dt > limit * (1.0 + 1e-12):
        raise InvalidParameterError(
            f"dt={dt:.3e} does not resolve the force scale at drift tolerance {drift_tol:.1e}: need dt <= {limit:.3e}")
    if t == 0:
        return Z.copy()
    torus = Z.geometry == "torus"
    steps = max(1, math.ceil(t / dt - 1e-9))
    h = t / steps
    x, v = Z.x.copy(), Z.v.copy()
    e0 = energy(Z, potential, eps)
    acc = _accelerations(x, potential, eps, torus)
    for _ in range(steps):
        v += 0.5 * h * acc
        x += h * v
        if torus:
            x = reduce_to_torus(x)
        acc = _accelerations(x, potential, eps, torus)
        v += 0.5 * h * acc
        if monitor is not None:
            monitor(x)
    out = Z.with_state(x, v)
    e1 = energy(out, potential, eps)
    drift = abs(e1 - e0) / abs(e0) if e0 != 0 else abs(e1)
    if drift > drift_tol:
        raise ConvergenceError(f"relative energy drift {drift:.3e} exceeds {drift_tol:.1e}; refine dt")
    return out
