"""Composition algebra for the EC/DMC/EMC + LiPF6 design space.

The planner works in three axes (EC mass fraction, DMC co-solvent ratio,
salt molality); the instrument works in physical compositions and feeder
volumes. This module converts between the two and plans doses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear, nnls

from .errors import DomainError, InfeasibleDoseError, InventoryError, UndefinedRatioError

SOLVENTS = ("EC", "DMC", "EMC")
SPECIES = SOLVENTS + ("LiPF6",)

#: Axis bounds accepted by :class:`DesignAxes` (ec_frac, dmc_ratio, molality).
AXIS_BOUNDS = ((0.30, 0.50), (0.0, 1.0), (0.0, 2.0))
#: Default campaign grid: 11 levels per axis; molality capped at 1.8 so that
#: 0.9 mol/kg is a grid node.
DEFAULT_GRID_BOUNDS = ((0.30, 0.50), (0.0, 1.0), (0.0, 1.8))
DEFAULT_LEVELS = (11, 11, 11)

_SUM_TOL = 1e-9
_BOUND_TOL = 1e-12


@dataclass(frozen=True)
class SolventBlend:
    w_ec: float
    w_dmc: float
    w_emc: float

    def __post_init__(self):
        fracs = (self.w_ec, self.w_dmc, self.w_emc)
        if not all(np.isfinite(fracs)):
            raise DomainError(f"non-finite mass fraction in {fracs}")
        if min(fracs) < -_SUM_TOL or max(fracs) > 1 + _SUM_TOL:
            raise DomainError(f"mass fractions must lie in [0, 1], got {fracs}")
        if abs(sum(fracs) - 1.0) > _SUM_TOL:
            raise DomainError(f"mass fractions sum to {sum(fracs):.12g}, expected 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_ec, self.w_dmc, self.w_emc])


@dataclass(frozen=True)
class Electrolyte:
    blend: SolventBlend
    molality: float

    def __post_init__(self):
        lo, hi = AXIS_BOUNDS[2]
        if not np.isfinite(self.molality) or not lo <= self.molality <= hi + _BOUND_TOL:
            raise DomainError(f"molality {self.molality} outside [{lo}, {hi}]")

    @classmethod
    def from_fractions(cls, w_ec, w_dmc, w_emc, molality) -> "Electrolyte":
        return cls(SolventBlend(float(w_ec), float(w_dmc), float(w_emc)), float(molality))

    def species_fractions(self, salt_molar_mass: float) -> np.ndarray:
        """Mass fractions of (EC, DMC, EMC, LiPF6) in the whole solution."""
        salt_per_kg = self.molality * salt_molar_mass
        solvent = self.blend.as_array() / (1.0 + salt_per_kg)
        return np.append(solvent, salt_per_kg / (1.0 + salt_per_kg))

    def key(self) -> tuple:
        """Rounded tuple usable for set membership and sorting."""
        b = self.blend
        return tuple(round(v, 9) for v in (b.w_ec, b.w_dmc, b.w_emc, self.molality))


@dataclass(frozen=True)
class DesignAxes:
    ec_frac: float
    dmc_ratio: float
    molality: float

    def as_array(self) -> np.ndarray:
        return np.array([self.ec_frac, self.dmc_ratio, self.molality])

    def check_bounds(self, bounds=AXIS_BOUNDS) -> None:
        for name, value, (lo, hi) in zip(("ec_frac", "dmc_ratio", "molality"), self.as_array(), bounds):
            if not np.isfinite(value) or value < lo - _BOUND_TOL or value > hi + _BOUND_TOL:
                raise DomainError(f"{name}={value} outside [{lo}, {hi}]")


def axes_to_electrolyte(a: DesignAxes) -> Electrolyte:
    a.check_bounds()
    w_ec = float(a.ec_frac)
    w_dmc = float(a.dmc_ratio) * (1.0 - w_ec)
    w_emc = 1.0 - w_ec - w_dmc
    return Electrolyte(SolventBlend(w_ec, w_dmc, max(w_emc, 0.0)), float(a.molality))


def electrolyte_to_axes(e: Electrolyte) -> DesignAxes:
    rest = 1.0 - e.blend.w_ec
    if rest <= 0.0:
        raise UndefinedRatioError("DMC co-solvent ratio undefined for a pure-EC blend")
    return DesignAxes(e.blend.w_ec, e.blend.w_dmc / rest, e.molality)


@dataclass(frozen=True)
class DomainGrid:
    bounds: tuple
    levels: tuple
    points: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.points)

    def axes(self, index: int) -> DesignAxes:
        return DesignAxes(*(float(v) for v in self.points[index]))

    def normalized(self) -> np.ndarray:
        """Grid points scaled to the unit cube."""
        return normalize(self.points, self.bounds)

    def index_of(self, axes: DesignAxes, atol: float = 1e-9) -> int:
        hits = np.flatnonzero(np.all(np.abs(self.points - axes.as_array()) <= atol, axis=1))
        if len(hits) == 0:
            raise KeyError(f"{axes} is not a grid point")
        return int(hits[0])


def normalize(points, bounds) -> np.ndarray:
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    return (np.asarray(points, dtype=float) - lo) / (hi - lo)


def enumerate_grid(bounds=DEFAULT_GRID_BOUNDS, levels=DEFAULT_LEVELS) -> DomainGrid:
    """Full factorial grid, lexicographic with the first axis varying slowest."""
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    levels = tuple(int(n) for n in levels)
    if len(bounds) != len(levels):
        raise ValueError("bounds and levels must have the same length")
    if any(n < 2 for n in levels):
        raise ValueError(f"each axis needs at least 2 levels, got {levels}")
    # Rounding makes nominal levels such as 0.40 exact.
    axes = [np.round(np.linspace(lo, hi, n), 12) for (lo, hi), n in zip(bounds, levels)]
    points = np.array(list(itertools.product(*axes)), dtype=float)
    points.setflags(write=False)
    return DomainGrid(bounds, levels, points)


@dataclass(frozen=True)
class DensityModel:
    """Ideal volume-additive mixing with a constant apparent molar volume for the salt.

    Pure densities are at 25 C and drift linearly with ``thermal_coeff``
    (fractional change per degree).
    """

    rho_ec: float = 1.321
    rho_dmc: float = 1.069
    rho_emc: float = 1.006
    salt_molar_mass: float = 0.15191  # kg/mol
    salt_apparent_volume: float = 45.0  # mL/mol
    thermal_coeff: float = 1.0e-3
    reference_temp: float = 25.0

    def pure_densities(self, temp: float) -> np.ndarray:
        scale = 1.0 - self.thermal_coeff * (temp - self.reference_temp)
        return np.array([self.rho_ec, self.rho_dmc, self.rho_emc]) * scale


DEFAULT_DENSITY = DensityModel()


def estimate_density(e: Electrolyte, temp: float = 25.0, model: DensityModel = DEFAULT_DENSITY) -> float:
    """Solution density in g/mL, per kilogram of solvent basis."""
    mass = 1.0 + e.molality * model.salt_molar_mass  # kg
    volume = float(np.sum(e.blend.as_array() / model.pure_densities(temp)))  # L
    volume += e.molality * model.salt_apparent_volume * 1e-3
    return mass / volume


@dataclass(frozen=True)
class FeederSolution:
    id: str
    composition: Electrolyte
    density: float
    inventory: float

    def __post_init__(self):
        if not self.density > 0:
            raise ValueError(f"feeder {self.id}: density must be positive")
        if self.inventory < 0:
            raise ValueError(f"feeder {self.id}: inventory must be non-negative")


@dataclass(frozen=True)
class DosePlan:
    volumes: dict
    total_mass: float
    residual: float

    def volume_array(self, feeders) -> np.ndarray:
        return np.array([self.volumes[f.id] for f in feeders])


def _dose_matrix(feeders, salt_molar_mass):
    # column j: grams of each species delivered per mL of feeder j
    return np.column_stack([f.density * f.composition.species_fractions(salt_molar_mass) for f in feeders])


def _min_norm_nonneg(A, b):
    """Minimum-norm v >= 0 with A v = b, as a least-distance program solved by NNLS."""
    m, n = A.shape
    G = np.vstack([A, -A, np.eye(n)])
    h = np.concatenate([b, -b, np.zeros(n)])
    E = np.vstack([G.T, h])
    f = np.zeros(n + 1)
    f[-1] = 1.0
    u, _ = nnls(E, f, maxiter=50 * E.shape[1])
    r = E @ u - f
    if abs(r[-1]) < 1e-14:
        return None
    v = -r[:n] / r[-1]
    # polish on the support: least-norm exact solve restricted to active columns
    support = v > 1e-12 * max(1.0, v.max())
    if support.any():
        v_s = np.linalg.lstsq(A[:, support], b, rcond=None)[0]
        if np.all(v_s >= 0):
            v = np.zeros(n)
            v[support] = v_s
    return np.clip(v, 0.0, None)


def _relative_residual(A, v, b):
    return float(np.linalg.norm(A @ v - b) / np.linalg.norm(b))


def plan_dose(
    target: Electrolyte,
    total_mass: float,
    feeders,
    model: DensityModel = DEFAULT_DENSITY,
    tol: float = 1e-6,
) -> DosePlan:
    """Feeder volumes (mL) that deliver ``total_mass`` grams of ``target``.

    Solves the four-species mass balance with non-negative volumes. When
    several exact solutions exist the minimum-norm one is returned.
    """
    feeders = list(feeders)
    if not feeders:
        raise ValueError("at least one feeder solution is required")
    if not total_mass > 0:
        raise ValueError("total_mass must be positive")

    A = _dose_matrix(feeders, model.salt_molar_mass)
    b = total_mass * target.species_fractions(model.salt_molar_mass)
    n = A.shape[1]

    v = None
    if n == A.shape[0] and np.linalg.cond(A) < 1e8:
        exact = np.linalg.solve(A, b)
        if np.all(exact >= -1e-12 * total_mass):
            v = np.clip(exact, 0.0, None)
    if v is None:
        v, _ = nnls(A, b, maxiter=50 * n)
        # scipy's nnls can stop early while reporting a zero residual; recheck and fall back to BVLS
        if _relative_residual(A, v, b) > tol:
            alt = lsq_linear(A, b, bounds=(0.0, np.inf), method="bvls", tol=1e-15).x
            alt = np.clip(alt, 0.0, None)
            if _relative_residual(A, alt, b) < _relative_residual(A, v, b):
                v = alt
        if np.linalg.matrix_rank(A) < n:
            refined = _min_norm_nonneg(A, b)
            if refined is not None and _relative_residual(A, refined, b) <= max(_relative_residual(A, v, b), tol):
                v = refined

    residual = _relative_residual(A, v, b)
    if residual > tol:
        raise InfeasibleDoseError(
            f"target {target.key()} lies outside the feeders' conical hull (residual {residual:.3g})"
        )
    short = [f.id for f, vol in zip(feeders, v) if vol > f.inventory + 1e-12]
    if short:
        raise InventoryError(f"insufficient inventory in feeder(s) {', '.join(short)}")
    return DosePlan({f.id: float(vol) for f, vol in zip(feeders, v)}, float(total_mass), residual)


def make_feeder(id, w_ec, w_dmc, w_emc, molality, inventory, model=DEFAULT_DENSITY, density=None, temp=25.0):
    e = Electrolyte.from_fractions(w_ec, w_dmc, w_emc, molality)
    rho = estimate_density(e, temp, model) if density is None else float(density)
    return FeederSolution(id, e, rho, float(inventory))


def default_feeders(inventory: float = 500.0, model: DensityModel = DEFAULT_DENSITY):
    """Neat solvents plus 2 mol/kg salt stocks in each solvent.

    Their conical hull covers every composition with molality <= 2.
    """
    return [
        make_feeder("EC", 1, 0, 0, 0.0, inventory, model),
        make_feeder("DMC", 0, 1, 0, 0.0, inventory, model),
        make_feeder("EMC", 0, 0, 1, 0.0, inventory, model),
        make_feeder("EC-2m", 1, 0, 0, 2.0, inventory, model),
        make_feeder("DMC-2m", 0, 1, 0, 2.0, inventory, model),
        make_feeder("EMC-2m", 0, 0, 1, 2.0, inventory, model),
    ]
