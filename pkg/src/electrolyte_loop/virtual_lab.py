"""Simulated conductivity instrument.

Ground truth is a Casteel-Amis style surface in molality whose peak height
depends smoothly on the solvent blend. Measurements go through an emulated
impedance sweep, a calibrated cell constant, and a triplicate protocol in
which the first run is diluted by whatever was left in the line.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .composition import (
    DEFAULT_DENSITY,
    DensityModel,
    Electrolyte,
    default_feeders,
    estimate_density,
    plan_dose,
)
from .errors import CalibrationError, OpenCircuitError, UnreliableSpectrumError

FREQ_BAND = (14e3, 8e5)
N_FREQUENCIES = 5
OPEN_CIRCUIT_OHM = 1e7


@dataclass(frozen=True)
class SurfaceParams:
    """Parameters of the ground-truth conductivity surface.

    The blend enters only through the peak height::

        peak(blend) = peak_conductivity
                      * (1 - ec_curvature * (w_ec - ec_optimum)**2)
                      * (1 - ratio_slope * (1 - dmc_ratio))

    and molality through the Casteel-Amis factor, which equals 1 at
    ``peak_molality`` and has zero slope there.
    """

    peak_conductivity: float = 13.691089108910892
    ec_optimum: float = 0.40
    ec_curvature: float = 8.609094880355106
    ratio_slope: float = 0.20656138649838622
    peak_molality: float = 0.9
    exponent_a: float = 0.5575874504289148
    exponent_b: float = 0.0
    temp_coeff: float = 0.02
    ref_temp: float = 27.0

    def free_vector(self) -> np.ndarray:
        return np.array(
            [self.peak_conductivity, self.ec_curvature, self.ratio_slope, self.exponent_a, self.exponent_b]
        )

    def with_free(self, theta) -> "SurfaceParams":
        k, c, s, a, b = (float(t) for t in theta)
        return replace(self, peak_conductivity=k, ec_curvature=c, ratio_slope=s, exponent_a=a, exponent_b=b)


DEFAULT_SURFACE = SurfaceParams()


def _dmc_ratio(w_ec, w_dmc):
    rest = 1.0 - w_ec
    return np.divide(w_dmc, rest, out=np.zeros_like(rest), where=rest > 0)


def surface_value(X, params: SurfaceParams = DEFAULT_SURFACE, temp=None) -> np.ndarray:
    """Vectorized conductivity (mS/cm) for rows of (w_ec, w_dmc, w_emc, molality)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w_ec, w_dmc, m = X[:, 0], X[:, 1], X[:, 3]
    p = params
    peak = (
        p.peak_conductivity
        * (1.0 - p.ec_curvature * (w_ec - p.ec_optimum) ** 2)
        * (1.0 - p.ratio_slope * (1.0 - _dmc_ratio(w_ec, w_dmc)))
    )
    mu, a = p.peak_molality, p.exponent_a
    with np.errstate(divide="ignore"):
        log_shape = a * np.log(m / mu) - p.exponent_b * (m - mu) ** 2 - (a / mu) * (m - mu)
    shape = np.where(m > 0, np.exp(log_shape), 0.0)
    t = p.ref_temp if temp is None else temp
    kappa = peak * shape * (1.0 + p.temp_coeff * (np.asarray(t, dtype=float) - p.ref_temp))
    return np.maximum(kappa, 0.0)


def true_conductivity(e: Electrolyte, temp: float = 27.0, params: SurfaceParams = DEFAULT_SURFACE) -> float:
    b = e.blend
    return float(surface_value([[b.w_ec, b.w_dmc, b.w_emc, e.molality]], params, temp)[0])


def electrolyte_rows(electrolytes) -> np.ndarray:
    return np.array([[e.blend.w_ec, e.blend.w_dmc, e.blend.w_emc, e.molality] for e in electrolytes], dtype=float)


class ConductivitySurface(RegressorMixin, BaseEstimator):
    """Weighted least-squares fit of the surface to conductivity anchors.

    ``X`` rows are (w_ec, w_dmc, w_emc, molality); ``y`` is conductivity in
    mS/cm at ``ref_temp``. The EC optimum and the peak molality are held
    fixed; peak height, EC curvature, DMC-ratio slope and both molality
    exponents are fitted.
    """

    def __init__(self, ec_optimum=0.40, peak_molality=0.9, temp_coeff=0.02, ref_temp=27.0, tolerance=1.0):
        self.ec_optimum = ec_optimum
        self.peak_molality = peak_molality
        self.temp_coeff = temp_coeff
        self.ref_temp = ref_temp
        self.tolerance = tolerance

    def fit(self, X, y, sample_weight=None, labels=None):
        X, y = check_X_y(X, y, dtype=float)
        if X.shape[1] != 4:
            raise ValueError("expected columns (w_ec, w_dmc, w_emc, molality)")
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        labels = [str(i) for i in range(len(y))] if labels is None else list(labels)

        blends = {tuple(np.round(row[:3], 9)) for row in X}
        if len(X) < 4 or len(blends) < 2:
            raise CalibrationError("need at least 4 anchors over at least 2 distinct blends")

        start = SurfaceParams(
            peak_conductivity=float(y.max()),
            ec_optimum=self.ec_optimum,
            ec_curvature=10.0,
            ratio_slope=0.2,
            peak_molality=self.peak_molality,
            exponent_a=0.9,
            exponent_b=0.75,
            temp_coeff=self.temp_coeff,
            ref_temp=self.ref_temp,
        )

        def residuals(theta):
            return (surface_value(X, start.with_free(theta)) - y) * w

        fit = least_squares(
            residuals,
            start.free_vector(),
            bounds=([1e-6, 0.0, 0.0, 0.05, 0.0], [100.0, 100.0, 0.999, 5.0, 10.0]),
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
            max_nfev=20000,
        )
        sv = np.linalg.svd(fit.jac, compute_uv=False)
        if sv[-1] <= 1e-8 * sv[0]:
            raise CalibrationError("blend dependence is unidentifiable from these anchors")

        params = start.with_free(fit.x)
        err = surface_value(X, params) - y
        report = dict(zip(labels, err.tolist()))
        if np.any(np.abs(err) > self.tolerance):
            bad = {k: v for k, v in report.items() if abs(v) > self.tolerance}
            raise CalibrationError(f"anchors outside +/-{self.tolerance} mS/cm: {bad}", report)

        self.params_ = params
        self.residuals_ = report
        return self

    def predict(self, X, temp=None):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        return surface_value(X, self.params_, temp)


def load_anchors(path=None):
    """Read an anchor CSV; returns (electrolytes, conductivities, weights, labels)."""
    if path is None:
        handle = resources.files("electrolyte_loop.data").joinpath("table1_anchors.csv").open("r")
    else:
        handle = Path(path).open("r", newline="")
    with handle:
        rows = list(csv.DictReader(handle))
    electrolytes = [
        Electrolyte.from_fractions(r["w_ec"], r["w_dmc"], r["w_emc"], r["molality"]) for r in rows
    ]
    kappa = np.array([float(r["conductivity_ms_cm"]) for r in rows])
    weights = np.array([float(r.get("weight") or 1.0) for r in rows])
    labels = [r.get("label") or str(i) for i, r in enumerate(rows)]
    return electrolytes, kappa, weights, labels


def calibrate_surface(anchors, weights=None, labels=None, **kwargs) -> SurfaceParams:
    """Fit surface parameters to ``(Electrolyte, conductivity)`` anchors."""
    anchors = list(anchors)
    X = electrolyte_rows([e for e, _ in anchors])
    y = np.array([k for _, k in anchors], dtype=float)
    est = ConductivitySurface(**kwargs).fit(X, y, sample_weight=weights, labels=labels)
    return est.params_


# -- impedance -------------------------------------------------------------


@dataclass(frozen=True)
class ImpedanceSpectrum:
    frequencies: np.ndarray
    impedance: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        if len(f) < 1 or np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if f[0] < FREQ_BAND[0] * (1 - 1e-12) or f[-1] > FREQ_BAND[1] * (1 + 1e-12):
            raise ValueError("frequencies outside the 14 kHz - 800 kHz band")

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.impedance)


@dataclass(frozen=True)
class CellConstant:
    value: float
    standard_conductivity: float

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("cell constant must be positive")


@dataclass(frozen=True)
class ElectrodeModel:
    """Constant-phase element in series with the solution resistance."""

    cpe_q: float = 2e-5
    cpe_n: float = 0.85

    def impedance(self, freqs) -> np.ndarray:
        omega = 2 * np.pi * np.asarray(freqs, dtype=float)
        return 1.0 / (self.cpe_q * (1j * omega) ** self.cpe_n)


DEFAULT_ELECTRODE = ElectrodeModel()


def band_frequencies(n=N_FREQUENCIES) -> np.ndarray:
    return np.geomspace(*FREQ_BAND, n)


def simulate_impedance(kappa_true, cc, rng=None, noise=0.0, electrode: ElectrodeModel = DEFAULT_ELECTRODE):
    """Spectrum of a cell filled with a liquid of conductivity ``kappa_true`` (mS/cm).

    ``noise`` is the log-normal sigma applied once to the solution
    resistance; it needs ``rng``.
    """
    value = cc.value if isinstance(cc, CellConstant) else float(cc)
    if not kappa_true > 0:
        raise OpenCircuitError("no ionic conduction: resistance above measurable ceiling")
    r_s = 1000.0 * value / kappa_true
    if noise:
        r_s *= float(np.exp(noise * rng.standard_normal()))
    if r_s > OPEN_CIRCUIT_OHM:
        raise OpenCircuitError(f"solution resistance {r_s:.3g} ohm above measurable ceiling")
    freqs = band_frequencies()
    return ImpedanceSpectrum(freqs, r_s + electrode.impedance(freqs))


def extract_conductivity(s: ImpedanceSpectrum, cc) -> float:
    """Conductivity (mS/cm) from the real part at the smallest |phase|."""
    value = cc.value if isinstance(cc, CellConstant) else float(cc)
    phase = np.abs(s.phase)
    i = int(np.argmin(phase))
    if phase[i] > np.pi / 4:
        raise UnreliableSpectrumError("no frequency with |phase| below 45 degrees")
    return 1000.0 * value / float(np.real(s.impedance[i]))


# -- instrument state -------------------------------------------------------


@dataclass(frozen=True)
class LabConfig:
    surface: SurfaceParams = DEFAULT_SURFACE
    density: DensityModel = DEFAULT_DENSITY
    electrode: ElectrodeModel = DEFAULT_ELECTRODE
    noise_sigma: float = 0.01152  # log-normal; E|run2-run3|/mean = 2*sigma/sqrt(pi) = 1.3%
    contamination: float = 0.08
    rinse_conductivity: float = 0.0
    geometric_cell_constant: float = 1.0  # cm^-1, unknown to the software
    standard_conductivity: float = 12.39
    calibration_sweeps: int = 8
    sample_mass_g: float = 5.0
    temp_range: tuple = (26.0, 28.0)
    triplicate_minutes: float = 70.0
    rinse_minutes: float = 10.0
    feeder_inventory_ml: float = 500.0
    seed: int = 0


@dataclass(frozen=True)
class MeasurementRecord:
    electrolyte: Electrolyte
    runs: tuple
    conductivity: float
    temperature: float
    density: float
    started_s: float
    finished_s: float


@dataclass
class LabState:
    feeders: list
    cell_constant: CellConstant
    rng: np.random.Generator
    residual_conductivity: float = 0.0
    clock_s: float = 0.0
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    @property
    def inventories(self) -> dict:
        return {f.id: f.inventory for f in self.feeders}


def calibrate_cell_constant(standard_kappa: float, state: LabState, config: LabConfig = LabConfig()) -> CellConstant:
    """Single-point calibration against a standard of known conductivity.

    The standard is swept ``config.calibration_sweeps`` times and the
    resistances are averaged, so one noisy sweep does not bias every later
    reading by the full per-run noise.
    """
    resistances = []
    for _ in range(max(1, config.calibration_sweeps)):
        spectrum = simulate_impedance(
            standard_kappa, config.geometric_cell_constant, state.rng, config.noise_sigma, config.electrode
        )
        resistances.append(1.0 / extract_conductivity(spectrum, 1.0))
    return CellConstant(standard_kappa * float(np.mean(resistances)), standard_kappa)


def new_lab(config: LabConfig = LabConfig(), feeders=None) -> LabState:
    """Fresh instrument with full feeders and a calibrated cell."""
    rng = np.random.default_rng(config.seed)
    if feeders is None:
        feeders = default_feeders(config.feeder_inventory_ml, config.density)
    state = LabState(list(feeders), CellConstant(1.0, config.standard_conductivity), rng)
    state.residual_conductivity = config.rinse_conductivity
    state.cell_constant = calibrate_cell_constant(config.standard_conductivity, state, config)
    return state


def _read_run(kappa_in_cell, state, config):
    try:
        spectrum = simulate_impedance(kappa_in_cell, config.geometric_cell_constant, electrode=config.electrode)
    except OpenCircuitError:
        return 0.0
    return extract_conductivity(spectrum, state.cell_constant)


def run_measurement(
    e: Electrolyte, state: LabState, config: LabConfig = LabConfig(), replicates: int = 3
) -> MeasurementRecord:
    """Dose, then measure ``replicates`` times; the first run is discarded from the report."""
    if replicates < 2:
        raise ValueError("at least 2 replicates are needed")
    with state.lock:
        plan = plan_dose(e, config.sample_mass_g, state.feeders, config.density)
        state.feeders = [replace(f, inventory=max(f.inventory - plan.volumes[f.id], 0.0)) for f in state.feeders]

        temp = float(state.rng.uniform(*config.temp_range))
        kappa = true_conductivity(e, temp, config.surface)
        noise = np.exp(config.noise_sigma * state.rng.standard_normal(replicates))
        runs = []
        for i in range(replicates):
            in_cell = kappa * noise[i]
            if i == 0:
                lam = config.contamination
                in_cell = (1.0 - lam) * in_cell + lam * state.residual_conductivity
            runs.append(_read_run(in_cell, state, config))

        started = state.clock_s
        state.clock_s += 60.0 * config.triplicate_minutes * replicates / 3.0
        state.residual_conductivity = kappa
        return MeasurementRecord(
            electrolyte=e,
            runs=tuple(runs),
            conductivity=sum(runs[1:]) / (replicates - 1),
            temperature=temp,
            density=estimate_density(e, temp, config.density),
            started_s=started,
            finished_s=state.clock_s,
        )


def rinse(state: LabState, config: LabConfig = LabConfig()) -> None:
    with state.lock:
        state.residual_conductivity = config.rinse_conductivity
        state.clock_s += 60.0 * config.rinse_minutes
