"""Bayesian experiment planner over a discrete grid.

A Matern-5/2 ARD Gaussian process on unit-cube coordinates, four
acquisition functions cycled round-robin, and periodic uniform random
picks. Every decision is a pure function of (observations, step, rng).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .composition import DesignAxes, DomainGrid, normalize
from .errors import CampaignComplete, GPFitError

SQRT5 = np.sqrt(5.0)
_JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
JOINT_THOMPSON_LIMIT = 2000


class AcquisitionKind(str, enum.Enum):
    THOMPSON = "ThompsonSampling"
    EI = "ExpectedImprovement"
    TOP_TWO_EI = "TopTwoEI"
    UCB = "UCB"
    RANDOM = "Random"


DEFAULT_CYCLE = (
    AcquisitionKind.THOMPSON,
    AcquisitionKind.EI,
    AcquisitionKind.TOP_TWO_EI,
    AcquisitionKind.UCB,
)


@dataclass(frozen=True)
class PlannerConfig:
    init_count: int = 5
    random_period: int = 5
    ucb_beta: float = 2.0
    cycle: tuple = DEFAULT_CYCLE
    seed: int = 0
    budget: int = 40
    n_restarts: int = 16
    # candidates per init draw; >1 picks the maximin one (corner-biased on this grid)
    init_pool: int = 1

    def __post_init__(self):
        if self.init_count < 1:
            raise ValueError("init_count must be >= 1")
        if self.random_period < 2:
            raise ValueError("random_period must be >= 2")
        if self.budget < self.init_count:
            raise ValueError("budget must be >= init_count")
        if not self.cycle:
            raise ValueError("acquisition cycle must not be empty")
        object.__setattr__(self, "cycle", tuple(AcquisitionKind(k) for k in self.cycle))


def _sq_dist(A, B, lengthscales):
    A = A / lengthscales
    B = B / lengthscales
    d2 = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def matern52(A, B, lengthscales, signal_var):
    r = np.sqrt(_sq_dist(A, B, lengthscales))
    return signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * np.exp(-SQRT5 * r)


def _cholesky(K):
    scale = max(float(np.mean(np.diag(K))), 1e-300)
    for jitter in _JITTERS:
        try:
            return np.linalg.cholesky(K + jitter * scale * np.eye(len(K)))
        except np.linalg.LinAlgError:
            continue
    raise GPFitError("covariance is not positive definite after jitter escalation")


class GaussianProcessSurrogate(RegressorMixin, BaseEstimator):
    """GP regression with a Matern-5/2 ARD kernel and type-II ML hyperparameters.

    Targets are standardized before fitting. Hyperparameters are found by
    L-BFGS-B on the log marginal likelihood (analytic gradient) from
    ``n_restarts`` starting points; the first start is a fixed default and
    the rest are drawn from ``random_state``. ``fixed_theta`` (log
    lengthscales, log signal variance, log noise variance) skips the search.

    The noise variance is floored at ``(noise_floor_rel * |mean(y)|)**2`` in
    target units, tying the surrogate to the instrument repeatability.
    Inputs are expected on the unit cube; capping lengthscales at 2 keeps a
    few early points from declaring an axis irrelevant.
    """

    def __init__(
        self,
        n_restarts=16,
        lengthscale_bounds=(0.05, 2.0),
        signal_var_bounds=(1e-3, 10.0),
        noise_floor_rel=0.013,
        noise_var_max=1.0,
        random_state=None,
        fixed_theta=None,
    ):
        self.n_restarts = n_restarts
        self.lengthscale_bounds = lengthscale_bounds
        self.signal_var_bounds = signal_var_bounds
        self.noise_floor_rel = noise_floor_rel
        self.noise_var_max = noise_var_max
        self.random_state = random_state
        self.fixed_theta = fixed_theta

    # log-parameter vector: [log l_1..l_d, log signal_var, log noise_var]
    def _unpack(self, theta):
        d = self.n_features_in_
        ell = np.exp(theta[:d])
        return ell, float(np.exp(theta[d])), float(np.exp(theta[d + 1]))

    def log_marginal_likelihood(self, theta, eval_gradient=False):
        """Log evidence of the standardized training targets at ``theta``."""
        ell, s2, sn2 = self._unpack(np.asarray(theta, dtype=float))
        y = self.y_std_
        n = len(y)
        scaled = self.pair_sq_ / ell**2
        r = np.sqrt(scaled.sum(axis=2))
        e = np.exp(-SQRT5 * r)
        Kf = s2 * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * e
        K = Kf + sn2 * np.eye(n)
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            return (-np.inf, np.zeros_like(theta)) if eval_gradient else -np.inf
        alpha = cho_solve((L, True), y)
        lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
        if not eval_gradient:
            return lml
        inner = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
        base = s2 * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e
        grad = np.empty(len(theta))
        grad[: len(ell)] = 0.5 * np.einsum("ij,ijk->k", inner * base, scaled)
        grad[-2] = 0.5 * np.sum(inner * Kf)
        grad[-1] = 0.5 * sn2 * np.trace(inner)
        return lml, grad

    def _log_bounds(self):
        d = self.n_features_in_
        floor = max(self.noise_var_floor_, 1e-8)
        upper = max(self.noise_var_max, 4.0 * floor)
        lo = [np.log(self.lengthscale_bounds[0])] * d + [np.log(self.signal_var_bounds[0]), np.log(floor)]
        hi = [np.log(self.lengthscale_bounds[1])] * d + [np.log(self.signal_var_bounds[1]), np.log(upper)]
        return np.array(lo), np.array(hi)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if len(y) < 2:
            raise GPFitError("at least 2 observations are needed to fit the surrogate")
        self.n_features_in_ = X.shape[1]
        self.X_train_ = X
        self.y_train_ = y
        self.pair_sq_ = (X[:, None, :] - X[None, :, :]) ** 2
        self.y_mean_ = float(np.mean(y))
        spread = float(np.std(y))
        self.y_scale_ = spread if spread > 1e-12 else 1.0
        self.y_std_ = (y - self.y_mean_) / self.y_scale_
        self.noise_var_floor_ = (self.noise_floor_rel * abs(self.y_mean_) / self.y_scale_) ** 2

        if self.fixed_theta is not None:
            best_theta = np.asarray(self.fixed_theta, dtype=float)
            best_val = -self.log_marginal_likelihood(best_theta)
            return self._finish(X, y, best_theta, best_val)

        lo, hi = self._log_bounds()
        rng = check_random_state(self.random_state)
        default = np.clip(
            np.r_[np.full(self.n_features_in_, np.log(0.5)), 0.0, np.log(1e-2)], lo, hi
        )
        starts = [default] + [rng.uniform(lo, hi) for _ in range(self.n_restarts - 1)]

        def objective(theta):
            lml, grad = self.log_marginal_likelihood(theta, eval_gradient=True)
            if not np.isfinite(lml):
                return 1e25, np.zeros_like(theta)
            return -lml, -grad

        best_theta, best_val = None, np.inf
        for x0 in starts:
            res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)))
            if res.fun < best_val:
                best_theta, best_val = res.x, res.fun
        if best_theta is None or best_val >= 1e25:
            raise GPFitError("no hyperparameter start produced a finite likelihood")
        return self._finish(X, y, best_theta, best_val)

    def _finish(self, X, y, best_theta, best_val):
        self.theta_ = best_theta
        self.log_marginal_likelihood_value_ = -best_val
        self.lengthscales_, self.signal_var_, self.noise_var_ = self._unpack(best_theta)
        K = matern52(X, X, self.lengthscales_, self.signal_var_) + self.noise_var_ * np.eye(len(y))
        self.L_ = _cholesky(K)
        self.alpha_ = cho_solve((self.L_, True), self.y_std_)
        return self

    def predict(self, X, return_std=False, include_noise=True):
        """Posterior mean (and std) in target units.

        ``include_noise`` adds the observation-noise variance to the
        returned spread (predictive rather than latent).
        """
        mean, var = self.predict_var(X, include_noise=include_noise)
        return (mean, np.sqrt(var)) if return_std else mean

    def predict_var(self, X, include_noise=True):
        check_is_fitted(self, "alpha_")
        X = check_array(X, dtype=float)
        Ks = matern52(X, self.X_train_, self.lengthscales_, self.signal_var_)
        mean = self.y_mean_ + self.y_scale_ * (Ks @ self.alpha_)
        v = solve_triangular(self.L_, Ks.T, lower=True)
        var = self.signal_var_ - np.sum(v**2, axis=0)
        if include_noise:
            var = var + self.noise_var_
        return mean, np.maximum(var, 0.0) * self.y_scale_**2

    def posterior_cov(self, X):
        """Latent joint posterior (mean, covariance) at ``X`` in target units."""
        check_is_fitted(self, "alpha_")
        X = check_array(X, dtype=float)
        Ks = matern52(X, self.X_train_, self.lengthscales_, self.signal_var_)
        v = solve_triangular(self.L_, Ks.T, lower=True)
        cov = matern52(X, X, self.lengthscales_, self.signal_var_) - v.T @ v
        mean = self.y_mean_ + self.y_scale_ * (Ks @ self.alpha_)
        return mean, cov * self.y_scale_**2


GpPosterior = GaussianProcessSurrogate


@dataclass
class ObservationSet:
    """Training pairs on unit-cube coordinates."""

    points: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def add(self, x, y) -> None:
        x = np.asarray(x, dtype=float)
        if any(np.allclose(x, p, atol=1e-9) for p in self.points):
            raise ValueError(f"point {x} already observed")
        self.points.append(x)
        self.values.append(float(y))

    def __len__(self):
        return len(self.values)

    @property
    def best(self) -> float:
        return max(self.values) if self.values else -np.inf

    def arrays(self):
        return np.array(self.points, dtype=float).reshape(-1, 3), np.array(self.values, dtype=float)


def fit_gp(obs: ObservationSet, random_state=None, n_restarts=16) -> GaussianProcessSurrogate:
    X, y = obs.arrays()
    return GaussianProcessSurrogate(n_restarts=n_restarts, random_state=random_state).fit(X, y)


def gp_predict(p: GaussianProcessSurrogate, x, include_noise=True):
    """(mean, variance) at a single normalized point."""
    mean, var = p.predict_var(np.atleast_2d(x), include_noise=include_noise)
    return float(mean[0]), float(var[0])


# -- acquisitions -----------------------------------------------------------


def expected_improvement(mu, sigma, best):
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise AssertionError("negative posterior standard deviation")
    gain = mu - best
    safe = np.where(sigma > 0, sigma, 1.0)
    with np.errstate(over="ignore"):
        z = gain / safe
        ei = gain * norm.cdf(z) + sigma * norm.pdf(z)
    return np.where(sigma > 0, np.maximum(ei, 0.0), np.maximum(gain, 0.0))


def acq_ei(p, X, best):
    mu, var = p.predict_var(np.atleast_2d(X), include_noise=False)
    return expected_improvement(mu, np.sqrt(var), best)


def acq_ucb(p, X, beta):
    mu, var = p.predict_var(np.atleast_2d(X), include_noise=False)
    return mu + beta * np.sqrt(var)


def acq_thompson(p, candidates, rng) -> int:
    """Index of the argmax of one posterior draw over ``candidates``.

    The draw is joint up to ``JOINT_THOMPSON_LIMIT`` candidates and
    independent per candidate beyond that.
    """
    candidates = np.atleast_2d(candidates)
    if len(candidates) <= JOINT_THOMPSON_LIMIT:
        mean, cov = p.posterior_cov(candidates)
        L = _cholesky(cov)
        draw = mean + L @ rng.standard_normal(len(mean))
    else:
        mean, var = p.predict_var(candidates, include_noise=False)
        draw = mean + np.sqrt(var) * rng.standard_normal(len(mean))
    return int(np.argmax(draw))


def acq_ttei(p, candidates, best, rng) -> int:
    """EI argmax with probability 1/2, otherwise the EI runner-up."""
    scores = acq_ei(p, candidates, best)
    order = np.argsort(-scores, kind="stable")
    if len(order) == 1 or rng.random() < 0.5:
        return int(order[0])
    return int(order[1])


# -- scheduling -------------------------------------------------------------


def scheduled_kind(step: int, cfg: PlannerConfig) -> AcquisitionKind:
    """Acquisition used at 1-based ``step``."""
    if step <= cfg.init_count:
        return AcquisitionKind.RANDOM
    j = step - cfg.init_count
    if j % cfg.random_period == 0:
        return AcquisitionKind.RANDOM
    bo_index = (j - 1) - (j - 1) // cfg.random_period
    return cfg.cycle[bo_index % len(cfg.cycle)]


def _measured_mask(obs: ObservationSet, grid: DomainGrid) -> np.ndarray:
    unit = grid.normalized()
    mask = np.zeros(len(unit), dtype=bool)
    for p in obs.points:
        mask |= np.all(np.abs(unit - p) <= 1e-9, axis=1)
    return mask


def _space_filling(unit, free, measured, rng, pool):
    draw = np.sort(rng.choice(free, size=min(pool, len(free)), replace=False))
    if not measured.any():
        return int(draw[0])
    dist = np.sqrt(((unit[draw][:, None, :] - unit[measured][None, :, :]) ** 2).sum(-1)).min(axis=1)
    return int(draw[np.argmax(dist)])


def next_point(obs: ObservationSet, grid: DomainGrid, cfg: PlannerConfig, step_index: int, rng, exclude=()):
    """Choose the grid point for 1-based ``step_index``.

    ``exclude`` holds grid indices already attempted without a usable
    observation (failed doses); they are never proposed again.

    Returns ``(DesignAxes, AcquisitionKind, info)`` where ``info`` carries
    the grid index and, for model-based steps, the surrogate
    hyperparameters.
    """
    unit = grid.normalized()
    measured = _measured_mask(obs, grid)
    measured[list(exclude)] = True
    free = np.flatnonzero(~measured)
    if len(free) == 0:
        raise CampaignComplete("every grid point has been measured")

    kind = scheduled_kind(step_index, cfg)
    info = {}
    if kind is not AcquisitionKind.RANDOM and len(obs) < 2:
        kind = AcquisitionKind.RANDOM

    if kind is AcquisitionKind.RANDOM:
        if step_index <= cfg.init_count:
            idx = _space_filling(unit, free, measured, rng, cfg.init_pool)
        else:
            idx = int(rng.choice(free))
    else:
        gp = fit_gp(obs, random_state=int(rng.integers(2**31 - 1)), n_restarts=cfg.n_restarts)
        info["hyperparameters"] = {
            "lengthscales": [float(v) for v in gp.lengthscales_],
            "signal_var": gp.signal_var_,
            "noise_var": gp.noise_var_,
        }
        cand = unit[free]
        if kind is AcquisitionKind.THOMPSON:
            pick = acq_thompson(gp, cand, rng)
        elif kind is AcquisitionKind.EI:
            pick = int(np.argmax(acq_ei(gp, cand, obs.best)))
        elif kind is AcquisitionKind.TOP_TWO_EI:
            pick = acq_ttei(gp, cand, obs.best, rng)
        else:
            pick = int(np.argmax(acq_ucb(gp, cand, cfg.ucb_beta)))
        idx = int(free[pick])
    info["grid_index"] = idx
    return grid.axes(idx), kind, info


def to_unit(axes: DesignAxes, grid: DomainGrid) -> np.ndarray:
    return normalize(axes.as_array()[None, :], grid.bounds)[0]
