"""Hierarchical occupancy model with a spatially correlated logit field.

Occupancy probabilities follow logit(psi) = X beta + tau, where tau is a
tail-down Gaussian field written in whitened form tau = sigma * L(theta) u
with u standard normal and L the Cholesky factor of the unit-sill
correlation matrix. Detection is a constant per-visit Bernoulli trial and
the latent presence state is marginalized out analytically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .covariance import NotPositiveDefiniteError, cholesky_lower, tail_down_corr
from .network import PairDistanceTable

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray  # S x (P+1), first column all ones
    covariate_names: tuple

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ModelError("design matrix must be 2-D")
        if not np.all(np.isfinite(v)):
            raise ModelError("non-finite entry in design matrix")
        if not np.all(v[:, 0] == 1.0):
            raise ModelError("first design column must be the intercept (all ones)")


@dataclass(frozen=True)
class DetectionHistory:
    site_id: str
    visits: tuple

    def __post_init__(self):
        if len(self.visits) < 1:
            raise ModelError(f"site {self.site_id!r}: at least one visit required")
        if any(v not in (0, 1) for v in self.visits):
            raise ModelError(f"site {self.site_id!r}: visits must be 0/1")

    @property
    def n_detections(self) -> int:
        return sum(self.visits)

    @property
    def n_visits(self) -> int:
        return len(self.visits)


# the vague sill prior is uniform on the partial sill sigma^2 up to 10,
# i.e. sigma bounded at sqrt(10)
DEFAULT_SIGMA_MAX = 10.0 ** 0.5


@dataclass(frozen=True)
class Priors:
    """Normal(0, beta_sd) on regression coefficients, uniforms elsewhere."""

    beta_sd: float = 1.5
    sigma_max: float = DEFAULT_SIGMA_MAX
    theta_min: float = 0.01
    theta_max: float = 100.0

    def __post_init__(self):
        if self.sigma_max <= 0 or not (0 < self.theta_min < self.theta_max):
            raise ModelError("invalid prior bounds")

    @classmethod
    def from_distances(cls, dist: PairDistanceTable, beta_sd=1.5,
                       sigma_max=DEFAULT_SIGMA_MAX):
        """Scale-adaptive range bounds: theta in (0.01 D, 2 D) with D the
        maximum pairwise stream distance."""
        d_max = float(dist.h.max())
        if d_max <= 0:
            d_max = 1.0
        return cls(beta_sd=beta_sd, sigma_max=sigma_max,
                   theta_min=0.01 * d_max, theta_max=2.0 * d_max)


@dataclass(frozen=True)
class ModelState:
    beta: np.ndarray
    p: float
    sigma: float
    theta: float
    u: np.ndarray

    def with_u(self, u: np.ndarray) -> "ModelState":
        return replace(self, u=u)


def inverse_logit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(eta, dtype=float)))


def occupancy_probabilities(state: ModelState, X: DesignMatrix, L: np.ndarray) -> np.ndarray:
    """psi = logit^-1(X beta + sigma * L u), elementwise in (0, 1)."""
    Xv = X.values
    if Xv.shape[1] != len(state.beta) or Xv.shape[0] != len(state.u):
        raise ModelError("dimension mismatch between design, beta and u")
    eta = Xv @ state.beta + state.sigma * (L @ state.u)
    return inverse_logit(eta)


def site_log_likelihood(psi: float, p: float, history: DetectionHistory) -> float:
    """Log marginal likelihood of one site's detection history.

    With d detections over J visits: log[psi p^d (1-p)^(J-d)] for d >= 1,
    and log[psi (1-p)^J + (1-psi)] (via log-sum-exp) for d = 0.
    """
    if not (0 < psi < 1) or not (0 < p < 1):
        raise ModelError("psi and p must lie strictly in (0, 1)")
    d, J = history.n_detections, history.n_visits
    if d > 0:
        return math.log(psi) + d * math.log(p) + (J - d) * math.log1p(-p)
    return np.logaddexp(math.log(psi) + J * math.log1p(-p), math.log1p(-psi))


def _marginal_loglik(eta: np.ndarray, p: float, d: np.ndarray, J: np.ndarray) -> float:
    """Vectorized marginalized log-likelihood over sites, on the linear
    predictor scale (numerically stable for extreme eta)."""
    log_psi = -np.logaddexp(0.0, -eta)
    log_one_minus_psi = -np.logaddexp(0.0, eta)
    lp, l1p = math.log(p), math.log1p(-p)
    occupied = log_psi + d * lp + (J - d) * l1p
    zero = d == 0
    out = np.where(zero, np.logaddexp(occupied, log_one_minus_psi), occupied)
    return float(out.sum())


class OccupancyModel:
    """Bundles data with cached correlation factors and exposes the
    log-likelihood / log-posterior used by the samplers.

    `spatial=False` pins sigma at zero (tau identically zero); the code
    path is otherwise identical, so the nonspatial fit is exactly the
    spatial fit constrained to sigma = 0.
    """

    def __init__(self, X: DesignMatrix, histories: list, dist: PairDistanceTable,
                 priors: Priors, spatial: bool = True, cache_size: int = 64):
        by_site = {h.site_id: h for h in histories}
        missing = [sid for sid in dist.site_ids if sid not in by_site]
        if missing:
            raise ModelError(f"no detection history for sites {missing}")
        extra = [sid for sid in by_site if sid not in set(dist.site_ids)]
        if extra:
            raise ModelError(f"detection history for unknown sites {extra}")
        self.X = X
        self.site_ids = list(dist.site_ids)
        self.histories = [by_site[sid] for sid in self.site_ids]
        self.d = np.array([h.n_detections for h in self.histories], dtype=float)
        self.J = np.array([h.n_visits for h in self.histories], dtype=float)
        self.dist = dist
        self.priors = priors
        self.spatial = spatial
        self.n_sites = len(self.site_ids)
        if X.values.shape[0] != self.n_sites:
            raise ModelError("design matrix rows do not match site count")
        self._chol_cache = {}
        self._cache_size = cache_size
        self.jitter_incidents = []

    def correlation_cholesky(self, theta: float) -> np.ndarray:
        """Cholesky factor of the unit-sill tail-down correlation,
        cached on theta."""
        if not self.spatial:
            raise ModelError("nonspatial model has no correlation factor")
        L = self._chol_cache.get(theta)
        if L is None:
            R = tail_down_corr(self.dist, theta)
            L, jitter = cholesky_lower(R)
            if jitter > 0:
                self.jitter_incidents.append((theta, jitter))
            if len(self._chol_cache) >= self._cache_size:
                self._chol_cache.pop(next(iter(self._chol_cache)))
            self._chol_cache[theta] = L
        return L

    def linear_predictor(self, state: ModelState) -> np.ndarray:
        eta = self.X.values @ state.beta
        if self.spatial and state.sigma > 0:
            L = self.correlation_cholesky(state.theta)
            eta = eta + state.sigma * (L @ state.u)
        return eta

    def log_likelihood(self, state: ModelState) -> float:
        if not (0 < state.p < 1):
            return -math.inf
        return _marginal_loglik(self.linear_predictor(state), state.p, self.d, self.J)

    def log_likelihood_eta(self, eta: np.ndarray, p: float) -> float:
        return _marginal_loglik(eta, p, self.d, self.J)

    def log_prior(self, state: ModelState) -> float:
        pri = self.priors
        if not (0 < state.p < 1):
            return -math.inf
        lp = float(
            -0.5 * np.sum((state.beta / pri.beta_sd) ** 2)
            - len(state.beta) * (_LOG_SQRT_2PI + math.log(pri.beta_sd))
        )
        if self.spatial:
            if not (0 < state.sigma < pri.sigma_max):
                return -math.inf
            if not (pri.theta_min < state.theta < pri.theta_max):
                return -math.inf
            lp += -math.log(pri.sigma_max)
            lp += -math.log(pri.theta_max - pri.theta_min)
            lp += float(-0.5 * np.sum(state.u**2) - len(state.u) * _LOG_SQRT_2PI)
        return lp

    def log_posterior(self, state: ModelState) -> float:
        lp = self.log_prior(state)
        if lp == -math.inf:
            return -math.inf
        try:
            return lp + self.log_likelihood(state)
        except NotPositiveDefiniteError:
            return -math.inf
