"""Spatial covariance components on stream networks.

Builds S x S covariance matrices from stream-distance tables as a sum of
tail-down, tail-up, Euclidean and nugget components, all with exponential
distance decay. Also provides the jittered Cholesky used for simulation
and whitened sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .network import PairDistanceTable, StreamNetwork

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


class ParameterError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TailDown:
    sigma2: float
    theta: float


@dataclass(frozen=True)
class TailUp:
    sigma2: float
    theta: float


@dataclass(frozen=True)
class Euclidean:
    sigma2: float
    theta: float


@dataclass(frozen=True)
class Nugget:
    sigma2: float


@dataclass(frozen=True)
class CovarianceSpec:
    components: tuple

    def __post_init__(self):
        if not self.components:
            raise ParameterError("at least one covariance component required")
        for c in self.components:
            if c.sigma2 < 0:
                raise ParameterError(f"negative sill in {c}")
            theta = getattr(c, "theta", None)
            if theta is not None and theta <= 0:
                raise ParameterError(f"nonpositive range in {c}")


@dataclass
class CovarianceMatrix:
    values: np.ndarray
    site_order: list


def _check_params(sigma2, theta):
    if theta <= 0:
        raise ParameterError(f"range parameter must be positive, got {theta}")
    if sigma2 < 0:
        raise ParameterError(f"sill must be nonnegative, got {sigma2}")


def tail_down_exp(dist: PairDistanceTable, sigma2: float, theta: float) -> CovarianceMatrix:
    """Exponential tail-down covariance.

    sigma2*exp(-h/theta) for flow-connected pairs, sigma2*exp(-(a+b)/theta)
    for flow-unconnected ones. For the exponential kernel these coincide
    since h = a + b off-flow, but both branches are evaluated as written.
    """
    _check_params(sigma2, theta)
    v = np.where(
        dist.connected,
        sigma2 * np.exp(-dist.h / theta),
        sigma2 * np.exp(-(dist.a + dist.b) / theta),
    )
    np.fill_diagonal(v, sigma2)
    return CovarianceMatrix(v, list(dist.site_ids))


def tail_down_corr(dist: PairDistanceTable, theta: float) -> np.ndarray:
    """Unit-sill tail-down correlation matrix (raw array, for samplers)."""
    if theta <= 0:
        raise ParameterError(f"range parameter must be positive, got {theta}")
    r = np.exp(-dist.h / theta)
    np.fill_diagonal(r, 1.0)
    return r


def tail_up_exp(
    dist: PairDistanceTable, weights: np.ndarray, sigma2: float, theta: float
) -> CovarianceMatrix:
    """Exponential tail-up covariance: weighted decay on flow-connected
    pairs, exactly zero across flow-unconnected ones."""
    _check_params(sigma2, theta)
    w = np.asarray(weights, dtype=float)
    if w.shape != dist.h.shape:
        raise ParameterError("weight table shape does not match distance table")
    if np.any(w < 0) or np.any(w > 1):
        raise ParameterError("tail-up weights must lie in [0, 1]")
    off_diag_unconnected = ~dist.connected
    if np.any(w[off_diag_unconnected] != 0):
        raise ParameterError("nonzero tail-up weight on a flow-unconnected pair")
    v = np.where(dist.connected, w * sigma2 * np.exp(-dist.h / theta), 0.0)
    np.fill_diagonal(v, sigma2)
    return CovarianceMatrix(v, list(dist.site_ids))


def tail_up_weights(net: StreamNetwork, sites: list, dist: PairDistanceTable) -> np.ndarray:
    """Proportional-influence weights from edge additive values.

    Each edge gets the additive proportion among the edges joining the
    same confluence; an edge's cumulative influence is the product of
    proportions down to the outlet. The pair weight is the square root
    of the ratio of cumulative influences (upstream over downstream),
    i.e. sqrt of the product of proportions along the connecting path.
    Zero for flow-unconnected pairs.
    """
    idx = net.index
    siblings = {}
    for e in net.edges:
        siblings.setdefault(e.downstream_node, []).append(e)
    proportion = {}
    for _, group in siblings.items():
        total = sum(e.additive_value for e in group)
        for e in group:
            proportion[e.edge_id] = e.additive_value / total if total > 0 else 0.0

    influence = {}

    def cumulative(edge):
        if edge.edge_id not in influence:
            par = idx.parent[edge.edge_id]
            base = 1.0 if par is None else cumulative(par)
            influence[edge.edge_id] = base * proportion[edge.edge_id]
        return influence[edge.edge_id]

    by_id = {s.site_id: s for s in sites}
    n = dist.n_sites
    w = np.zeros((n, n))
    for i in range(n):
        w[i, i] = 1.0
        for j in range(i + 1, n):
            if not dist.connected[i, j]:
                continue
            fi = cumulative(net.edge(by_id[dist.site_ids[i]].edge_id))
            fj = cumulative(net.edge(by_id[dist.site_ids[j]].edge_id))
            lo, hi = min(fi, fj), max(fi, fj)
            w[i, j] = w[j, i] = np.sqrt(lo / hi) if hi > 0 else 0.0
    return w


def euclidean_exp(coords: np.ndarray, site_ids: list, sigma2: float, theta: float) -> CovarianceMatrix:
    """Exponential covariance in planar x/y distance, ignoring topology."""
    _check_params(sigma2, theta)
    xy = np.asarray(coords, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] != len(site_ids):
        raise ParameterError("coordinates must be one (x, y) row per site")
    if not np.all(np.isfinite(xy)):
        raise ParameterError("missing or non-finite coordinates")
    d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2))
    v = sigma2 * np.exp(-d / theta)
    np.fill_diagonal(v, sigma2)
    return CovarianceMatrix(v, list(site_ids))


def assemble(
    spec: CovarianceSpec,
    dist: PairDistanceTable,
    coords: Optional[np.ndarray] = None,
    weights: Optional[np.ndarray] = None,
) -> CovarianceMatrix:
    """Sum the selected components; the nugget adds to the diagonal only."""
    n = dist.n_sites
    total = np.zeros((n, n))
    for comp in spec.components:
        if isinstance(comp, TailDown):
            total += tail_down_exp(dist, comp.sigma2, comp.theta).values
        elif isinstance(comp, TailUp):
            if weights is None:
                raise ParameterError("tail-up component requires a weight table")
            total += tail_up_exp(dist, weights, comp.sigma2, comp.theta).values
        elif isinstance(comp, Euclidean):
            if coords is None:
                raise ParameterError("Euclidean component requires site coordinates")
            total += euclidean_exp(coords, dist.site_ids, comp.sigma2, comp.theta).values
        elif isinstance(comp, Nugget):
            total[np.diag_indices(n)] += comp.sigma2
        else:
            raise ParameterError(f"unknown covariance component {comp!r}")
    return CovarianceMatrix(total, list(dist.site_ids))


def cholesky_lower(values: np.ndarray, jitter_ladder=JITTER_LADDER):
    """Lower Cholesky factor with escalating diagonal jitter.

    Returns (L, applied_jitter) with L @ L.T = values + jitter*I. Raises
    NotPositiveDefiniteError once the ladder is exhausted.
    """
    m = np.asarray(values, dtype=float)
    m = 0.5 * (m + m.T)
    scale = float(np.mean(np.diag(m)))
    if scale <= 0:
        scale = 1.0
    for level in jitter_ladder:
        jitter = level * scale
        try:
            L = np.linalg.cholesky(m + jitter * np.eye(m.shape[0]))
            return L, jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError("matrix not PSD within jitter tolerance")
