"""Change of frame, GCI fusion of i.i.d. cluster densities and consensus."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml
from scipy.special import logsumexp

from .cphd import IidClusterDensity
from .errors import FusionDegenerateError
from .geometry import rotation_matrix, wrap_angle
from .gm import (
    DEFAULT_MAX_COMPONENTS,
    DEFAULT_MERGE,
    DEFAULT_PRUNE,
    GaussianMixture,
    gm_power,
    merge_prune,
    mixture_product,
    symmetrize,
)

__all__ = [
    "rotation_matrix",
    "transform_density",
    "inverse_params",
    "gci_fuse",
    "gci_divergence",
    "log_spatial_overlap",
    "NetworkGraph",
    "consensus_round",
    "density_to_text",
    "density_from_text",
]


def transform_density(d: IidClusterDensity, theta, gamma: float) -> IidClusterDensity:
    """Express ``d`` in a frame where ``x' = M(gamma) x + theta``."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    M = rotation_matrix(gamma)
    sp = d.spatial
    if len(sp) == 0:
        return d
    means = sp.means @ M.T + theta
    covs = symmetrize(M @ sp.covs @ M.T)
    return IidClusterDensity(d.card_pmf.copy(), GaussianMixture(sp.weights.copy(), means, covs))


def inverse_params(theta, gamma: float):
    """Parameters of the inverse frame change."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    return -rotation_matrix(-gamma) @ theta, float(wrap_angle(-gamma))


def _active(densities, weights):
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if len(weights) != len(densities):
        raise ValueError("one weight per density is required")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("fusion weights must be nonnegative and sum to 1")
    idx = np.flatnonzero(weights > 0)
    return [densities[k] for k in idx], weights[idx]


def _powered_product(densities, weights, prune_thresh, merge_dist, max_components):
    """Normalized product of powered spatials and the log of its integral."""
    acc = None
    log_scale = 0.0
    for d, w in zip(densities, weights):
        if len(d.spatial) == 0:
            return GaussianMixture.empty(d.spatial.dim), -np.inf
        powered = gm_power(d.spatial.normalized(), float(w))
        if acc is None:
            t = powered.total_weight
            log_scale = np.log(t)
            acc = powered.scaled(1.0 / t)
            continue
        acc, shift = mixture_product(acc, powered, log_scale_out=True)
        if len(acc) == 0:
            return acc, -np.inf
        t = acc.total_weight
        log_scale += shift + np.log(t)
        acc = merge_prune(acc, prune_thresh, merge_dist, max_components, normalize=True)
    return acc, log_scale


def log_spatial_overlap(densities, weights, **reduce_kw) -> float:
    """``log`` of the integral of the weighted geometric mean of the spatials."""
    densities, weights = _active(densities, weights)
    _, log_w = _powered_product(densities, weights, **_reduce_args(reduce_kw))
    return log_w


def _reduce_args(kw):
    return {
        "prune_thresh": kw.get("prune_thresh", DEFAULT_PRUNE),
        "merge_dist": kw.get("merge_dist", DEFAULT_MERGE),
        "max_components": kw.get("max_components", DEFAULT_MAX_COMPONENTS),
    }


def _log_card_terms(densities, weights, log_w):
    with np.errstate(divide="ignore"):
        logc = sum(w * np.log(d.card_pmf) for d, w in zip(densities, weights))
    n = np.arange(len(logc))
    with np.errstate(invalid="ignore"):
        terms = logc + np.where(n > 0, n * log_w, 0.0)
    return np.where(np.isnan(terms), -np.inf, terms)


def gci_fuse(densities, weights, **reduce_kw) -> IidClusterDensity:
    """Weighted geometric mean of i.i.d. cluster densities sharing one frame."""
    densities, weights = _active(densities, weights)
    if len(densities) == 1:
        return densities[0]
    spatial, log_w = _powered_product(densities, weights, **_reduce_args(reduce_kw))
    terms = _log_card_terms(densities, weights, log_w)
    total = logsumexp(terms)
    if not np.isfinite(total):
        raise FusionDegenerateError("fused cardinality distribution has no mass")
    pmf = np.exp(terms - total)
    pmf /= pmf.sum()
    if len(spatial) == 0:
        # spatials share no support; keep the heaviest-weighted input shape
        spatial = densities[int(np.argmax(weights))].spatial
    return IidClusterDensity(pmf, spatial)


def gci_divergence(densities, weights, **reduce_kw) -> float:
    """Minimum weighted KL average divergence; ``inf`` signals underflow.

    Equals ``-log sum_n c_n W^n`` with ``c_n`` the weighted geometric mean
    of the cardinality PMFs and ``W`` the spatial overlap integral.
    Rounding and the power approximation can push the value marginally
    below zero, so it is clipped at 0.
    """
    densities, weights = _active(densities, weights)
    if len(densities) == 1:
        return 0.0
    _, log_w = _powered_product(densities, weights, **_reduce_args(reduce_kw))
    total = logsumexp(_log_card_terms(densities, weights, log_w))
    if not np.isfinite(total):
        return float("inf")
    return max(0.0, -float(total))


@dataclass(frozen=True)
class NetworkGraph:
    """Sensor network with row-stochastic consensus weights.

    ``weights[i, j]`` is the weight node ``i`` gives to in-neighbour ``j``.
    """

    n_nodes: int
    edges: tuple
    weights: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=float)
        if W.shape != (self.n_nodes, self.n_nodes):
            raise ValueError("weight matrix shape does not match node count")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "edges", tuple(tuple(int(v) for v in e) for e in self.edges))

    @classmethod
    def metropolis(cls, n_nodes: int, edges) -> "NetworkGraph":
        """Undirected graph with Metropolis weights."""
        edges = [tuple(sorted((int(a), int(b)))) for a, b in edges]
        adj = np.zeros((n_nodes, n_nodes), dtype=bool)
        for a, b in edges:
            if a == b:
                raise ValueError("self loops are implicit")
            adj[a, b] = adj[b, a] = True
        size = adj.sum(axis=1) + 1
        W = np.zeros((n_nodes, n_nodes))
        for i in range(n_nodes):
            for j in np.flatnonzero(adj[i]):
                W[i, j] = 1.0 / max(size[i], size[j])
            W[i, i] = 1.0 - W[i].sum()
        return cls(n_nodes, tuple(sorted(set(edges))), W)

    def neighbors(self, i: int) -> list[int]:
        """In-neighbours of ``i`` excluding ``i``."""
        return [j for j in range(self.n_nodes) if j != i and self.weights[i, j] > 0]

    def neighborhood(self, i: int) -> list[int]:
        return [i] + self.neighbors(i)

    def row_violations(self, tol: float = 1e-12) -> list[int]:
        return [i for i in range(self.n_nodes) if abs(self.weights[i].sum() - 1.0) > tol]


def consensus_round(densities, graph: NetworkGraph, params, L: int, **reduce_kw) -> list:
    """``L`` synchronous consensus steps.

    ``params[i][j]`` is ``(theta, gamma)`` mapping frame ``j`` into frame
    ``i`` (``theta`` lifted to the 4-dim state); ``params=None`` means all
    densities already share one frame.
    """
    if L < 0:
        raise ValueError("number of consensus steps must be nonnegative")
    current = list(densities)
    for _ in range(L):
        nxt = []
        for i in range(graph.n_nodes):
            hood = graph.neighborhood(i)
            local = [current[i]]
            for j in hood[1:]:
                if params is None:
                    local.append(current[j])
                else:
                    local.append(transform_density(current[j], *params[i][j]))
            nxt.append(gci_fuse(local, graph.weights[i, hood], **reduce_kw))
        current = nxt
    return current


def density_to_text(d: IidClusterDensity) -> str:
    """Human-readable dump: PMF plus weight/mean/row-major covariance per component."""
    return yaml.safe_dump(d.to_dict(), sort_keys=False)


def density_from_text(text: str) -> IidClusterDensity:
    return IidClusterDensity.from_dict(yaml.safe_load(text))
