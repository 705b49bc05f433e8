"""Drift-only registration: total-cost recursion and its maximization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..gm import GaussianMixture, gm_argmax, merge_prune, mixture_product
from .irf import IrfMixture

__all__ = ["TotalCostState", "tc_update", "card_coefficients", "DriftEstimate", "estimate_drift_known_orientation"]


@dataclass(frozen=True)
class TotalCostState:
    """``exp(-TC) = C + W(drift)`` with ``C`` the running product of ``c_0``."""

    C: float
    W: GaussianMixture

    @classmethod
    def initial(cls, drift_dim: int) -> "TotalCostState":
        return cls(1.0, GaussianMixture.empty(drift_dim))

    def reward(self, drift) -> float:
        """``exp(-TC)`` at the stacked drift."""
        x = np.asarray(drift, dtype=float).reshape(-1)
        return self.C + (float(self.W.pdf(x)) if len(self.W) else 0.0)


def card_coefficients(card_pmfs, weights) -> np.ndarray:
    """``c_n = prod_j p_j(n)^w_j`` for ``n = 0..N_max``."""
    weights = np.asarray(weights, dtype=float).reshape(-1)
    n = min(len(p) for p in card_pmfs)
    with np.errstate(divide="ignore"):
        logc = sum(w * np.log(np.asarray(p, dtype=float)[:n]) for p, w in zip(card_pmfs, weights))
    return np.exp(logc)


def _concat(*mixes):
    mixes = [m for m in mixes if len(m)]
    if not mixes:
        return None
    return GaussianMixture(
        np.concatenate([m.weights for m in mixes]),
        np.concatenate([m.means for m in mixes]),
        np.concatenate([m.covs for m in mixes]),
    )


def _reduce(mix, reduce_kw):
    if reduce_kw is None or len(mix) == 0:
        return mix
    return merge_prune(mix, **reduce_kw)


def tc_update(state: TotalCostState, irf: IrfMixture, card_pmfs, weights, gammas=None, reduce_kw=None) -> TotalCostState:
    """One step of the total-cost recursion at fixed (known) orientations.

    ``reduce_kw`` (``merge_prune`` keywords) bounds the component count;
    ``None`` keeps the exact expansion.
    """
    c = card_coefficients(card_pmfs, weights)
    w1 = irf.drift_slice(gammas)
    if len(w1) != irf.n_associations:
        raise ValueError("unexpected slice size")
    w1 = _reduce(w1, reduce_kw)
    inst = w1.scaled(c[1]) if len(c) > 1 else GaussianMixture.empty(irf.drift_dim)
    power = w1
    for n in range(2, len(c)):
        power = _reduce(mixture_product(power, w1), reduce_kw)
        inst = _concat(inst, power.scaled(c[n])) or GaussianMixture.empty(irf.drift_dim)
    cross = mixture_product(inst, state.W) if len(state.W) and len(inst) else GaussianMixture.empty(irf.drift_dim)
    W = _concat(state.W.scaled(c[0]), inst.scaled(state.C), cross)
    W = GaussianMixture.empty(irf.drift_dim) if W is None else _reduce(W, reduce_kw)
    return TotalCostState(state.C * c[0], W)


@dataclass(frozen=True)
class DriftEstimate:
    drift: np.ndarray
    value: float
    updated: bool
    degraded: bool = False


def estimate_drift_known_orientation(state: TotalCostState, prev_estimate, n_starts: int = 5) -> DriftEstimate:
    """Global maximum of the total-cost mixture, warm-started at ``prev_estimate``."""
    prev = np.asarray(prev_estimate, dtype=float).reshape(-1)
    if len(state.W) == 0:
        return DriftEstimate(prev, state.C, False)
    order = np.argsort(-state.W.weights, kind="stable")[:n_starts]
    res = gm_argmax(state.W, [prev] + [state.W.means[k] for k in order])
    return DriftEstimate(res.point, state.C + res.value, True, res.degraded)
