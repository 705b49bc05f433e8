"""Instantaneous reward factor (IRF) as a Gaussian mixture over the drifts.

A node ``i`` with neighbours ``j_1..j_m`` sees, for an association
``k = (k_i, k_1, .., k_m)`` of one component per node, the term

    beta_k * G(Theta; phi_k(Gamma), Upsilon_k(Gamma))

with ``phi_j = mu_i - M_j mu_j`` and
``Upsilon = blockdiag(M_j P_j M_j^T / w_j) + E (P_i / w_i) E^T``.
``beta_k`` reduces to the product of the powered component weights.

For evaluation the integral over the common state ``x`` is used instead
of the stacked ``m*d`` Gaussian: the product of the powered factors
``G(x; mu_i, A) prod_j G(x; M_j mu_j + theta_j, B_j)`` has precision
``Lambda = A^-1 + sum_j B_j^-1`` and is handled with ``d x d`` algebra.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..cphd import IidClusterDensity
from ..errors import RegistrationUnavailable
from ..geometry import _GEN, _GEN2, position_index, rotation_for_dim
from ..gm import LOG_2PI, GaussianMixture, cholesky, gm_power, symmetrize

__all__ = ["IrfMixture", "build_irf", "instantaneous_cost", "DEFAULT_N_CAP"]

DEFAULT_N_CAP = 8


def _lse(x) -> float:
    top = np.max(x) if len(x) else -np.inf
    if not np.isfinite(top):
        return float(top)
    return float(top + np.log(np.sum(np.exp(x - top))))


def _inv_logdet(P):
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        L = cholesky(P)
    eye = np.broadcast_to(np.eye(P.shape[-1]), P.shape)
    Linv = np.linalg.solve(L, eye)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    return symmetrize(inv), 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


@dataclass
class _Terms:
    log_terms: np.ndarray
    xbar: np.ndarray = None
    S: np.ndarray = None
    binv: list = None
    mu_hat: list = None
    rots: list = None


def _lse_rows(x) -> np.ndarray:
    top = np.max(x, axis=-1) if x.shape[-1] else np.full(x.shape[:-1], -np.inf)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.sum(np.exp(x - safe[..., None]), axis=-1))
    return np.where(np.isfinite(top), out, top)


def _rot_batch(dim, g) -> np.ndarray:
    c, s = np.cos(g), np.sin(g)
    if dim == 2:
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    M = np.zeros(g.shape + (4, 4))
    M[..., 0, 0] = M[..., 1, 1] = M[..., 2, 2] = M[..., 3, 3] = c
    M[..., 0, 2] = M[..., 1, 3] = -s
    M[..., 2, 0] = M[..., 3, 1] = s
    return M


class IrfMixture:
    """IRF of one node against its neighbours, re-evaluable at any rotation.

    ``own`` and ``neighbors`` are the powered spatial mixtures (weights
    ``alpha_hat``, covariances ``P / omega``); neighbour means stay in
    the neighbour frames.
    """

    def __init__(self, own: GaussianMixture, neighbors, neighbor_ids=None):
        self.own = own
        self.neighbors = list(neighbors)
        self.dim = own.dim
        self.m = len(self.neighbors)
        self.neighbor_ids = list(range(1, self.m + 1)) if neighbor_ids is None else list(neighbor_ids)
        self.pos = position_index(self.dim)
        self.own_inv, self.own_logdet = _inv_logdet(own.covs)
        self.nb_inv, self.nb_logdet = [], []
        for nb in self.neighbors:
            inv, ld = _inv_logdet(nb.covs)
            self.nb_inv.append(inv)
            self.nb_logdet.append(ld)
        sizes = [len(own)] + [len(nb) for nb in self.neighbors]
        self.assoc = np.array(list(itertools.product(*[range(n) for n in sizes])), dtype=int).reshape(-1, len(sizes))
        with np.errstate(divide="ignore"):
            lb = np.log(own.weights)[self.assoc[:, 0]]
            for j, nb in enumerate(self.neighbors):
                lb = lb + np.log(nb.weights)[self.assoc[:, j + 1]]
        self.log_beta = lb

    @property
    def n_associations(self) -> int:
        return self.assoc.shape[0]

    @property
    def drift_dim(self) -> int:
        return self.m * len(self.pos)

    def beta(self) -> np.ndarray:
        return np.exp(self.log_beta)

    def _gammas(self, gammas):
        if gammas is None:
            return np.zeros(self.m)
        g = np.asarray(gammas, dtype=float).reshape(-1)
        if g.shape[0] != self.m:
            raise ValueError("one orientation per neighbour is required")
        return g

    def lift_drift(self, drift) -> np.ndarray:
        """``(m, 2)`` drifts to ``(m, d)`` frame offsets with zero velocity."""
        drift = np.asarray(drift, dtype=float).reshape(self.m, len(self.pos))
        out = np.zeros((self.m, self.dim))
        out[:, self.pos] = drift
        return out

    # explicit stacked form, used for slicing and as a cross-check
    def phi(self, gammas=None) -> np.ndarray:
        g = self._gammas(gammas)
        mu_a = self.own.means[self.assoc[:, 0]]
        blocks = []
        for j, nb in enumerate(self.neighbors):
            M = rotation_for_dim(self.dim, g[j])
            blocks.append(mu_a - nb.means[self.assoc[:, j + 1]] @ M.T)
        return np.concatenate(blocks, axis=1)

    def upsilon(self, gammas=None) -> np.ndarray:
        g = self._gammas(gammas)
        d, m, K = self.dim, self.m, self.n_associations
        A = self.own.covs[self.assoc[:, 0]]
        U = np.tile(A, (1, m, m))
        for j, nb in enumerate(self.neighbors):
            M = rotation_for_dim(d, g[j])
            U[:, j * d:(j + 1) * d, j * d:(j + 1) * d] += M @ nb.covs[self.assoc[:, j + 1]] @ M.T
        return symmetrize(U.reshape(K, m * d, m * d))

    def _terms(self, thetas, gammas, idx=None, full=False) -> _Terms:
        """Batched over parameter sets: ``thetas (P, m, d)``, ``gammas (P, m)``;
        outputs carry leading axes ``(P, K)``."""
        d = self.dim
        P = gammas.shape[0]
        assoc = self.assoc if idx is None else self.assoc[idx]
        a = assoc[:, 0]
        Ainv = self.own_inv[a][None]
        mu_a = self.own.means[a][None]
        lam = np.broadcast_to(Ainv, (P,) + Ainv.shape[1:]).copy()
        h = np.broadcast_to(np.einsum("kij,kj->ki", Ainv[0], mu_a[0]), (P, len(a), d)).copy()
        binv, mu_hat, rots = [], [], []
        for j, nb in enumerate(self.neighbors):
            b = assoc[:, j + 1]
            M = _rot_batch(d, gammas[:, j])[:, None]
            Bi = M @ self.nb_inv[j][b][None] @ np.swapaxes(M, -1, -2)
            mh = np.einsum("pkij,kj->pki", M, nb.means[b]) + thetas[:, j][:, None]
            lam += Bi
            h += np.einsum("pkij,pkj->pki", Bi, mh)
            binv.append(Bi)
            mu_hat.append(mh)
            rots.append(M)
        S, ld_lam = _inv_logdet(symmetrize(lam))
        xbar = np.einsum("pkij,pkj->pki", S, h)
        diff = xbar - mu_a
        logt = (self.log_beta if idx is None else self.log_beta[idx])[None]
        logt = logt - 0.5 * np.einsum("pki,kij,pkj->pk", diff, Ainv[0], diff) - 0.5 * (d * LOG_2PI + self.own_logdet[a])
        for j in range(self.m):
            diff = xbar - mu_hat[j]
            logt = logt - 0.5 * np.einsum("pki,pkij,pkj->pk", diff, binv[j], diff)
            logt = logt - 0.5 * (d * LOG_2PI + self.nb_logdet[j][assoc[:, j + 1]])
        logt = logt + 0.5 * (d * LOG_2PI - ld_lam)
        if not full:
            return _Terms(logt)
        return _Terms(logt, xbar, S, binv, mu_hat, rots)

    def _batch(self, thetas, gammas):
        g = np.asarray(gammas if gammas is not None else np.zeros(self.m), dtype=float)
        single = g.ndim == 1
        g = g.reshape(-1, self.m)
        th = np.asarray(thetas, dtype=float).reshape(-1, self.m, self.dim)
        if th.shape[0] != g.shape[0]:
            th, g = np.broadcast_arrays(th, g[:, :, None])
            g = g[:, :, 0]
        return th, np.ascontiguousarray(g), single

    def log_terms(self, thetas, gammas=None, idx=None) -> np.ndarray:
        """Per-association ``log(beta_k G(Theta; phi_k, Upsilon_k))``."""
        th, g, single = self._batch(thetas, gammas)
        out = self._terms(th, g, idx).log_terms
        return out[0] if single else out

    def log_value(self, thetas, gammas=None, idx=None):
        th, g, single = self._batch(thetas, gammas)
        out = _lse_rows(self._terms(th, g, idx).log_terms)
        return float(out[0]) if single else out

    def value(self, thetas, gammas=None) -> float:
        """``W(Theta, Gamma)``; ``thetas`` is ``(m, d)``, one offset per neighbour."""
        return float(np.exp(self.log_value(thetas, gammas)))

    def lift_drifts(self, drifts) -> np.ndarray:
        drifts = np.asarray(drifts, dtype=float).reshape(-1, self.m, len(self.pos))
        out = np.zeros((drifts.shape[0], self.m, self.dim))
        out[:, :, self.pos] = drifts
        return out

    def drift_log_value(self, drift, gammas=None, idx=None):
        drift = np.asarray(drift, dtype=float)
        if drift.ndim == 2:
            return self.log_value(self.lift_drift(drift), gammas, idx)
        return self.log_value(self.lift_drifts(drift), gammas, idx)

    def drift_derivatives(self, drift, gammas=None, idx=None, curvature=True):
        """log W on the drift slice, its drift gradient, orientation gradient
        and the responsibility-weighted drift precision (for mode updates).

        Batched when ``drift`` is ``(P, m, 2)`` and ``gammas`` ``(P, m)``;
        rows whose value vanishes get ``-inf`` and zero derivatives.
        """
        drift = np.asarray(drift, dtype=float)
        single = drift.ndim == 2
        thetas = self.lift_drifts(drift)
        g = np.asarray(gammas if gammas is not None else np.zeros(self.m), dtype=float).reshape(-1, self.m)
        g = np.broadcast_to(g, (thetas.shape[0], self.m))
        d, p = self.dim, self.pos
        P = thetas.shape[0]
        t = self._terms(thetas, g, idx, full=True)
        lse = _lse_rows(t.log_terms)
        ok = np.isfinite(lse)
        rho = np.where(ok[:, None], np.exp(t.log_terms - np.where(ok, lse, 0.0)[:, None]), 0.0)
        assoc = self.assoc if idx is None else self.assoc[idx]
        grad_d = np.zeros((P, self.m, len(p)))
        grad_g = np.zeros((P, self.m))
        gen = _GEN if d == 4 else _GEN2
        for j, nb in enumerate(self.neighbors):
            r = np.einsum("pkij,pkj->pki", t.binv[j], t.xbar - t.mu_hat[j])
            grad_d[:, j] = np.einsum("pk,pki->pi", rho, r[..., p])
            M = t.rots[j]
            dM = M @ gen
            Q = self.nb_inv[j][assoc[:, j + 1]][None]
            C = M @ Q @ np.swapaxes(dM, -1, -2)
            u = t.xbar - thetas[:, j][:, None]
            y = np.einsum("pki,pkij->pkj", u, M) - nb.means[assoc[:, j + 1]][None]
            dy = np.einsum("pki,pkij->pkj", u, dM)
            e = np.einsum("pkij,pkji->pk", C, t.S) + np.einsum("pki,kij,pkj->pk", y, Q[0], dy)
            grad_g[:, j] = -np.sum(rho * e, axis=1)
        H = None
        if curvature:
            q = len(p)
            Gs = [Bi[..., p] for Bi in t.binv]
            SG = [t.S @ G for G in Gs]
            H = np.zeros((P, self.m * q, self.m * q))
            for j in range(self.m):
                for l in range(self.m):
                    blk = -np.einsum("pkai,pkaj->pkij", Gs[j], SG[l])
                    if j == l:
                        blk = blk + t.binv[j][..., p, :][..., p]
                    H[:, j * q:(j + 1) * q, l * q:(l + 1) * q] = np.einsum("pk,pkij->pij", rho, blk)
        if single:
            if not ok[0]:
                return float(lse[0]), None, None, None
            return float(lse[0]), grad_d[0], grad_g[0], None if H is None else H[0]
        return lse, grad_d, grad_g, H

    def drift_slice(self, gammas=None) -> GaussianMixture:
        """Restriction of W to zero velocity offsets, as a mixture over the
        stacked drift (``m * 2`` dims). Weights carry the slice constants."""
        md = self.m * self.dim
        rows = (np.arange(self.m)[:, None] * self.dim + self.pos[None]).reshape(-1)
        T = np.zeros((md, len(rows)))
        T[rows, np.arange(len(rows))] = 1.0
        phi = self.phi(gammas)
        Uinv, ld_u = _inv_logdet(self.upsilon(gammas))
        Hk = symmetrize(T.T @ Uinv @ T)
        S, ld_h = _inv_logdet(Hk)
        rhs = np.einsum("ij,kjl,kl->ki", T.T, Uinv, phi)
        mean = np.einsum("kij,kj->ki", S, rhs)
        q = np.einsum("ki,kij,kj->k", phi, Uinv, phi) - np.einsum("ki,ki->k", mean, rhs)
        n = len(rows)
        logw = self.log_beta - 0.5 * q + 0.5 * (n * LOG_2PI - ld_h) - 0.5 * (md * LOG_2PI + ld_u)
        return GaussianMixture(np.exp(logw), mean, S)

    def positions(self):
        """Planar positions of the own and neighbour components."""
        return self.own.means[:, self.pos], [nb.means[:, self.pos] for nb in self.neighbors]


def _top_components(mix: GaussianMixture, n_cap: int, min_weight: float) -> GaussianMixture:
    keep = np.flatnonzero(mix.weights >= min_weight)
    keep = keep[np.argsort(-mix.weights[keep], kind="stable")][:n_cap]
    return mix.subset(np.sort(keep))


def build_irf(densities, weights, n_cap: int = DEFAULT_N_CAP, min_weight: float = 0.0, neighbor_ids=None) -> IrfMixture:
    """IRF of ``densities[0]`` (own) against ``densities[1:]`` (neighbours).

    ``weights`` are the consensus weights of the same nodes. Spatial
    mixtures are normalized, cut to their ``n_cap`` heaviest components
    above ``min_weight`` and powered.
    """
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if len(weights) != len(densities):
        raise ValueError("one weight per density is required")
    if len(densities) < 2:
        raise ValueError("need the own density and at least one neighbour")
    if np.any(weights <= 0):
        raise ValueError("all weights of the neighbourhood must be positive")
    powered = []
    for d, w in zip(densities, weights):
        sp = d.spatial if isinstance(d, IidClusterDensity) else d
        if len(sp) == 0 or sp.total_weight <= 0:
            raise RegistrationUnavailable("a density of the neighbourhood has no spatial components")
        sp = _top_components(sp.normalized(), n_cap, min_weight)
        if len(sp) == 0:
            raise RegistrationUnavailable("no component above the weight floor")
        powered.append(gm_power(sp, float(w)))
    return IrfMixture(powered[0], powered[1:], neighbor_ids)


def instantaneous_cost(card_pmfs, weights, irf_value: float) -> float:
    """``-log sum_n c_n W^n`` with ``c_n = prod_j p_j(n)^w_j``; ``inf`` on underflow."""
    weights = np.asarray(weights, dtype=float).reshape(-1)
    n = min(len(p) for p in card_pmfs)
    with np.errstate(divide="ignore"):
        logc = sum(w * np.log(np.asarray(p, dtype=float)[:n]) for p, w in zip(card_pmfs, weights))
        if irf_value > 0:
            terms = logc + np.arange(n) * np.log(irf_value)
        else:
            terms = np.where(np.arange(n) == 0, logc, -np.inf)
    total = _lse(terms)
    if not np.isfinite(total):
        return float("inf")
    return -float(total)
