"""Gaussian and Gaussian-mixture primitives.

Mixtures are stored as stacked arrays (weights ``(n,)``, means ``(n, d)``,
covariances ``(n, d, d)``) so that every operation below vectorizes over
components.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import NumericDomainError

LOG_2PI = float(np.log(2.0 * np.pi))

DEFAULT_PRUNE = 1e-5
DEFAULT_MERGE = 4.0
DEFAULT_MAX_COMPONENTS = 30


def cholesky(P: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``P`` (single or stacked).

    A failed factorization is retried once with ``1e-9 * trace(P) / dim``
    added to the diagonal before giving up.
    """
    P = np.asarray(P, dtype=float)
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    if P.ndim == 2:
        return _cholesky_jitter(P)
    out = np.empty_like(P)
    for k in range(P.shape[0]):
        try:
            out[k] = np.linalg.cholesky(P[k])
        except np.linalg.LinAlgError:
            out[k] = _cholesky_jitter(P[k])
    return out


def _cholesky_jitter(P):
    d = P.shape[-1]
    jitter = 1e-9 * np.trace(P) / d
    if not np.isfinite(jitter) or jitter <= 0:
        raise NumericDomainError("covariance is not positive definite")
    try:
        return np.linalg.cholesky(P + jitter * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise NumericDomainError("covariance is not positive definite") from exc


def symmetrize(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _logdet_from_chol(L):
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def _inv_from_chol(L):
    d = L.shape[-1]
    eye = np.broadcast_to(np.eye(d), L.shape)
    Linv = np.linalg.solve(L, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))
        if self.cov.shape != (self.dim, self.dim):
            raise ValueError("covariance shape does not match mean")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def eval_gaussian(g: Gaussian, x) -> float | np.ndarray:
    """Density of ``g`` at ``x`` (one point or a stack of points)."""
    return np.exp(log_gaussian(g, x))


def log_gaussian(g: Gaussian, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[-1] != g.dim:
        raise ValueError("point dimension does not match the Gaussian")
    L = cholesky(g.cov)
    z = np.linalg.solve(L, (X - g.mean).T)
    out = -0.5 * (g.dim * LOG_2PI + _logdet_from_chol(L) + np.sum(z * z, axis=0))
    return out[0] if single else out


def gaussian_product(factors) -> tuple[float, Gaussian]:
    """Product of Gaussian densities as ``scale * G(x; mean, cov)``.

    The scale uses the exponential form
    ``det(2 pi Pbar)^(1/2) prod det(2 pi P_j)^(-1/2) exp(-0.5 [sum mu_j' P_j^-1 mu_j - mubar' Pbar^-1 mubar])``.
    """
    factors = list(factors)
    if not factors:
        raise ValueError("gaussian_product needs at least one factor")
    d = factors[0].dim
    if any(f.dim != d for f in factors):
        raise ValueError("all factors must share a dimension")
    if len(factors) == 1:
        return 1.0, factors[0]
    info = np.zeros((d, d))
    info_vec = np.zeros(d)
    quad = 0.0
    logdet_sum = 0.0
    for f in factors:
        L = cholesky(f.cov)
        Pinv = _inv_from_chol(L)
        info += Pinv
        info_vec += Pinv @ f.mean
        quad += f.mean @ Pinv @ f.mean
        logdet_sum += _logdet_from_chol(L)
    Lbar_inv = cholesky(symmetrize(info))
    Pbar = symmetrize(_inv_from_chol(Lbar_inv))
    mubar = Pbar @ info_vec
    logdet_bar = -_logdet_from_chol(Lbar_inv)
    n = len(factors)
    log_scale = (
        0.5 * (d * LOG_2PI + logdet_bar)
        - 0.5 * (n * d * LOG_2PI + logdet_sum)
        - 0.5 * (quad - mubar @ info @ mubar)
    )
    return float(np.exp(log_scale)), Gaussian(mubar, Pbar)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _chol: list = field(default_factory=list, init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        m = np.asarray(self.means, dtype=float)
        P = np.asarray(self.covs, dtype=float)
        if m.ndim == 1:
            m = m.reshape(len(w), -1)
        if P.ndim == 2 and len(w) > 0:
            P = P.reshape(len(w), m.shape[1], m.shape[1])
        if m.shape[0] != w.shape[0] or P.shape[:1] != w.shape or P.shape[1:] != (m.shape[1], m.shape[1]):
            raise ValueError("inconsistent mixture array shapes")
        if np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", P)

    @classmethod
    def empty(cls, dim: int) -> "GaussianMixture":
        return cls(np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim, dim)))

    @classmethod
    def from_components(cls, components) -> "GaussianMixture":
        components = list(components)
        w = np.array([c[0] for c in components], dtype=float)
        m = np.array([c[1].mean for c in components])
        P = np.array([c[1].cov for c in components])
        return cls(w, m, P)

    @classmethod
    def single(cls, mean, cov, weight=1.0) -> "GaussianMixture":
        g = Gaussian(mean, cov)
        return cls(np.array([weight]), g.mean[None], g.cov[None])

    def __len__(self):
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))

    def components(self):
        for k in range(len(self)):
            yield float(self.weights[k]), Gaussian(self.means[k], self.covs[k])

    def normalized(self) -> "GaussianMixture":
        total = self.total_weight
        if total <= 0:
            return self
        return GaussianMixture(self.weights / total, self.means, self.covs)

    def scaled(self, factor: float) -> "GaussianMixture":
        return GaussianMixture(self.weights * factor, self.means, self.covs)

    def subset(self, idx) -> "GaussianMixture":
        idx = np.asarray(idx)
        return GaussianMixture(self.weights[idx], self.means[idx], self.covs[idx])

    def chol(self):
        if not self._chol:
            self._chol.append(cholesky(self.covs))
        return self._chol[0]

    def log_component_pdfs(self, x) -> np.ndarray:
        """``log G(x; mu_k, P_k)`` for a stack of points, shape ``(npts, n)``."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        if X.shape[-1] != self.dim:
            raise ValueError("point dimension does not match the mixture")
        if len(self) == 0:
            return np.zeros((X.shape[0], 0))
        L = self.chol()
        diff = X[:, None, :] - self.means[None, :, :]
        z = np.linalg.solve(L[None], diff[..., None])[..., 0]
        maha = np.sum(z * z, axis=-1)
        return -0.5 * (self.dim * LOG_2PI + _logdet_from_chol(L)[None] + maha)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if len(self) == 0:
            out = np.full(np.atleast_2d(x).shape[0], -np.inf)
        else:
            with np.errstate(divide="ignore"):
                out = logsumexp(self.log_component_pdfs(x) + np.log(self.weights)[None], axis=1)
        return out[0] if single else out

    def pdf(self, x):
        return np.exp(self.log_pdf(x))

    def mean(self) -> np.ndarray:
        w = self.weights / self.total_weight
        return w @ self.means

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs_row_major": [c.reshape(-1).tolist() for c in self.covs],
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        w = np.asarray(data["weights"], dtype=float)
        d = int(data["dim"])
        m = np.asarray(data["means"], dtype=float).reshape(len(w), d)
        P = np.asarray(data["covs_row_major"], dtype=float).reshape(len(w), d, d)
        return cls(w, m, P)


def mixture_product(a: GaussianMixture, b: GaussianMixture, log_scale_out: bool = False):
    """Expanded product of two mixtures (``len(a) * len(b)`` components).

    Each pair contributes ``w_a w_b * scale`` where ``scale`` is the
    Gaussian-product normalizer, which equals ``G(mu_a; mu_b, P_a + P_b)``.
    With ``log_scale_out`` the weights are divided by their maximum and
    ``(mixture, log_max)`` is returned, which survives products whose
    weights would underflow.
    """
    if a.dim != b.dim:
        raise ValueError("mixtures must share a dimension")
    na, nb, d = len(a), len(b), a.dim
    if na == 0 or nb == 0:
        empty = GaussianMixture.empty(d)
        return (empty, -np.inf) if log_scale_out else empty
    La, Lb = a.chol(), b.chol()
    Ia, Ib = _inv_from_chol(La), _inv_from_chol(Lb)
    info = Ia[:, None] + Ib[None, :]
    Linfo = cholesky(symmetrize(info))
    cov = symmetrize(_inv_from_chol(Linfo))
    hv = (Ia @ a.means[..., None])[:, None] + (Ib @ b.means[..., None])[None, :]
    mean = (cov @ hv)[..., 0]
    # pair scale G(mu_a; mu_b, P_a + P_b)
    S = a.covs[:, None] + b.covs[None, :]
    Ls = cholesky(S)
    diff = a.means[:, None, :] - b.means[None, :, :]
    z = np.linalg.solve(Ls, diff[..., None])[..., 0]
    log_scale = -0.5 * (d * LOG_2PI + _logdet_from_chol(Ls) + np.sum(z * z, axis=-1))
    with np.errstate(divide="ignore"):
        logw = (np.log(a.weights)[:, None] + np.log(b.weights)[None, :] + log_scale).reshape(-1)
    shift = 0.0
    if log_scale_out:
        shift = float(np.max(logw))
        if not np.isfinite(shift):
            return GaussianMixture.empty(d), -np.inf
    out = GaussianMixture(np.exp(logw - shift), mean.reshape(-1, d), cov.reshape(-1, d, d))
    return (out, shift) if log_scale_out else out


def gm_power(mix: GaussianMixture, omega: float) -> GaussianMixture:
    """Component-wise approximation of ``[s(x)]^omega`` as a mixture.

    Covariances become ``P / omega`` and weights
    ``alpha^omega det(2 pi P/omega)^(1/2) / det(2 pi P)^(omega/2)``.
    """
    if not omega > 0:
        raise ValueError("exponent must be positive")
    if omega > 1:
        raise ValueError("exponent must not exceed 1")
    if omega == 1.0:
        return mix
    d = mix.dim
    logdet = _logdet_from_chol(mix.chol()) if len(mix) else np.zeros(0)
    with np.errstate(divide="ignore"):
        logw = (
            omega * np.log(mix.weights)
            + 0.5 * (d * LOG_2PI + logdet - d * np.log(omega))
            - 0.5 * omega * (d * LOG_2PI + logdet)
        )
    return GaussianMixture(np.exp(logw), mix.means, mix.covs / omega)


def merge_prune(
    mix: GaussianMixture,
    prune_thresh: float = DEFAULT_PRUNE,
    merge_dist: float = DEFAULT_MERGE,
    max_components: int = DEFAULT_MAX_COMPONENTS,
    normalize: bool = False,
) -> GaussianMixture:
    """Prune, merge and cap a mixture.

    ``merge_dist`` bounds the squared Mahalanobis distance, measured in the
    metric of the heaviest remaining component, under which components are
    merged by moment matching. Weight lost to pruning or capping is
    redistributed proportionally so the total weight is unchanged unless
    ``normalize`` asks for unit mass.
    """
    n = len(mix)
    if n == 0:
        return mix
    total = mix.total_weight
    keep = np.flatnonzero(mix.weights >= prune_thresh)
    if keep.size == 0:
        return GaussianMixture.empty(mix.dim)
    w, m, P = mix.weights[keep], mix.means[keep], mix.covs[keep]
    if merge_dist > 0 and len(w) > 1:
        w, m, P = _merge(w, m, P, merge_dist)
    if len(w) > max_components:
        top = np.argsort(-w, kind="stable")[:max_components]
        top.sort()
        w, m, P = w[top], m[top], P[top]
    kept = np.sum(w)
    if kept > 0:
        w = w * (1.0 / kept if normalize else total / kept)
    return GaussianMixture(w, m, P)


def _merge(w, m, P, thresh):
    L = cholesky(P)
    remaining = np.ones(len(w), dtype=bool)
    out_w, out_m, out_P, leads = [], [], [], []
    order = np.argsort(-w, kind="stable")
    for lead in order:
        if not remaining[lead]:
            continue
        idx = np.flatnonzero(remaining)
        diff = m[idx] - m[lead]
        z = np.linalg.solve(L[lead], diff.T)
        close = idx[np.sum(z * z, axis=0) <= thresh]
        wc = w[close]
        ws = wc.sum()
        if close.size == 1:
            out_w.append(ws)
            out_m.append(m[lead])
            out_P.append(P[lead])
        else:
            mu = wc @ m[close] / ws
            dm = m[close] - mu
            cov = (np.tensordot(wc, P[close], axes=1) + (dm * wc[:, None]).T @ dm) / ws
            out_w.append(ws)
            out_m.append(mu)
            out_P.append(symmetrize(cov))
        leads.append(lead)
        remaining[close] = False
    # emit clusters in the original order of their leading components
    perm = np.argsort(leads)
    return np.array(out_w)[perm], np.array(out_m)[perm], np.array(out_P)[perm]


@dataclass(frozen=True)
class ArgmaxResult:
    point: np.ndarray
    value: float
    converged: bool
    degraded: bool = False


def _log_mix_derivatives(mix, logw, Pinv, logc, x):
    """log s(x), its gradient and Hessian."""
    diff = x[None] - mix.means
    a = np.einsum("kij,kj->ki", Pinv, diff)
    logt = logw + logc - 0.5 * np.sum(diff * a, axis=1)
    lse = logsumexp(logt)
    if not np.isfinite(lse):
        return lse, None, None
    r = np.exp(logt - lse)
    g = -(r @ a)
    H = np.einsum("k,ki,kj->ij", r, a, a) - np.tensordot(r, Pinv, axes=1) - np.outer(g, g)
    return lse, g, H


def gm_argmax(mix: GaussianMixture, init_points, max_iter: int = 100, tol: float = 1e-8) -> ArgmaxResult:
    """Global maximum of a mixture by multi-start Newton ascent.

    Each start runs Newton steps on ``log s`` (gradient ascent when the
    Hessian is not negative definite) with backtracking. A start converges
    once the log-gradient norm drops under ``tol`` or the step stalls.
    """
    init = [np.asarray(p, dtype=float).reshape(-1) for p in init_points]
    if not init:
        raise ValueError("need at least one initial point")
    if len(mix) == 0:
        raise ValueError("mixture is empty")
    L = mix.chol()
    Pinv = _inv_from_chol(L)
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    logc = -0.5 * (mix.dim * LOG_2PI + _logdet_from_chol(L))

    def logf(x):
        diff = x[None] - mix.means
        q = np.einsum("ki,kij,kj->k", diff, Pinv, diff)
        return logsumexp(logw + logc - 0.5 * q)

    wn = np.exp(logw - logw.max())
    grad_scale = 1.0 / np.linalg.eigvalsh(np.tensordot(wn / wn.sum(), Pinv, axes=1)).max()

    best = None
    for x0 in init:
        x = x0.copy()
        f, g, H = _log_mix_derivatives(mix, logw, Pinv, logc, x)
        if not np.isfinite(f):
            continue
        converged = False
        for _ in range(max_iter):
            if np.linalg.norm(g) < tol:
                converged = True
                break
            ev = np.linalg.eigvalsh(H)
            step = -np.linalg.solve(H, g) if ev.max() < 0 else grad_scale * g
            t = 1.0
            while t > 1e-12:
                xn = x + t * step
                fn = logf(xn)
                if fn >= f:
                    break
                t *= 0.5
            else:
                converged = True
                break
            if np.linalg.norm(xn - x) <= 1e-12 * (1.0 + np.linalg.norm(x)):
                x, f = xn, fn
                converged = True
                break
            x = xn
            f, g, H = _log_mix_derivatives(mix, logw, Pinv, logc, x)
        # strict comparison keeps the earliest start on ties
        if best is None or f > best[1]:
            best = (x, f, converged)
    if best is None:
        return ArgmaxResult(init[0], 0.0, False, True)
    x, f, converged = best
    return ArgmaxResult(x, float(np.exp(f)), converged, not converged)
