"""Gaussian-mixture CPHD filtering on i.i.d. cluster densities.

The correction follows the normalized form of the GM-CPHD recursion of
Vo, Vo & Cantoni (2007): everything is expressed in terms of the unit-mass
spatial PDF so the predicted mean cardinality cancels. The cardinality
update is evaluated in the log domain with elementary symmetric functions
computed on max-scaled arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import chi2, poisson

from .geometry import POS_IDX, wrap_angle
from .gm import (
    DEFAULT_MAX_COMPONENTS,
    DEFAULT_MERGE,
    DEFAULT_PRUNE,
    GaussianMixture,
    cholesky,
    merge_prune,
    symmetrize,
    _inv_from_chol,
    _logdet_from_chol,
    LOG_2PI,
)

def truncated_poisson(mean: float, n_max: int) -> np.ndarray:
    """Poisson PMF on ``0..n_max`` renormalized to unit mass."""
    if mean <= 0:
        p = np.zeros(n_max + 1)
        p[0] = 1.0
        return p
    p = poisson.pmf(np.arange(n_max + 1), mean)
    return p / p.sum()


@dataclass(frozen=True)
class IidClusterDensity:
    card_pmf: np.ndarray
    spatial: GaussianMixture

    def __post_init__(self):
        p = np.asarray(self.card_pmf, dtype=float).reshape(-1)
        if np.any(p < -1e-15):
            raise ValueError("cardinality PMF has negative entries")
        object.__setattr__(self, "card_pmf", np.clip(p, 0.0, None))

    @property
    def n_max(self) -> int:
        return len(self.card_pmf) - 1

    @property
    def expected_cardinality(self) -> float:
        return float(np.arange(len(self.card_pmf)) @ self.card_pmf)

    @property
    def map_cardinality(self) -> int:
        return int(np.argmax(self.card_pmf))

    def to_dict(self) -> dict:
        return {"card_pmf": self.card_pmf.tolist(), "spatial": self.spatial.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "IidClusterDensity":
        return cls(np.asarray(data["card_pmf"], dtype=float), GaussianMixture.from_dict(data["spatial"]))


def cv_transition(dt: float, sigma_a: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant-velocity transition and white-noise-acceleration covariance."""
    F1 = np.array([[1.0, dt], [0.0, 1.0]])
    G = np.array([[dt**2 / 2.0], [dt]])
    Q1 = sigma_a**2 * (G @ G.T)
    F = np.kron(np.eye(2), F1)
    Q = np.kron(np.eye(2), Q1)
    return F, Q


@dataclass(frozen=True)
class MotionModel:
    F: np.ndarray
    Q: np.ndarray
    p_s: float
    birth_spatial: GaussianMixture
    birth_pmf: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.p_s <= 1.0:
            raise ValueError("survival probability must lie in [0, 1]")

    @property
    def birth_mean(self) -> float:
        return float(np.arange(len(self.birth_pmf)) @ self.birth_pmf)


@dataclass(frozen=True)
class SensorModel:
    """Linear position sensor or range-bearing sensor at the frame origin.

    Bearing follows ``atan2(xi, eta)``, i.e. it is measured from the eta
    axis towards the xi axis.
    """

    kind: str
    R: np.ndarray
    p_d: float
    clutter_rate: float
    region_area: float
    H: np.ndarray = field(default_factory=lambda: np.eye(4)[POS_IDX])

    def __post_init__(self):
        if self.kind not in ("linear", "range_bearing"):
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        if not 0.0 <= self.p_d <= 1.0:
            raise ValueError("detection probability must lie in [0, 1]")
        if self.clutter_rate < 0:
            raise ValueError("clutter rate must be nonnegative")
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))

    @property
    def meas_dim(self) -> int:
        return self.R.shape[0]

    def h(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return x @ self.H.T
        xi, eta = x[..., 0], x[..., 2]
        return np.stack([np.hypot(xi, eta), np.arctan2(xi, eta)], axis=-1)

    def linearize(self, means: np.ndarray):
        """Predicted measurements and Jacobians for stacked states."""
        n = means.shape[0]
        if self.kind == "linear":
            return means @ self.H.T, np.broadcast_to(self.H, (n,) + self.H.shape)
        xi, eta = means[:, 0], means[:, 2]
        r2 = np.maximum(xi**2 + eta**2, 1e-12)
        r = np.sqrt(r2)
        J = np.zeros((n, 2, 4))
        J[:, 0, 0] = xi / r
        J[:, 0, 2] = eta / r
        J[:, 1, 0] = eta / r2
        J[:, 1, 2] = -xi / r2
        return np.stack([r, np.arctan2(xi, eta)], axis=-1), J

    def innovation(self, z, zhat):
        d = z - zhat
        if self.kind == "range_bearing":
            d = d.copy()
            d[..., 1] = wrap_angle(d[..., 1])
        return d

    def log_clutter_pdf(self, Z: np.ndarray) -> np.ndarray:
        # uniform over the region in Cartesian coordinates; the polar
        # change of variables contributes the range factor
        if self.kind == "linear":
            return np.full(Z.shape[0], -np.log(self.region_area))
        return np.log(np.maximum(Z[:, 0], 1e-12)) - np.log(self.region_area)


def cphd_predict(prior: IidClusterDensity, motion: MotionModel) -> IidClusterDensity:
    sp = prior.spatial
    n_max = prior.n_max
    mean_n = prior.expected_cardinality
    F, Q = motion.F, motion.Q
    means = sp.means @ F.T
    covs = symmetrize(F @ sp.covs @ F.T + Q)
    w_surv = motion.p_s * mean_n * sp.weights
    b = motion.birth_spatial
    w_birth = motion.birth_mean * b.weights / max(b.total_weight, 1e-300) if len(b) else np.zeros(0)
    w = np.concatenate([w_surv, w_birth])
    total = w.sum()
    if total <= 0:
        # nothing alive and nothing born: keep the shape for later steps
        spatial = GaussianMixture(sp.weights, means, covs).normalized()
    else:
        keep = w > 0
        spatial = GaussianMixture(
            (w / total)[keep],
            np.concatenate([means, b.means])[keep],
            np.concatenate([covs, b.covs])[keep],
        )

    # binomial thinning of survivors
    j = np.arange(n_max + 1)
    ps = motion.p_s
    surv = np.zeros(n_max + 1)
    for n in range(n_max + 1):
        if ps in (0.0, 1.0):
            coef = (j == n).astype(float) if ps == 1.0 else (n == 0) * np.ones(n_max + 1)
        else:
            valid = j >= n
            coef = np.zeros(n_max + 1)
            jj = j[valid]
            coef[valid] = np.exp(
                gammaln(jj + 1) - gammaln(n + 1) - gammaln(jj - n + 1) + n * np.log(ps) + (jj - n) * np.log1p(-ps)
            )
        surv[n] = coef @ prior.card_pmf
    birth = np.zeros(n_max + 1)
    bp = np.asarray(motion.birth_pmf, dtype=float)[: n_max + 1]
    birth[: len(bp)] = bp
    pred = np.convolve(surv, birth)[: n_max + 1]
    pred = pred / pred.sum()
    return IidClusterDensity(pred, spatial)


def _esf(x: np.ndarray, order: int) -> np.ndarray:
    """Elementary symmetric functions e_0..e_order of ``x``."""
    e = np.zeros(order + 1)
    e[0] = 1.0
    for v in x:
        e[1:] = e[1:] + v * e[:-1]
    return e


def _esf_leave_one_out(x: np.ndarray, order: int) -> np.ndarray:
    """Row ``i`` holds e_0..e_order of ``x`` with entry ``i`` removed."""
    m = len(x)
    E = np.zeros((m, order + 1))
    E[:, 0] = 1.0
    for l in range(m):
        upd = x[l] * E[:, :-1]
        upd[l] = 0.0
        E[:, 1:] = E[:, 1:] + upd
    return E


def _log_upsilon(log_e, m, u, n_max, log_clutter, log_scale, log_miss):
    """log Upsilon^u(n), n = 0..n_max, for one or several ESF vectors.

    ``log_e`` has shape ``(..., J)`` and holds log e_j of the scaled
    arguments; ``log_scale`` restores the scaling as ``j * log_scale``.
    """
    J = log_e.shape[-1]
    n = np.arange(n_max + 1)[:, None]
    j = np.arange(J)[None, :]
    k = n - j - u
    valid = (k >= 0) & (j <= m)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_perm = np.where(valid, gammaln(n + 1) - gammaln(np.maximum(k, 0) + 1), -np.inf)
        miss = np.where(k > 0, np.maximum(k, 0) * log_miss, 0.0)
        cl = np.where(m - j > 0, (m - j) * log_clutter, 0.0)
        base = log_perm + miss + cl + j * log_scale
    terms = base + log_e[..., None, :]
    with np.errstate(invalid="ignore"):
        terms = np.where(np.isnan(terms), -np.inf, terms)
    return logsumexp(terms, axis=-1)


def cphd_correct(
    predicted: IidClusterDensity,
    measurements,
    sensor: SensorModel,
    *,
    prune_thresh: float = DEFAULT_PRUNE,
    merge_dist: float = DEFAULT_MERGE,
    max_components: int = DEFAULT_MAX_COMPONENTS,
    gate_prob: float | None = None,
) -> IidClusterDensity:
    """GM-CPHD measurement update.

    ``gate_prob`` enables chi-square gating: measurements outside the gate
    of every predicted component are discarded before the update.
    """
    sp = predicted.spatial
    n_max = predicted.n_max
    mdim = sensor.meas_dim
    Z = np.asarray(measurements, dtype=float)
    if Z.size == 0:
        Z = np.zeros((0, mdim))
    Z = np.atleast_2d(Z)
    if Z.shape[1] != mdim:
        raise ValueError(f"measurement dimension {Z.shape[1]} does not match sensor dimension {mdim}")

    ncomp = len(sp)
    pd = sensor.p_d
    with np.errstate(divide="ignore"):
        log_pd = np.log(pd)
        log_miss = np.log1p(-pd)
        log_lam = np.log(sensor.clutter_rate)
        log_alpha = np.log(sp.weights)
        log_p = np.log(predicted.card_pmf)

    detect = ncomp > 0 and pd > 0 and Z.shape[0] > 0
    if detect:
        zhat, Hj = sensor.linearize(sp.means)
        PHt = sp.covs @ np.swapaxes(Hj, 1, 2)
        S = symmetrize(Hj @ PHt + sensor.R)
        LS = cholesky(S)
        Sinv = _inv_from_chol(LS)
        K = PHt @ Sinv
        post_cov = symmetrize(sp.covs - K @ Hj @ sp.covs)
        nu = sensor.innovation(Z[:, None, :], zhat[None])  # (m, n, mdim)
        maha = np.einsum("mni,nij,mnj->mn", nu, Sinv, nu)
        if gate_prob is not None:
            inside = np.any(maha <= chi2.ppf(gate_prob, mdim), axis=1)
            Z, nu, maha = Z[inside], nu[inside], maha[inside]
            detect = Z.shape[0] > 0
    m = Z.shape[0]

    if detect:
        log_q = -0.5 * (mdim * LOG_2PI + _logdet_from_chol(LS)[None] + maha)
        log_c = sensor.log_clutter_pdf(Z)
        log_Lam = log_pd + logsumexp(log_alpha[None] + log_q, axis=1) - log_c
        log_scale = np.max(log_Lam)
        if not np.isfinite(log_scale):
            log_scale = 0.0
        x = np.exp(log_Lam - log_scale)
    else:
        # blind sensor or nothing to associate: every measurement is clutter
        log_scale = 0.0
        x = np.zeros(m)

    with np.errstate(divide="ignore"):
        log_e = np.log(_esf(x, min(m, n_max)))
    ups0 = _log_upsilon(log_e, m, 0, n_max, log_lam, log_scale, log_miss)
    ups1 = _log_upsilon(log_e, m, 1, n_max, log_lam, log_scale, log_miss)
    log_norm = logsumexp(ups0 + log_p)
    if not np.isfinite(log_norm):
        # the scan is impossible under the model; keep the prediction
        return predicted

    post_pmf = np.exp(ups0 + log_p - log_norm)
    post_pmf /= post_pmf.sum()

    log_missed_ratio = logsumexp(ups1 + log_p) - log_norm
    with np.errstate(invalid="ignore"):
        w_miss = np.exp(log_missed_ratio + log_miss + log_alpha)
    blocks_w = [np.nan_to_num(w_miss)]
    blocks_m = [sp.means]
    blocks_P = [sp.covs]
    if detect:
        with np.errstate(divide="ignore"):
            log_E = np.log(_esf_leave_one_out(x, min(m - 1, n_max)))
        ups1_loo = _log_upsilon(log_E, m - 1, 1, n_max, log_lam, log_scale, log_miss)  # (m, n_max+1)
        ratio = logsumexp(ups1_loo + log_p[None], axis=1) - log_norm
        log_w = log_pd + log_alpha[None] + log_q - log_c[:, None] + ratio[:, None]
        post_means = sp.means[None] + np.einsum("nij,mnj->mni", K, nu)
        d = sp.dim
        blocks_w.append(np.exp(log_w).reshape(-1))
        blocks_m.append(post_means.reshape(-1, d))
        blocks_P.append(np.broadcast_to(post_cov[None], (m,) + post_cov.shape).reshape(-1, d, d))

    w = np.concatenate(blocks_w)
    means = np.concatenate(blocks_m)
    covs = np.concatenate(blocks_P)
    total = w.sum()
    if total <= 0 or not np.isfinite(total):
        return IidClusterDensity(post_pmf, sp)
    spatial = GaussianMixture(w / total, means, covs)
    spatial = merge_prune(spatial, prune_thresh, merge_dist, max_components, normalize=True)
    return IidClusterDensity(post_pmf, spatial)


def extract_states(density: IidClusterDensity) -> list[np.ndarray]:
    """Means of the ``n_hat`` heaviest components, ``n_hat`` the PMF mode."""
    n_hat = density.map_cardinality
    if n_hat == 0 or len(density.spatial) == 0:
        return []
    order = np.argsort(-density.spatial.weights, kind="stable")[:n_hat]
    return [density.spatial.means[k].copy() for k in order]
