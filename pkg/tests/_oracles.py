"""Brute-force references shared by the unit and acceptance tests."""
import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gammaln
from scipy.stats import norm

from regtrack.cphd import IidClusterDensity
from regtrack.geometry import rot2, wrap_angle
from regtrack.gm import GaussianMixture
from regtrack.registration import build_irf


def set_integral_cost(pmfs, weights, means, variances, grid):
    """``-log`` of the set integral of the weighted geometric mean of 1-dim
    i.i.d. cluster densities, expanded over n with explicit n-fold grid
    integrals (n <= 2)."""
    h = grid[1] - grid[0]
    n_max = min(len(p) for p in pmfs) - 1
    if n_max > 2:
        raise ValueError("brute force is limited to n <= 2")
    # s_j(x)^w_j on the grid, one row per node
    log_s = np.array([w * norm.logpdf(grid, m, np.sqrt(v)) for w, m, v in zip(weights, means, variances)])
    total = 0.0
    for n in range(n_max + 1):
        log_coef = sum(w * (gammaln(n + 1) + np.log(p[n])) for p, w in zip(pmfs, weights)) - gammaln(n + 1)
        if n == 0:
            integral = 1.0
        elif n == 1:
            integral = trapezoid(np.exp(log_s.sum(axis=0)), dx=h)
        else:
            f = log_s.sum(axis=0)
            F = np.exp(f[:, None] + f[None, :])
            integral = trapezoid(trapezoid(F, dx=h, axis=1), dx=h)
        total += np.exp(log_coef) * integral
    return -np.log(total)


def irf_quadrature(own, neighbors, weights, thetas, gammas, half_width=None, n=801):
    """Grid quadrature of the overlap integral for 2-dim position-only mixtures.

    ``neighbors`` are in their own frames; frame ``j`` maps into the own
    frame by ``x = R(gamma_j) y + theta_j``.
    """
    centers = own.means
    spread = np.sqrt(max(np.max(np.linalg.eigvalsh(own.covs)), 1.0))
    lo = centers.min(axis=0) - 12 * spread if half_width is None else centers.mean(axis=0) - half_width
    hi = centers.max(axis=0) + 12 * spread if half_width is None else centers.mean(axis=0) + half_width
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    log_f = weights[0] * own.log_pdf(pts)
    for w, nb, th, g in zip(weights[1:], neighbors, thetas, gammas):
        local = (pts - th) @ rot2(g)  # R^T (x - theta) row-wise
        log_f = log_f + w * nb.log_pdf(local)
    F = np.exp(log_f).reshape(X.shape)
    return trapezoid(trapezoid(F, xs, axis=0), ys)


def noiseless_triplet_scene(rng, n_targets=3, gamma=None, drift=None, min_area=2.0e5):
    """Own positions, neighbour positions and the true (drift, gamma)."""
    while True:
        own = rng.uniform(-4000.0, 4000.0, size=(n_targets, 2))
        a, b, c = own[:3]
        area = 0.5 * abs((b - a)[0] * (c - a)[1] - (b - a)[1] * (c - a)[0])
        if area > min_area:
            break
    g = rng.uniform(-np.pi, np.pi) if gamma is None else gamma
    th = rng.uniform(-3000.0, 3000.0, size=2) if drift is None else np.asarray(drift, dtype=float)
    nb = (own - th) @ rot2(g)
    return own, nb, th, float(wrap_angle(g))


def density_from_positions(pos, vel=None, var=25.0, n_max=10):
    n = len(pos)
    means = np.zeros((n, 4))
    means[:, [0, 2]] = pos
    if vel is not None:
        means[:, [1, 3]] = vel
    P = np.tile(np.diag([var, 4.0, var, 4.0]), (n, 1, 1))
    return IidClusterDensity(np.full(n_max + 1, 1.0 / (n_max + 1)), GaussianMixture(np.full(n, 1.0 / n), means, P))


def procrustes_rotation(own, nb):
    """Closed-form least-squares rotation aligning ``nb`` onto ``own`` using
    differences from the first point."""
    zo = own[:, 0] + 1j * own[:, 1]
    zn = nb[:, 0] + 1j * nb[:, 1]
    u = np.sum((zo[0] - zo[1:]) * np.conj(zn[0] - zn[1:]))
    return float(np.angle(u))


def exact_triplet_irf(rng, gamma=None, drift=None):
    own, nb, th, g = noiseless_triplet_scene(rng, gamma=gamma, drift=drift)
    irf = build_irf([density_from_positions(own), density_from_positions(nb)], [0.5, 0.5])
    triplet = [0 * 3 + 0, 1 * 3 + 1, 2 * 3 + 2]
    return irf, triplet, own, nb, th, g
