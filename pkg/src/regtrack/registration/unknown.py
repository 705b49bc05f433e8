"""Joint drift and orientation estimation.

Initial points come from triplets of associations (three tracks seen by
every node of the neighbourhood): the rotation and translation that best
align the neighbour triangle with the own one. Local ascent on the IRF
then refines them, and a weighted hypothesis set accumulates the
instantaneous estimates over time.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from ..errors import RegistrationUnavailable
from ..geometry import wrap_angle
from .irf import IrfMixture

__all__ = [
    "TripletSystem",
    "TripletInit",
    "solve_triplet_system",
    "triplet_initial_point",
    "rank_triplets",
    "InstantEstimate",
    "instantaneous_estimate",
    "Hypothesis",
    "hypothesis_update",
    "DEFAULT_T_CAP",
    "DEFAULT_DELTA_THETA",
    "DEFAULT_DELTA_GAMMA",
    "DEFAULT_MAX_HYPOTHESES",
]

DEFAULT_T_CAP = 200
DEFAULT_DELTA_THETA = 50.0
DEFAULT_DELTA_GAMMA = np.deg2rad(5.0)
DEFAULT_MAX_HYPOTHESES = 20
GRID_SIZE = 720
NEWTON_TOL = 1e-10
AMBIGUITY_TOL = 1e-6


def _rot_block(p):
    """``[[xi, -eta], [eta, xi]]`` so that ``block @ [cos g, sin g] = R(g) p``."""
    return np.array([[p[0], -p[1]], [p[1], p[0]]])


@dataclass(frozen=True)
class TripletSystem:
    """Least-squares system ``min ||A w - b||, ||w|| = 1`` for one neighbour."""

    A: np.ndarray
    b: np.ndarray
    varpi: np.ndarray
    residual: float


def _objective(A, b, g):
    v = np.array([np.cos(g), np.sin(g)])
    r = A @ v - b
    return float(r @ r)


def solve_triplet_system(A, b) -> TripletSystem:
    """Grid search over the angle followed by Newton refinement."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    grid = np.linspace(-np.pi, np.pi, GRID_SIZE, endpoint=False)
    V = np.stack([np.cos(grid), np.sin(grid)])
    R = A @ V - b[:, None]
    g = float(grid[np.argmin(np.sum(R * R, axis=0))])
    for _ in range(50):
        v = np.array([np.cos(g), np.sin(g)])
        dv = np.array([-v[1], v[0]])
        r = A @ v - b
        d1 = 2.0 * r @ (A @ dv)
        d2 = 2.0 * ((A @ dv) @ (A @ dv) - r @ (A @ v))
        if d2 <= 0:
            break
        step = -d1 / d2
        g += step
        if abs(step) < NEWTON_TOL:
            break
    g = float(wrap_angle(g))
    return TripletSystem(A, b, np.array([np.cos(g), np.sin(g)]), _objective(A, b, g))


@dataclass(frozen=True)
class TripletInit:
    drift: np.ndarray
    gamma: np.ndarray
    ambiguous: bool
    systems: list = field(default_factory=list)
    cyclic_residuals: np.ndarray = None


def _cyclic_minima(own, nbr):
    """Closed-form residual minima for the three cyclic relabellings of ``nbr``."""
    out = []
    for s in range(3):
        q = np.roll(nbr, -s, axis=0)
        A = np.vstack([_rot_block(q[0]) - _rot_block(q[1]), _rot_block(q[0]) - _rot_block(q[2])])
        b = np.concatenate([own[0] - own[1], own[0] - own[2]])
        u = A.T @ b
        out.append(b @ b + np.trace(A.T @ A) / 2.0 - 2.0 * np.linalg.norm(u))
    return np.array(out)


def triplet_initial_point(irf: IrfMixture, triplet) -> TripletInit:
    """Initial drifts and orientations from three associations.

    ``triplet`` holds three row indices into ``irf.assoc``. Per neighbour
    the rotation solves ``(A_1 - A_m) w = b_1 - b_m`` (``m = 2, 3``) in the
    least-squares sense and the drift is the mean residual translation.
    """
    triplet = [int(k) for k in triplet]
    if len(set(triplet)) != 3:
        raise ValueError("a triplet needs three distinct associations")
    rows = irf.assoc[triplet]
    own_pos, nb_pos = irf.positions()
    own = own_pos[rows[:, 0]]
    drift = np.zeros((irf.m, 2))
    gamma = np.zeros(irf.m)
    systems, cyc = [], []
    ambiguous = False
    for j in range(irf.m):
        q = nb_pos[j][rows[:, j + 1]]
        blocks = [_rot_block(p) for p in q]
        A = np.vstack([blocks[0] - blocks[1], blocks[0] - blocks[2]])
        b = np.concatenate([own[0] - own[1], own[0] - own[2]])
        sysj = solve_triplet_system(A, b)
        systems.append(sysj)
        gamma[j] = np.arctan2(sysj.varpi[1], sysj.varpi[0])
        drift[j] = np.mean([own[k] - blocks[k] @ sysj.varpi for k in range(3)], axis=0)
        scale = np.trace(A.T @ A) / 2.0
        res = _cyclic_minima(own, q)
        cyc.append(res)
        tol = AMBIGUITY_TOL * max(1.0, b @ b + scale)
        if scale <= 1e-12 * max(1.0, b @ b) or np.sum(res - res.min() <= tol) > 1:
            ambiguous = True
    return TripletInit(drift, gamma, ambiguous, systems, np.array(cyc))


def rank_triplets(irf: IrfMixture, t_cap: int = DEFAULT_T_CAP, per_neighbor: int = 2):
    """Triplets of associations ranked by how well the triangles align.

    Returns ``(triplets, scores, gammas, drifts)``; ``triplets`` is
    ``(T, 3)`` rows of ``irf.assoc``. The score is the rigid-alignment
    residual normalized by the triangle sizes (0 for congruent triangles).
    """
    own_pos, nb_pos = irf.positions()
    if len(own_pos) < 3 or any(len(p) < 3 for p in nb_pos):
        raise RegistrationUnavailable("every node needs at least three tracks")
    zo = own_pos[:, 0] + 1j * own_pos[:, 1]
    own_tri = np.array(list(itertools.combinations(range(len(zo)), 3)))
    do = zo[own_tri[:, [0]]] - zo[own_tri[:, 1:]]
    so = np.sum(np.abs(do) ** 2, axis=1)
    per_j = []
    for j, p in enumerate(nb_pos):
        zn = p[:, 0] + 1j * p[:, 1]
        nb_tri = np.array(list(itertools.permutations(range(len(zn)), 3)))
        dn = zn[nb_tri[:, [0]]] - zn[nb_tri[:, 1:]]
        sn = np.sum(np.abs(dn) ** 2, axis=1)
        cross = do @ np.conj(dn).T
        denom = so[:, None] + sn[None, :]
        score = (so[:, None] + sn[None, :] - 2.0 * np.abs(cross)) / np.maximum(denom, 1e-300)
        k = min(per_neighbor, len(nb_tri))
        best = np.argsort(score, axis=1, kind="stable")[:, :k]
        rot = cross / np.maximum(np.abs(cross), 1e-300)
        per_j.append((nb_tri, best, score, rot, zn))
    sizes = [len(own_pos)] + [len(p) for p in nb_pos]
    trip, scores, gams, drifts = [], [], [], []
    for t, tri in enumerate(own_tri):
        choices = [pj[1][t] for pj in per_j]
        for combo in itertools.product(*choices):
            rows = np.empty((3, irf.m + 1), dtype=int)
            rows[:, 0] = tri
            s = 0.0
            g = np.zeros(irf.m)
            dr = np.zeros((irf.m, 2))
            for j, c in enumerate(combo):
                nb_tri, _, score, rot, zn = per_j[j]
                rows[:, j + 1] = nb_tri[c]
                s += score[t, c]
                e = rot[t, c]
                g[j] = np.angle(e)
                shift = np.mean(zo[tri] - e * zn[nb_tri[c]])
                dr[j] = [shift.real, shift.imag]
            trip.append(np.ravel_multi_index(rows.T, sizes))
            scores.append(s)
            gams.append(g)
            drifts.append(dr)
    order = np.argsort(scores, kind="stable")[:t_cap]
    return (
        np.array(trip)[order],
        np.array(scores)[order],
        np.array(gams)[order],
        np.array(drifts)[order],
    )


@dataclass(frozen=True)
class InstantEstimate:
    drift: np.ndarray
    gamma: np.ndarray
    reward: float
    log_reward: float
    initial_points: list = field(default_factory=list)


def _close(d1, g1, d2, g2, delta_theta, delta_gamma):
    m = len(g1)
    return (
        np.linalg.norm(np.asarray(d1) - np.asarray(d2)) <= delta_theta * np.sqrt(m)
        and np.linalg.norm(wrap_angle(np.asarray(g1) - np.asarray(g2))) <= delta_gamma * np.sqrt(m)
    )


def _active_set(irf, drift, gamma, span=30.0, cap=128):
    lt = irf.log_terms(irf.lift_drift(drift), gamma)
    top = np.max(lt)
    if not np.isfinite(top):
        return None
    idx = np.flatnonzero(lt >= top - span)
    if len(idx) > cap:
        idx = idx[np.argsort(-lt[idx], kind="stable")[:cap]]
    return np.sort(idx)


def _profile(irf, drifts, gammas, idx, max_iter=30):
    """Drift modes at fixed orientations for a batch of parameter sets.

    Mean-shift steps ``drift += (sum rho H)^-1 grad`` increase the mixture
    value monotonically. Returns drifts, log values and orientation
    gradients (envelope theorem) at the modes.
    """
    drifts = np.array(drifts, dtype=float)
    for _ in range(max_iter):
        f, gd, gg, H = irf.drift_derivatives(drifts, gammas, idx)
        ok = np.isfinite(f)
        if not ok.any():
            break
        step = np.zeros_like(gd.reshape(len(f), -1))
        step[ok] = np.linalg.solve(H[ok], gd[ok].reshape(ok.sum(), -1)[..., None])[..., 0]
        step = step.reshape(drifts.shape)
        drifts = drifts + step
        size = np.abs(step).reshape(len(f), -1).max(axis=1)
        if np.all(size <= 1e-9 * (1.0 + np.abs(drifts).reshape(len(f), -1).max(axis=1))):
            break
    f, _, gg, _ = irf.drift_derivatives(drifts, gammas, idx, curvature=False)
    return drifts, f, gg


_STEPS = 0.5 ** np.arange(8)


def _gamma_step(irf, drift, gamma, f, g, idx, h=1e-6, max_step=0.3):
    """Newton step on the profile ``max_drift log W`` over all orientations.

    The Hessian comes from central differences of the analytic profile
    gradient; a non-concave Hessian falls back to a short gradient step.
    The line search evaluates all candidate step lengths in one batch.
    """
    m = irf.m
    E = np.eye(m) * h
    pts = np.concatenate([gamma + E, gamma - E])
    _, _, gpm = _profile(irf, np.repeat(drift[None], 2 * m, axis=0), pts, idx)
    H = (gpm[:m] - gpm[m:]).T / (2 * h)
    H = 0.5 * (H + H.T)
    if np.all(np.isfinite(H)) and np.linalg.eigvalsh(H).max() < 0:
        step = -np.linalg.solve(H, g)
    else:
        step = 0.05 * g / max(np.linalg.norm(g), 1e-300)
    step *= min(1.0, max_step / max(np.abs(step).max(), 1e-300))
    cands = wrap_angle(gamma[None] + _STEPS[:, None] * step[None])
    dc, fc, gc = _profile(irf, np.repeat(drift[None], len(_STEPS), axis=0), cands, idx)
    good = np.flatnonzero(fc >= f)
    if len(good) == 0:
        return drift, gamma, f, g, 0.0
    k = good[0]
    return dc[k], cands[k], fc[k], gc[k], float(np.abs(_STEPS[k] * step).max())


def _joint_newton(irf, drift, gamma, idx, max_iter=20, h_d=1e-4, h_g=1e-7):
    """Newton ascent on ``log W`` jointly over drifts and orientations.

    The Hessian is a central difference of the analytic gradient, all
    perturbations in one batch. Stops early (returning ``concave=False``)
    as soon as the Hessian is not negative definite.
    """
    m = irf.m
    n = 3 * m
    d = np.asarray(drift, dtype=float).reshape(m, 2)
    g = np.asarray(gamma, dtype=float).reshape(m)
    f, gd, gg, _ = irf.drift_derivatives(d, g, idx, curvature=False)
    if gd is None:
        return d, g, f, False
    grad = np.concatenate([gd.ravel(), gg])
    hs = np.concatenate([np.full(2 * m, h_d), np.full(m, h_g)])
    E = np.diag(hs)
    for _ in range(max_iter):
        x = np.concatenate([d.ravel(), g])
        pts = np.concatenate([x + E, x - E])
        _, gdp, ggp, _ = irf.drift_derivatives(pts[:, : 2 * m].reshape(-1, m, 2), pts[:, 2 * m :], idx, curvature=False)
        gp = np.concatenate([gdp.reshape(2 * n, -1), ggp], axis=1)
        H = (gp[:n] - gp[n:]).T / (2 * hs[None, :])
        H = 0.5 * (H + H.T)
        if not np.all(np.isfinite(H)) or np.linalg.eigvalsh(H).max() >= 0:
            return d, g, f, False
        step = -np.linalg.solve(H, grad)
        cands = x[None] + _STEPS[:, None] * step[None]
        fc, gdc, ggc, _ = irf.drift_derivatives(cands[:, : 2 * m].reshape(-1, m, 2), cands[:, 2 * m :], idx, curvature=False)
        good = np.flatnonzero(fc >= f)
        if len(good) == 0:
            break
        k = good[0]
        gain = fc[k] - f
        d, g, f = cands[k, : 2 * m].reshape(m, 2), wrap_angle(cands[k, 2 * m :]), float(fc[k])
        grad = np.concatenate([gdc[k].ravel(), ggc[k]])
        moved = _STEPS[k] * step
        if (np.abs(moved[: 2 * m]).max() <= 1e-7 and np.abs(moved[2 * m :]).max() <= 1e-10) or gain <= 1e-13 * (1.0 + abs(f)):
            break
    return d, g, f, True


def ascend(irf: IrfMixture, drift, gamma, idx=None, max_iter: int = 50, retry_every: int = 3):
    """Ascent on ``W`` over drifts and orientations.

    Joint Newton steps are used while ``log W`` is locally concave. Otherwise
    the drift is re-solved as the mixture mode at fixed orientations, and
    the orientations take Newton steps on that profile.
    """
    d, gamma, f, concave = _joint_newton(irf, drift, gamma, idx)
    if concave or not np.isfinite(f):
        return d, gamma, float(f)
    dp, fp, g = _profile(irf, d[None], gamma[None], idx)
    d, f, g = dp[0], fp[0], g[0]
    if not np.isfinite(f):
        return d, gamma, float(f)
    for it in range(1, max_iter + 1):
        d, gamma, f_new, g, moved = _gamma_step(irf, d, gamma, f, g, idx)
        gain = f_new - f
        f = f_new
        if moved <= 1e-10 or (gain <= 1e-13 * (1.0 + abs(f)) and moved <= 1e-8):
            break
        if it % retry_every == 0:
            # back in a concave region the joint steps converge much faster
            d, gamma, f, concave = _joint_newton(irf, d, gamma, idx)
            if concave:
                break
            dp, fp, g = _profile(irf, d[None], gamma[None], idx)
            d, f, g = dp[0], fp[0], g[0]
    return d, gamma, float(f)


def instantaneous_estimate(
    irf: IrfMixture,
    t_cap: int = DEFAULT_T_CAP,
    n_starts: int = 3,
    warm_starts=(),
    delta_theta: float = DEFAULT_DELTA_THETA,
    delta_gamma: float = DEFAULT_DELTA_GAMMA,
) -> InstantEstimate:
    """Maximize the IRF jointly over drifts and orientations.

    Triplet initial points are taken in ranking order, skipping those within
    the hypothesis gates of an already selected one, until ``n_starts``
    distinct starts exist. ``warm_starts`` (``(drift, gamma)`` pairs) are
    added. Every start is refined by :func:`ascend` on the associations
    that matter near it, and the reward is the full IRF at the result.
    """
    if irf.n_associations < 3:
        raise RegistrationUnavailable("fewer than three associations")
    starts = []
    triplets, gams, drifts = (), None, None
    if n_starts > 0:
        triplets, _, gams, drifts = rank_triplets(irf, t_cap)
    for k in range(len(triplets)):
        if any(_close(drifts[k], gams[k], d, g, delta_theta, delta_gamma) for d, g in starts):
            continue
        init = triplet_initial_point(irf, triplets[k])
        starts.append((init.drift, init.gamma))
        if len(starts) >= n_starts:
            break
    if not starts and not len(warm_starts):
        raise ValueError("no initial point: n_starts is 0 and no warm start was given")
    for d, g in warm_starts:
        starts.append((np.asarray(d, dtype=float).reshape(irf.m, 2), np.asarray(g, dtype=float).reshape(irf.m)))
    best = None
    inits = [(d0, g0, irf.drift_log_value(d0, g0)) for d0, g0 in starts]
    for k in np.argsort([-f0 for _, _, f0 in inits], kind="stable"):
        d0, g0, f0 = inits[k]
        idx = _active_set(irf, d0, g0)
        if idx is None:
            continue
        d, g, _ = ascend(irf, d0, g0, idx)
        f = irf.drift_log_value(d, g)
        if f < f0:
            d, g, f = d0, g0, f0
        if best is None or f > best[2]:
            best = (d, g, f)
    if best is None:
        raise RegistrationUnavailable("the IRF vanishes at every initial point")
    d, g, f = best
    return InstantEstimate(d, wrap_angle(g), float(np.exp(f)), float(f), inits)


@dataclass(frozen=True)
class Hypothesis:
    drift: np.ndarray
    gamma: np.ndarray
    kappa: float


def hypothesis_update(
    hypotheses,
    estimate,
    delta_theta: float = DEFAULT_DELTA_THETA,
    delta_gamma: float = DEFAULT_DELTA_GAMMA,
    max_hypotheses: int = DEFAULT_MAX_HYPOTHESES,
):
    """Fold ``estimate = (drift, gamma, reward)`` into the hypothesis set.

    Gates scale with the square root of the neighbour count (stacked norms).
    Returns ``(new list, best hypothesis)``.
    """
    drift, gamma, reward = estimate
    drift = np.asarray(drift, dtype=float)
    gamma = wrap_angle(np.asarray(gamma, dtype=float))
    reward = float(reward)
    if reward < 0 or not np.isfinite(reward):
        raise ValueError("reward must be finite and nonnegative")
    out = []
    matched = False
    for h in hypotheses:
        if _close(drift, gamma, h.drift, h.gamma, delta_theta, delta_gamma):
            matched = True
            total = h.kappa + reward
            kw = reward / total if total > 0 else 0.0
            nd = kw * drift + (1.0 - kw) * h.drift
            ng = wrap_angle(h.gamma + kw * wrap_angle(gamma - h.gamma))
            out.append(Hypothesis(nd, ng, total))
        else:
            out.append(h)
    if not matched:
        out.append(Hypothesis(drift.copy(), gamma.copy(), reward))
    if len(out) > max_hypotheses:
        drop = int(np.argmin([h.kappa for h in out]))
        out.pop(drop)
    best = out[int(np.argmax([h.kappa for h in out]))]
    return out, best
