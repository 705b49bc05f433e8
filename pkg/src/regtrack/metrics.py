"""OSPA distance and registration error traces."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import wrap_angle

__all__ = ["OspaConfig", "ospa", "registration_errors"]


@dataclass(frozen=True)
class OspaConfig:
    p: float = 2.0
    c: float = 50.0

    def __post_init__(self):
        if not (1 <= self.p < np.inf):
            raise ValueError("OSPA order must be finite and >= 1")
        if not (0 < self.c < np.inf):
            raise ValueError("OSPA cutoff must be finite and positive")


def ospa(est, truth, cfg: OspaConfig = OspaConfig()) -> float:
    """OSPA distance between two finite point sets (rows are points)."""
    X = np.asarray(est, dtype=float).reshape(-1, np.shape(truth)[-1] if np.size(truth) else np.shape(est)[-1] if np.size(est) else 1)
    Y = np.asarray(truth, dtype=float).reshape(-1, X.shape[1])
    m, n = len(X), len(Y)
    if m == 0 and n == 0:
        return 0.0
    if m == 0 or n == 0:
        return float(cfg.c)
    D = np.minimum(np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1), cfg.c) ** cfg.p
    r, k = linear_sum_assignment(D)
    # exactly rounded sum: the value does not depend on argument order
    total = math.fsum(D[r, k].tolist() + [cfg.c ** cfg.p * abs(m - n)])
    return float((total / max(m, n)) ** (1.0 / cfg.p))


def registration_errors(est_drift, est_gamma, true_drift, true_gamma):
    """``(|drift - drift_hat|, wrap(gamma - gamma_hat))`` per edge (truth minus estimate)."""
    ed = np.asarray(est_drift, dtype=float).reshape(-1, 2)
    td = np.asarray(true_drift, dtype=float).reshape(-1, 2)
    if ed.shape != td.shape:
        raise ValueError("estimate and truth must cover the same edges")
    drift_err = np.linalg.norm(td - ed, axis=1)
    gamma_err = wrap_angle(np.asarray(true_gamma, dtype=float) - np.asarray(est_gamma, dtype=float))
    return drift_err, np.atleast_1d(gamma_err)
