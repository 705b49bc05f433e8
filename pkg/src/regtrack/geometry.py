"""Angles, planar rotations and the position-lifting matrix.

State layout everywhere is ``[xi, xi_dot, eta, eta_dot]``.
"""
import numpy as np

# lifts a 2-dim drift into the 4-dim state (positions only)
T_LIFT = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
POS_IDX = np.array([0, 2])

# dM/dgamma = M(gamma) @ _GEN
_GEN = np.array(
    [
        [0.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, 0.0, -1.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
    ]
)
_GEN2 = np.array([[0.0, -1.0], [1.0, 0.0]])


def wrap_angle(a):
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(a, dtype=float) + np.pi) % (2.0 * np.pi) - np.pi


def rot2(gamma: float) -> np.ndarray:
    c, s = np.cos(gamma), np.sin(gamma)
    return np.array([[c, -s], [s, c]])


def rotation_matrix(gamma: float) -> np.ndarray:
    """4x4 rotation acting jointly on position and velocity pairs."""
    c, s = np.cos(gamma), np.sin(gamma)
    return np.array(
        [
            [c, 0.0, -s, 0.0],
            [0.0, c, 0.0, -s],
            [s, 0.0, c, 0.0],
            [0.0, s, 0.0, c],
        ]
    )


def rotation_matrix_deriv(gamma: float) -> np.ndarray:
    return rotation_matrix(gamma) @ _GEN


def lift(drift) -> np.ndarray:
    return T_LIFT @ np.asarray(drift, dtype=float)


def position_index(dim: int) -> np.ndarray:
    """Indices of the planar position inside a state of size ``dim``."""
    if dim == 4:
        return POS_IDX
    if dim == 2:
        return np.array([0, 1])
    raise ValueError("state dimension must be 2 (position only) or 4")


def rotation_for_dim(dim: int, gamma: float) -> np.ndarray:
    return rotation_matrix(gamma) if dim == 4 else rot2(gamma)


def rotation_deriv_for_dim(dim: int, gamma: float) -> np.ndarray:
    return rotation_matrix(gamma) @ _GEN if dim == 4 else rot2(gamma) @ _GEN2
