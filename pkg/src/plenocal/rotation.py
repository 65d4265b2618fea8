"""Rodrigues axis-angle rotations and their exact derivatives."""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-10


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues_matrix(rvec: np.ndarray) -> np.ndarray:
    """Expand a Rodrigues vector (axis * angle, radians) to a rotation matrix."""
    rvec = np.asarray(rvec, dtype=float).reshape(3)
    theta = float(np.linalg.norm(rvec))
    if theta < _SMALL_ANGLE:
        return np.eye(3) + skew(rvec)
    k = rvec / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rodrigues_vector(R: np.ndarray) -> np.ndarray:
    """Log map: rotation matrix to Rodrigues vector (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < _SMALL_ANGLE:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part is ill conditioned; use the symmetric part
        A = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs from the off-diagonals relative to the largest component
        m = int(np.argmax(axis))
        for i in range(3):
            if i != m and A[m, i] < 0:
                axis[i] = -axis[i]
        axis /= np.linalg.norm(axis)
        return axis * theta
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return axis * (theta / (2.0 * np.sin(theta)))


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Polar projection of a 3x3 matrix onto the orthogonal group.

    Returns U @ Vt without any determinant fix-up, so a reflection in the
    input stays a reflection in the output and can be detected by the caller.
    """
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    return U @ Vt


def rotate_points_jacobian(rvec: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Derivative of R(rvec) @ p with respect to rvec, for a batch of points.

    Parameters
    ----------
    rvec : (3,) Rodrigues vector.
    points : (N, 3) points being rotated.

    Returns
    -------
    (N, 3, 3) array G with G[n, a, b] = d(R p_n)_a / d rvec_b.
    """
    rvec = np.asarray(rvec, dtype=float).reshape(3)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    theta = float(np.linalg.norm(rvec))
    if theta < _SMALL_ANGLE:
        # limit of the exact formula: d(Rp)/dv -> -[p]x
        G = np.zeros((n, 3, 3))
        G[:, 0, 1] = pts[:, 2]
        G[:, 0, 2] = -pts[:, 1]
        G[:, 1, 0] = -pts[:, 2]
        G[:, 1, 2] = pts[:, 0]
        G[:, 2, 0] = pts[:, 1]
        G[:, 2, 1] = -pts[:, 0]
        return G

    k = rvec / theta
    s, c = np.sin(theta), np.cos(theta)
    kp = pts @ k                                   # (N,) k . p
    kxp = np.cross(np.broadcast_to(k, pts.shape), pts)  # (N, 3) k x p

    # d(Rp) = A dtheta + B dk, with dtheta = k^T dv, dk = (I - kk^T)/theta dv
    A = -pts * s + kxp * c + (k[None, :] * kp[:, None]) * s          # (N, 3)
    B = np.empty((n, 3, 3))
    # B = -s [p]x + (1-c) ((k.p) I + k p^T)
    B[:, 0, 0] = 0.0
    B[:, 0, 1] = s * pts[:, 2]
    B[:, 0, 2] = -s * pts[:, 1]
    B[:, 1, 0] = -s * pts[:, 2]
    B[:, 1, 1] = 0.0
    B[:, 1, 2] = s * pts[:, 0]
    B[:, 2, 0] = s * pts[:, 1]
    B[:, 2, 1] = -s * pts[:, 0]
    B[:, 2, 2] = 0.0
    B += (1.0 - c) * (kp[:, None, None] * np.eye(3)[None, :, :]
                      + k[None, :, None] * pts[:, None, :])
    proj = (np.eye(3) - np.outer(k, k)) / theta
    return A[:, :, None] * k[None, None, :] + B @ proj
