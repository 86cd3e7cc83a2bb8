"""Small SO(3) helpers shared by the kinematics, fitting and simulation code.

The ``*_nb`` variants are numba kernels used inside compiled loops; the plain
functions accept numpy arrays and are what the rest of the package calls.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def rot_nb(k, theta):
    # Rodrigues for a unit axis k
    c = np.cos(theta)
    s = np.sin(theta)
    v = 1.0 - c
    x, y, z = k[0], k[1], k[2]
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * v
    R[0, 1] = x * y * v - z * s
    R[0, 2] = x * z * v + y * s
    R[1, 0] = y * x * v + z * s
    R[1, 1] = c + y * y * v
    R[1, 2] = y * z * v - x * s
    R[2, 0] = z * x * v - y * s
    R[2, 1] = z * y * v + x * s
    R[2, 2] = c + z * z * v
    return R


@njit(cache=True)
def cross_nb(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def rotvec_nb(R):
    """Rotation vector (axis * angle) of a rotation matrix."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    c = 0.5 * (tr - 1.0)
    if c > 1.0:
        c = 1.0
    if c < -1.0:
        c = -1.0
    theta = np.arccos(c)
    w = np.empty(3)
    w[0] = R[2, 1] - R[1, 2]
    w[1] = R[0, 2] - R[2, 0]
    w[2] = R[1, 0] - R[0, 1]
    if theta < 1e-6:
        return 0.5 * w
    if theta > np.pi - 1e-4:
        # near pi the antisymmetric part vanishes; use the symmetric part
        B = 0.5 * (R + np.eye(3))
        i = 0
        if B[1, 1] > B[i, i]:
            i = 1
        if B[2, 2] > B[i, i]:
            i = 2
        k = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
        k = k / np.sqrt(k[0] ** 2 + k[1] ** 2 + k[2] ** 2)
        if k[0] * w[0] + k[1] * w[1] + k[2] * w[2] < 0.0:
            k = -k
        return theta * k
    return theta / (2.0 * np.sin(theta)) * w


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rot(axis, theta):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.eye(3)
    return rot_nb(axis / n, float(theta))


def exp_so3(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-15:
        return np.eye(3) + skew(w)
    return rot_nb(w / theta, theta)


def log_so3(R):
    return rotvec_nb(np.ascontiguousarray(R, dtype=float))


def angle_between(a, b):
    """Angle between vectors along the last axis, robust near 0 and pi."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.linalg.norm(np.cross(a, b), axis=-1)
    d = np.sum(a * b, axis=-1)
    return np.arctan2(c, d)


def rot_between(a, b):
    """Smallest rotation taking unit vector a onto unit vector b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    ang = np.arctan2(s, float(a @ b))
    if s < 1e-14:
        if ang < 1.0:
            return np.eye(3)
        # antiparallel: any perpendicular axis
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-8:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return rot(perp, np.pi)
    return rot_nb(axis / s, ang)


def rpy_to_R(rpy):
    """URDF convention: R = Rz(yaw) Ry(pitch) Rx(roll)."""
    r, p, y = rpy
    return rot([0, 0, 1], y) @ rot([0, 1, 0], p) @ rot([1, 0, 0], r)


def orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out
