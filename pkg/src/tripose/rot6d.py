"""Continuous 6DoF rotation representation.

A 6DoF vector stacks the first two columns of a rotation matrix:
[R11, R21, R31, R12, R22, R32]. All functions broadcast over leading axes.
"""

from __future__ import annotations

import numpy as np

DEGENERATE_EPS = 1e-8


class DegenerateRotationError(ValueError):
    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


def _norm(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=-1))


def _gram_schmidt(r: np.ndarray) -> tuple[np.ndarray, ...]:
    x = r[..., 0:3]
    y = r[..., 3:6]
    n1 = _norm(x)
    bad = n1 < DEGENERATE_EPS
    c1 = x / np.where(bad, 1.0, n1)[..., None]
    p = y - np.sum(c1 * y, axis=-1, keepdims=True) * c1
    n2 = _norm(p)
    bad = bad | (n2 < DEGENERATE_EPS)
    c2 = p / np.where(n2 < DEGENERATE_EPS, 1.0, n2)[..., None]
    return c1, c2, p, n1, n2, bad


def _raise_degenerate(bad: np.ndarray, what: str = "entry") -> None:
    index = tuple(int(i) for i in np.argwhere(bad)[0])
    if len(index) == 0:
        raise DegenerateRotationError("degenerate 6DoF representation", index)
    raise DegenerateRotationError(
        f"degenerate 6DoF representation at {what} {index if len(index) > 1 else index[0]}",
        index,
    )


def to_sixdof(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def from_sixdof(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got shape {r.shape}")
    c1, c2, _, _, _, bad = _gram_schmidt(r)
    if np.any(bad):
        _raise_degenerate(bad)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def batch_from_sixdof(rs: np.ndarray) -> np.ndarray:
    """Map a (..., joints, 6) array to (..., joints, 3, 3) rotation matrices.

    Degenerate inputs raise with the offending joint index (and leading indices).
    """
    rs = np.asarray(rs, dtype=np.float64)
    if rs.ndim < 2 or rs.shape[-1] != 6:
        raise ValueError(f"expected (..., joints, 6), got shape {rs.shape}")
    c1, c2, _, _, _, bad = _gram_schmidt(rs)
    if np.any(bad):
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        joint = index[-1]
        where = f"joint {joint}" if len(index) == 1 else f"joint {joint} (index {index})"
        raise DegenerateRotationError(f"degenerate 6DoF representation at {where}", index)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def project_sixdof(r: np.ndarray) -> np.ndarray:
    return to_sixdof(from_sixdof(r))


def hypothesis_deviation(r: np.ndarray) -> np.ndarray:
    """Distance of r from the unit-norm, orthogonal-halves constraint set."""
    r = np.asarray(r, dtype=np.float64)
    a = r[..., 0:3]
    b = r[..., 3:6]
    return np.maximum.reduce(
        [np.abs(_norm(a) - 1.0), np.abs(_norm(b) - 1.0), np.abs(np.sum(a * b, axis=-1))]
    )


def vjp_from_sixdof(r: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Pull a cotangent on vec(from_sixdof(r)) back to r.

    The cotangent is given on the row-major vectorisation of R, either as (..., 9) or
    (..., 3, 3). Returns (..., 6).
    """
    r = np.asarray(r, dtype=np.float64)
    G = np.asarray(cotangent, dtype=np.float64)
    if G.shape[-1] == 9:
        G = G.reshape(G.shape[:-1] + (3, 3))
    c1, c2, p, n1, n2, bad = _gram_schmidt(r)
    if np.any(bad):
        _raise_degenerate(bad)
    y = r[..., 3:6]
    G1 = G[..., :, 0]
    G2 = G[..., :, 1]
    G3 = G[..., :, 2]

    def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.sum(a * b, axis=-1, keepdims=True)

    # c3 = c1 x c2
    g_c1 = G1 + np.cross(c2, G3)
    g_c2 = G2 + np.cross(G3, c1)
    # c2 = p / |p|
    g_p = (g_c2 - dot(c2, g_c2) * c2) / n2[..., None]
    # p = y - <c1, y> c1
    g_y = g_p - dot(c1, g_p) * c1
    g_c1 = g_c1 - dot(c1, y) * g_p - dot(c1, g_p) * y
    # c1 = x / |x|
    g_x = (g_c1 - dot(c1, g_c1) * c1) / n1[..., None]
    return np.concatenate([g_x, g_y], axis=-1)


def jacobian_from_sixdof(r: np.ndarray) -> np.ndarray:
    """Dense 9x6 Jacobian of row-major vec(from_sixdof(r)) for a single r."""
    r = np.asarray(r, dtype=np.float64).reshape(6)
    basis = np.eye(9)
    return np.stack([vjp_from_sixdof(r, basis[k]) for k in range(9)])


def geodesic_angle(R1: np.ndarray, R2: np.ndarray) -> np.ndarray:
    """Rotation angle of R1^T R2 in degrees, in [0, 180]."""
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    Q = np.einsum("...ki,...kj->...ij", R1, R2)
    # |axial part| = 2 sin(theta), trace - 1 = 2 cos(theta)
    axial = np.stack(
        [
            Q[..., 2, 1] - Q[..., 1, 2],
            Q[..., 0, 2] - Q[..., 2, 0],
            Q[..., 1, 0] - Q[..., 0, 1],
        ],
        axis=-1,
    )
    trace = Q[..., 0, 0] + Q[..., 1, 1] + Q[..., 2, 2]
    return np.degrees(np.arctan2(np.linalg.norm(axial, axis=-1), trace - 1.0))


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    eye = np.eye(3)
    gram = np.einsum("...ki,...kj->...ij", R, R)
    if np.max(np.abs(gram - eye), initial=0.0) > tol:
        return False
    return bool(np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))


def rotation_about_axis(axis: str, degrees: float) -> np.ndarray:
    theta = np.radians(degrees)
    c, s = np.cos(theta), np.sin(theta)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"unknown axis: {axis}")
