"""Small dense linear algebra: 3x3 SVD, weighted Kabsch, rotation helpers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateConfiguration(ValueError):
    """Weighted covariance has rank < 2, so the rotation is not determined."""


_JACOBI_SWEEPS = 32


def _small_root(x):
    """Smaller-magnitude root of t² + 2xt − 1 = 0 (the Jacobi tangent)."""
    if x == 0.0:
        return 1.0
    ax = abs(x)
    if ax > 1e150:
        return 0.5 / x
    return np.sign(x) / (ax + np.sqrt(ax * ax + 1.0))


def _sym_eig3(a):
    """Cyclic Jacobi eigensolve of a symmetric 3x3 matrix."""
    a = np.array(a, dtype=np.float64)
    v = np.eye(3)
    scale = np.abs(a).max()
    if scale == 0.0:
        return np.zeros(3), v
    for _ in range(_JACOBI_SWEEPS):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= (1e-17 * scale) ** 2:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            with np.errstate(over="ignore"):
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = _small_root(theta)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    return np.diag(a).copy(), v


def _one_sided_sweep(b, v):
    """Hestenes rotations making the columns of b mutually orthogonal."""
    for _ in range(_JACOBI_SWEEPS):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            alpha = b[:, p] @ b[:, p]
            beta = b[:, q] @ b[:, q]
            gamma = b[:, p] @ b[:, q]
            if abs(gamma) <= 1e-16 * np.sqrt(alpha * beta) or gamma == 0.0:
                continue
            rotated = True
            with np.errstate(over="ignore"):  # ±inf is fine: _small_root(inf) -> 0
                zeta = (beta - alpha) / (2.0 * gamma)
            t = _small_root(zeta)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            bp, bq = b[:, p].copy(), b[:, q].copy()
            b[:, p], b[:, q] = c * bp - s * bq, s * bp + c * bq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    return b, v


def _complete_basis(u, n_good):
    """Orthonormal completion of the first ``n_good`` columns of u."""
    if n_good == 0:
        return np.eye(3)
    u0 = u[:, 0]
    if n_good == 1:
        e = np.eye(3)[np.argmin(np.abs(u0))]
        u1 = e - (u0 @ e) * u0
        u1 /= np.linalg.norm(u1)
    else:
        u1 = u[:, 1]
    u2 = np.cross(u0, u1)
    return np.column_stack([u0, u1, u2 / np.linalg.norm(u2)])


def svd3(m):
    """SVD of a 3x3 matrix: ``m == u @ diag(s) @ v.T`` with s descending, >= 0.

    The right singular vectors come from a Jacobi eigensolve of mᵀm; a
    one-sided Jacobi pass on m·v then restores the accuracy that squaring
    the matrix loses on small singular values. Rank-deficient inputs get an
    arbitrary orthonormal completion of u.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
    _, v = _sym_eig3(m.T @ m)
    b, v = _one_sided_sweep(m @ v, v)
    s = np.linalg.norm(b, axis=0)
    order = np.argsort(-s, kind="stable")
    s, b, v = s[order], b[:, order], v[:, order]
    smax = s[0]
    good = s > 1e-13 * smax if smax > 0 else np.zeros(3, dtype=bool)
    u = np.zeros((3, 3))
    u[:, good] = b[:, good] / s[good]
    if not good.all():
        u = _complete_basis(u, int(good.sum()))
        s = np.where(good, s, 0.0)
    return u, s, v


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("non-finite transform")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self):
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def is_rotation(self, tol=1e-9):
        r = self.rotation
        return bool(np.abs(r.T @ r - np.eye(3)).max() < tol and abs(np.linalg.det(r) - 1.0) < tol)


def weighted_kabsch(src, tgt, w=None, rank_tol: float = 1e-10) -> RigidTransform:
    """Rigid transform minimizing Σ w_i ‖R src_i + t − tgt_i‖².

    Raises DegenerateConfiguration when the weighted cross-covariance has
    rank < 2 (e.g. collinear points).
    """
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching Kx3 arrays, got {src.shape} and {tgt.shape}")
    k = len(src)
    w = np.ones(k) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != (k,) or not np.isfinite(w).all() or (w < 0).any():
        raise ValueError("weights must be finite, non-negative, one per point")
    if k < 3 or np.count_nonzero(w) < 3:
        raise DegenerateConfiguration("need at least 3 positively weighted points")
    w = w / w.sum()
    cs = w @ src
    ct = w @ tgt
    m = ((tgt - ct) * w[:, None]).T @ (src - cs)
    u, s, v = svd3(m)
    if s[0] == 0.0 or s[1] <= rank_tol * s[0]:
        raise DegenerateConfiguration(f"cross-covariance rank < 2 (singular values {s})")
    d = np.ones(3)
    if np.linalg.det(u @ v.T) < 0:
        d[2] = -1.0
    r = (u * d) @ v.T
    return RigidTransform(r, ct - r @ cs)


def axis_angle(axis, angle):
    """Rotation matrix about ``axis`` by ``angle`` radians (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def rotation_angle_deg(r):
    """Geodesic angle of a rotation matrix, in degrees.

    Equals arccos of the clamped (tr R − 1)/2, but atan2(sin, cos) keeps
    full precision near 0° where arccos loses about half the digits.
    """
    r = np.asarray(r, dtype=np.float64)
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def random_rotation(rng):
    """Haar-uniform rotation via a normalized random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])
