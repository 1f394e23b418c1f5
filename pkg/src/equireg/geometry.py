"""Point clouds, transform sampling, scenario perturbations and error metrics.

Point clouds are plain ``(N, 3)`` float64 arrays.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .mathcore import RigidTransform, rotation_angle_deg

__all__ = [
    "RigidTransform", "Scenario", "PerturbationSpec", "RegistrationErrors",
    "EmptyBatch", "as_cloud", "apply", "euler_xyz", "sample_transform",
    "jitter", "crop_partial", "farthest_point_order", "registration_errors",
    "recall", "save_xyz", "load_xyz", "save_binary", "load_binary",
    "RECALL_MAX_ROT_DEG", "RECALL_MAX_TRANS",
]

RECALL_MAX_ROT_DEG = 5.0
RECALL_MAX_TRANS = 0.2

JITTER_SIGMA = 0.01
JITTER_CLIP = 0.05


class EmptyBatch(ValueError):
    pass


class Scenario(str, enum.Enum):
    CLEAN = "clean"
    NOISY = "noisy"
    INDEPENDENT = "independent"
    PARTIAL = "partial"


@dataclass(frozen=True)
class PerturbationSpec:
    max_angle_deg: float = 180.0
    max_translation: float = 0.5
    scenario: Scenario = Scenario.CLEAN
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.max_angle_deg <= 180.0:
            raise ValueError(f"max_angle_deg must lie in [0, 180], got {self.max_angle_deg}")
        if self.max_translation < 0:
            raise ValueError(f"max_translation must be >= 0, got {self.max_translation}")
        object.__setattr__(self, "scenario", Scenario(self.scenario))


@dataclass(frozen=True)
class RegistrationErrors:
    rot_err_deg: float
    trans_err: float


def as_cloud(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array, got shape {p.shape}")
    if len(p) < 3:
        raise ValueError(f"a point cloud needs at least 3 points, got {len(p)}")
    if not np.isfinite(p).all():
        raise ValueError("point cloud has non-finite coordinates")
    return p


def apply(t: RigidTransform, points) -> np.ndarray:
    return t.apply(points)


def euler_xyz(alpha, beta, gamma):
    """Rz(gamma) @ Ry(beta) @ Rx(alpha); angles in radians."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_transform(spec: PerturbationSpec, rng: np.random.Generator) -> RigidTransform:
    angles = np.radians(rng.uniform(0.0, spec.max_angle_deg, size=3))
    t = rng.uniform(-spec.max_translation, spec.max_translation, size=3)
    return RigidTransform(euler_xyz(*angles), t)


def jitter(points, rng: np.random.Generator, sigma=JITTER_SIGMA, clip=JITTER_CLIP) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    noise = np.clip(sigma * rng.standard_normal(points.shape), -clip, clip)
    return points + noise


def farthest_point_order(points, count, start: int) -> np.ndarray:
    """Indices of a greedy farthest-point traversal starting at ``start``."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    count = min(count, n)
    order = np.empty(count, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = start
    for i in range(count):
        order[i] = cur
        d = np.sum((points - points[cur]) ** 2, axis=1)
        np.minimum(dist, d, out=dist)
        cur = int(np.argmax(dist))
    return order


def crop_partial(points, keep_ratio, rng: np.random.Generator, method: str = "fps") -> np.ndarray:
    """Keep ``floor(keep_ratio * N)`` points.

    ``method="fps"`` runs a farthest-point traversal from a random seed point;
    ``method="halfspace"`` keeps the points farthest along a random direction.
    """
    points = np.asarray(points, dtype=np.float64)
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    n = len(points)
    count = int(np.floor(keep_ratio * n))
    if method == "fps":
        idx = farthest_point_order(points, count, int(rng.integers(n)))
    elif method == "halfspace":
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        proj = (points - points.mean(axis=0)) @ direction
        idx = np.sort(np.argsort(-proj, kind="stable")[:count])
    else:
        raise ValueError(f"unknown crop method {method!r}")
    return points[idx]


def registration_errors(gt: RigidTransform, est: RigidTransform) -> RegistrationErrors:
    rot = rotation_angle_deg(gt.rotation.T @ est.rotation)
    trans = float(np.linalg.norm(gt.translation - est.translation))
    return RegistrationErrors(rot, trans)


def recall(errors, max_rot_deg=RECALL_MAX_ROT_DEG, max_trans=RECALL_MAX_TRANS) -> float:
    errors = list(errors)
    if not errors:
        raise EmptyBatch("recall of an empty batch")
    ok = sum(1 for e in errors if e.rot_err_deg < max_rot_deg and e.trans_err < max_trans)
    return ok / len(errors)


# -- persistence ---------------------------------------------------------------

def save_xyz(path, points):
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.17g")


def load_xyz(path) -> np.ndarray:
    return as_cloud(np.loadtxt(path, dtype=np.float64, ndmin=2))


def save_binary(path, points):
    """u32 N followed by 3N little-endian float64 values."""
    p = np.ascontiguousarray(points, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(p)))
        fh.write(p.tobytes())


def load_binary(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise ValueError("truncated point file")
    (n,) = struct.unpack_from("<I", data)
    if len(data) != 4 + 24 * n:
        raise ValueError(f"point file size {len(data)} does not match N={n}")
    return np.frombuffer(data, dtype="<f8", offset=4).reshape(n, 3).astype(np.float64)
