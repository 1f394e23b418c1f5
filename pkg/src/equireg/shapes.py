"""Procedural watertight shapes built from SDF primitives.

A shape is a left fold over primitives: the first node is a union, later
nodes are unioned (``min``) or subtracted (``max(a, -b)``). Signed distances
are exact per primitive, so occupancy needs no meshing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mathcore import random_rotation

KINDS = ("sphere", "box", "capsule", "cylinder")
OPS = ("union", "difference")
_SIZE_ARITY = {"sphere": 1, "box": 3, "capsule": 2, "cylinder": 2}

SURFACE_TOL = 1e-10
QUERY_BOX = 1.1
QUERY_BAND = 0.05


@dataclass(frozen=True)
class Primitive:
    """``size``: sphere (r,), box half-extents (a, b, c), capsule and
    cylinder (radius, half-height) along the local z axis."""

    kind: str
    rotation: tuple
    center: tuple
    size: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive {self.kind!r}")
        r = np.asarray(self.rotation, dtype=np.float64).reshape(9)
        object.__setattr__(self, "rotation", tuple(float(x) for x in r))
        object.__setattr__(self, "center", tuple(float(x) for x in np.reshape(self.center, 3)))
        size = tuple(float(x) for x in np.atleast_1d(self.size))
        if len(size) != _SIZE_ARITY[self.kind] or min(size) <= 0:
            raise ValueError(f"bad size {size} for {self.kind}")
        object.__setattr__(self, "size", size)

    @property
    def rot(self):
        return np.array(self.rotation).reshape(3, 3)

    def to_local(self, points):
        return (np.asarray(points, dtype=np.float64) - np.array(self.center)) @ self.rot

    def to_world(self, local):
        return local @ self.rot.T + np.array(self.center)

    def sdf(self, points):
        q = self.to_local(points)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - np.array(self.size)
            return (np.linalg.norm(np.maximum(d, 0.0), axis=-1)
                    + np.minimum(d.max(axis=-1), 0.0))
        r, h = self.size
        if self.kind == "capsule":
            axis_pt = np.zeros_like(q)
            axis_pt[:, 2] = np.clip(q[:, 2], -h, h)
            return np.linalg.norm(q - axis_pt, axis=-1) - r
        d = np.stack([np.linalg.norm(q[:, :2], axis=-1) - r, np.abs(q[:, 2]) - h], axis=-1)
        return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)

    def area(self):
        if self.kind == "sphere":
            return 4 * np.pi * self.size[0] ** 2
        if self.kind == "box":
            a, b, c = self.size
            return 8 * (a * b + b * c + c * a)
        r, h = self.size
        if self.kind == "capsule":
            return 4 * np.pi * r * h + 4 * np.pi * r * r
        return 4 * np.pi * r * h + 2 * np.pi * r * r

    def bounding_radius(self):
        if self.kind == "sphere":
            return self.size[0]
        if self.kind == "box":
            return float(np.linalg.norm(self.size))
        r, h = self.size
        return h + r if self.kind == "capsule" else float(np.hypot(r, h))

    def sample_surface(self, n, rng):
        """Area-uniform points on this primitive's surface, world frame."""
        return self.to_world(_SURFACE_SAMPLERS[self.kind](self.size, n, rng))

    def scaled(self, shift, scale):
        return Primitive(self.kind, self.rotation, (np.array(self.center) - shift) * scale,
                         tuple(s * scale for s in self.size))


def _unit_vectors(n, rng):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(size, n, rng):
    return size[0] * _unit_vectors(n, rng)


def _sample_box(size, n, rng):
    a = np.array(size)
    areas = np.array([a[1] * a[2], a[0] * a[2], a[0] * a[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * a
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), axis] = side * a[axis]
    return pts


def _sample_cylinder(size, n, rng):
    r, h = size
    side_area, cap_area = 4 * np.pi * r * h, 2 * np.pi * r * r
    on_side = rng.random(n) < side_area / (side_area + cap_area)
    phi = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-h, h, n), np.where(rng.random(n) < 0.5, -h, h))
    return np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)


def _sample_capsule(size, n, rng):
    r, h = size
    side_area, cap_area = 4 * np.pi * r * h, 4 * np.pi * r * r
    on_side = rng.random(n) < side_area / (side_area + cap_area)
    phi = rng.uniform(0, 2 * np.pi, n)
    side = np.stack([r * np.cos(phi), r * np.sin(phi), rng.uniform(-h, h, n)], axis=1)
    cap = r * _unit_vectors(n, rng)
    cap[:, 2] += np.where(cap[:, 2] >= 0, h, -h)
    return np.where(on_side[:, None], side, cap)


_SURFACE_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "capsule": _sample_capsule,
    "cylinder": _sample_cylinder,
}


@dataclass(frozen=True)
class ShapeModel:
    nodes: tuple  # ((op, Primitive), ...)

    def __post_init__(self):
        nodes = tuple((op, prim) for op, prim in self.nodes)
        if not nodes:
            raise ValueError("a shape needs at least one primitive")
        if nodes[0][0] != "union":
            raise ValueError("the first node must be a union")
        for op, prim in nodes:
            if op not in OPS or not isinstance(prim, Primitive):
                raise ValueError(f"bad node ({op!r}, {prim!r})")
        object.__setattr__(self, "nodes", nodes)

    def sdf(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = None
        for op, prim in self.nodes:
            di = prim.sdf(points)
            if d is None:
                d = di
            elif op == "union":
                d = np.minimum(d, di)
            else:
                d = np.maximum(d, -di)
        return d

    def normalized(self):
        """Shift and scale so the union primitives' bounding spheres fit the unit ball."""
        unions = [p for op, p in self.nodes if op == "union"]
        centers = np.array([p.center for p in unions])
        shift = centers.mean(axis=0)
        radius = max(np.linalg.norm(np.array(p.center) - shift) + p.bounding_radius() for p in unions)
        scale = 1.0 / radius
        return ShapeModel(tuple((op, p.scaled(shift, scale)) for op, p in self.nodes))

    def to_text(self) -> str:
        lines = []
        for op, p in self.nodes:
            fields = [op, p.kind] + [repr(x) for x in p.rotation + p.center + p.size]
            lines.append(" ".join(fields))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ShapeModel":
        nodes = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3 or parts[1] not in KINDS:
                raise ValueError(f"line {lineno}: cannot parse {line!r}")
            op, kind = parts[0], parts[1]
            vals = [float(x) for x in parts[2:]]
            if len(vals) != 12 + _SIZE_ARITY[kind]:
                raise ValueError(f"line {lineno}: wrong field count for {kind}")
            nodes.append((op, Primitive(kind, vals[:9], vals[9:12], vals[12:])))
        return cls(tuple(nodes))


def occupancy(shape: ShapeModel, p) -> np.ndarray:
    """1 where the composite signed distance is <= 0."""
    p = np.asarray(p, dtype=np.float64)
    out = (shape.sdf(p.reshape(-1, 3)) <= 0.0).astype(np.int8)
    return out.reshape(p.shape[:-1]) if p.ndim > 1 else out[0]


def sample_surface(shape: ShapeModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform points on the composite surface (rejection over primitive surfaces)."""
    if n < 3:
        raise ValueError("need n >= 3 surface points")
    prims = [p for _, p in shape.nodes]
    areas = np.array([p.area() for p in prims])
    probs = areas / areas.sum()
    out, have = [], 0
    for _ in range(1000):
        batch = max(2 * (n - have), 256)
        counts = rng.multinomial(batch, probs)
        cand = np.concatenate([p.sample_surface(c, rng) for p, c in zip(prims, counts) if c])
        cand = cand[rng.permutation(len(cand))]
        keep = cand[np.abs(shape.sdf(cand)) <= SURFACE_TOL]
        out.append(keep)
        have += len(keep)
        if have >= n:
            return np.concatenate(out)[:n]
    raise RuntimeError("surface rejection sampling did not converge; is the shape empty?")


@dataclass(frozen=True)
class OccupancySamples:
    positions: np.ndarray  # (M, 3)
    labels: np.ndarray     # (M,) in {0, 1}

    def __len__(self):
        return len(self.labels)


def sample_queries(shape: ShapeModel, n: int, rng: np.random.Generator) -> OccupancySamples:
    """Half uniform in [-1.1, 1.1]^3, half within 0.05 of the surface."""
    if n < 1:
        raise ValueError("need n >= 1 queries")
    n_box = n // 2
    uniform = rng.uniform(-QUERY_BOX, QUERY_BOX, size=(n_box, 3))
    surf = sample_surface(shape, max(n - n_box, 3), rng)[: n - n_box]
    offsets = _unit_vectors(len(surf), rng) * rng.uniform(0, QUERY_BAND, size=(len(surf), 1))
    pos = np.concatenate([uniform, surf + offsets])
    return OccupancySamples(pos, occupancy(shape, pos))


def random_shape(rng: np.random.Generator, max_primitives: int = 5) -> ShapeModel:
    """2..max_primitives primitives: overlapping unions, then differences.

    Differences come last and each must reach outside the union, so every
    carve opens to the exterior and the shape has no sealed internal voids.
    """
    for _ in range(100):
        count = int(rng.integers(2, max_primitives + 1))
        unions, carves, union_centers = [], [], []
        for i in range(count):
            op = "union" if i == 0 or rng.random() > 0.25 else "difference"
            kind = KINDS[rng.integers(len(KINDS))]
            if not union_centers:
                center = np.zeros(3)
            else:
                anchor = union_centers[rng.integers(len(union_centers))]
                step = rng.standard_normal(3)
                center = anchor + step / np.linalg.norm(step) * rng.uniform(0.15, 0.45)
            shrink = 0.6 if op == "difference" else 1.0
            prim = Primitive(kind, random_rotation(rng), center, _random_size(kind, rng, shrink))
            if op == "union":
                unions.append((op, prim))
                union_centers.append(center)
            else:
                carves.append((op, prim))
        shape = ShapeModel(tuple(unions + carves)).normalized()
        body = ShapeModel(shape.nodes[: len(unions)])
        opens = all((body.sdf(p.sample_surface(256, rng)) > 0).any()
                    for _, p in shape.nodes[len(unions):])
        centers = np.array([p.center for _, p in body.nodes])
        if opens and (shape.sdf(centers) < 0).any():
            return shape
    raise RuntimeError("could not generate a non-empty shape")


def _random_size(kind, rng, shrink):
    if kind == "sphere":
        return (shrink * rng.uniform(0.2, 0.45),)
    if kind == "box":
        return tuple(shrink * rng.uniform(0.1, 0.4, size=3))
    if kind == "capsule":
        return (shrink * rng.uniform(0.08, 0.25), shrink * rng.uniform(0.1, 0.4))
    return (shrink * rng.uniform(0.1, 0.3), shrink * rng.uniform(0.1, 0.4))


_SPLIT_KEYS = {"train": 0, "test": 1}


def generate_dataset(count: int, rng, split: str | None = None) -> list:
    """``count`` random normalized shapes.

    ``rng`` may be a Generator or an integer seed; with an integer seed and a
    ``split`` name the stream is keyed by the split, so train and test never
    share a seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not isinstance(rng, np.random.Generator):
        key = [int(rng)] if split is None else [int(rng), _SPLIT_KEYS[split]]
        rng = np.random.default_rng(key)
    return [random_shape(rng) for _ in range(count)]
