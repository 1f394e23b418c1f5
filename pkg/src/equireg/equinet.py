"""Shared SE(3)-equivariant feature extractor (Vector Neuron layers).

Features are ``(..., C, 3)`` arrays: C channels of 3-vectors. Weights only
ever mix channels, so rotating the input rotates every channel vector.
Translations are handled by centering the cloud and storing the centroid.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import GradTape, Var

DIRECTION_EPS = 1e-12
POOL_EPS = 1e-12


class ShapeMismatch(ValueError):
    pass


class DegenerateCloud(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    global_channels: int = 32     # C0
    hidden_channels: int = 32
    edge_channels: int = 16       # width of the kNN edge layers
    feat_channels: int = 32       # channels of the fused per-point feature
    invariant_channels: int = 16  # K; descriptor width = feat_channels * K
    n_layers: int = 4
    edge_layers: int = 1          # leading layers that aggregate over kNN edges
    k: int = 16
    vector_neurons: bool = True   # False: unconstrained linear layers (ablation)
    invariant_head: bool = True   # False: raw fused vectors as descriptors (ablation)

    def __post_init__(self):
        if not 1 <= self.edge_layers <= self.n_layers:
            raise ValueError("edge_layers must be in [1, n_layers]")
        if min(self.global_channels, self.hidden_channels, self.edge_channels, self.feat_channels,
               self.invariant_channels, self.k) < 1:
            raise ValueError("all widths must be positive")

    @property
    def descriptor_dim(self):
        if self.invariant_head:
            return self.feat_channels * self.invariant_channels
        return self.feat_channels * 3

    def layer_dims(self):
        dims = []
        c_in = 1
        for i in range(self.n_layers):
            if i == self.n_layers - 1:
                c_out = self.global_channels
            elif i < self.edge_layers:
                c_out = self.edge_channels
            else:
                c_out = self.hidden_channels
            dims.append((2 * c_in if i < self.edge_layers else c_in, c_out))
            c_in = c_out
        return dims


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights."""
    def uni(c_out, c_in):
        if not cfg.vector_neurons:
            c_out, c_in = 3 * c_out, 3 * c_in
        b = 1.0 / np.sqrt(c_in)
        return rng.uniform(-b, b, size=(c_out, c_in))

    params = {}
    dims = cfg.layer_dims()
    for i, (c_in, c_out) in enumerate(dims):
        params[f"layer{i}.W"] = uni(c_out, c_in)
        if i < len(dims) - 1 and cfg.vector_neurons:
            params[f"layer{i}.U"] = uni(c_out, c_out)
    params["fuse.W"] = uni(cfg.feat_channels, 2 * cfg.global_channels)
    if cfg.vector_neurons:
        params["fuse.U"] = uni(cfg.feat_channels, cfg.feat_channels)
    if cfg.invariant_head:
        params["inv.W"] = uni(cfg.invariant_channels, cfg.feat_channels)
    return params


# -- layers ----------------------------------------------------------------------

def vn_linear(w, x):
    """Channel mixing: out[..., j, :] = Σ_i w[j, i] x[..., i, :]."""
    if x.shape[-2] != w.shape[1]:
        raise ShapeMismatch(f"weights expect {w.shape[1]} channels, got {x.shape[-2]}")
    lead = x.shape[:-2]
    flat = ad.reshape(x, (-1,) + x.shape[-2:])
    out = ad.einsum("oc,mcd->mod", w, flat)
    return ad.reshape(out, lead + (w.shape[0], 3))


def vn_nonlinear(u, x):
    """Keep a vector if it points along its learned direction k = u·x,
    otherwise drop its component along k. ‖k‖ below DIRECTION_EPS passes through."""
    return ad.vn_relu(x, vn_linear(u, x), DIRECTION_EPS)


def plain_linear(w, x, activate=True):
    """Ablation layer: a dense map over the flattened C*3 coordinates."""
    lead = x.shape[:-2]
    flat = ad.reshape(x, (-1, x.shape[-2] * 3))
    out = ad.einsum("oc,mc->mo", w, flat)
    if activate:
        out = ad.relu(out)
    return ad.reshape(out, lead + (w.shape[0] // 3, 3))


def _layer(cfg, pv, name, x, activate):
    w = pv[f"{name}.W"]
    if not cfg.vector_neurons:
        return plain_linear(w, x, activate)
    y = vn_linear(w, x)
    return vn_nonlinear(pv[f"{name}.U"], y) if activate else y


def knn_indices(points, k):
    k = min(k, len(points))
    _, idx = cKDTree(points).query(points, k=k)
    return idx.reshape(len(points), k)


def _edge_vn_layer(pv, name, h, idx, activate):
    """VN layer over edge features [h_j - h_i, h_i], mean-pooled over neighbors.

    Channel mixing commutes with the gather, so W·edge = A[j] + B[i] with
    A = W_a·h and B = (W_b - W_a)·h; likewise for the direction map U.
    """
    w = pv[f"{name}.W"]
    n, c = h.shape[:2]
    w_a, w_b = w[:, :c], w[:, c:]
    a = vn_linear(w_a, h)
    b = vn_linear(w_b - w_a, h)

    def gather_add(per_nb, per_center):
        # flattened (N, C*3) rows keep the broadcast add contiguous
        flat = ad.take(ad.reshape(per_nb, (n, -1)), idx, axis=0)
        out = flat + ad.reshape(per_center, (n, 1, -1))
        return ad.reshape(out, (n, idx.shape[1], -1, 3))

    y = gather_add(a, b)
    if activate:
        u = pv[f"{name}.U"]
        y = ad.vn_relu(y, gather_add(vn_linear(u, a), vn_linear(u, b)), DIRECTION_EPS)
    return ad.mean(y, axis=1)


def _edge_features(x, idx):
    """[x_j - x_i, x_i] over the k neighbors j of every point i."""
    nb = ad.take(x, idx, axis=0)                      # N, k, C, 3
    center = ad.reshape(x, (x.shape[0], 1) + x.shape[1:])
    center = ad.broadcast_to(center, nb.shape)
    return ad.concat([nb - center, center], axis=2)


# -- encoder -----------------------------------------------------------------------

@dataclass(frozen=True)
class GlobalFeature:
    """C0 channel vectors (relative to the centroid) plus the centroid."""

    channels: np.ndarray
    centroid: np.ndarray
    point_features: np.ndarray | None = field(default=None, compare=False, repr=False)

    def as_points(self):
        return self.channels + self.centroid


@dataclass(frozen=True)
class LocalFeature:
    descriptors: np.ndarray  # N x C1


def trace_global(cfg: EncoderConfig, pv: dict, points):
    """Traced global branch. Returns (channels C0x3, per-point N×C0×3, centroid)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 3:
        raise ShapeMismatch(f"expected an (N>=3, 3) cloud, got {points.shape}")
    centroid = points.mean(axis=0)
    centered = points - centroid
    if np.abs(centered).max() == 0.0:
        raise DegenerateCloud("all points are identical")
    tape = next(iter(pv.values())).tape
    idx = knn_indices(centered, cfg.k)
    h = tape.const(centered[:, None, :])
    n_layers = cfg.n_layers
    for i in range(n_layers):
        last = i == n_layers - 1
        if i < cfg.edge_layers and cfg.vector_neurons:
            h = _edge_vn_layer(pv, f"layer{i}", h, idx, not last)
        elif i < cfg.edge_layers:
            e = _edge_features(h, idx)
            h = ad.mean(_layer(cfg, pv, f"layer{i}", e, not last), axis=1)
        else:
            h = _layer(cfg, pv, f"layer{i}", h, not last)
    return _unit_rms(ad.mean(h, axis=0)), h, centroid


def _unit_rms(channels):
    # Mean pooling of a centered cloud largely cancels; rescale by the
    # (rotation-invariant) RMS channel norm so downstream inputs are O(1).
    ms = ad.mean(ad.sum(channels * channels, axis=1))
    return channels / ad.sqrt(ms + POOL_EPS ** 2)


def trace_local(cfg: EncoderConfig, pv: dict, point_features, channels):
    """Fuse per-point and global channels, then detach the pose.

    ``point_features`` N×C0×3 and ``channels`` C0×3 are centered, so the
    result is translation-invariant; F·Vᵀ cancels the rotation.
    """
    n = point_features.shape[0]
    g = ad.broadcast_to(ad.reshape(channels, (1,) + channels.shape), (n,) + channels.shape)
    fused = ad.concat([point_features, g], axis=1)
    f = _layer(cfg, pv, "fuse", fused, True)
    if not cfg.invariant_head:
        return ad.reshape(f, (n, -1))
    if cfg.vector_neurons:
        v = vn_linear(pv["inv.W"], f)
    else:
        v = plain_linear(pv["inv.W"], f, activate=False)
    desc = ad.einsum("ncd,nkd->nck", f, v)
    return ad.reshape(desc, (n, -1))


@dataclass
class EquiNet:
    cfg: EncoderConfig
    params: dict

    @classmethod
    def create(cls, cfg: EncoderConfig | None = None, seed: int = 0):
        cfg = cfg or EncoderConfig()
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def with_config(self, **changes):
        return EquiNet(replace(self.cfg, **changes), self.params)

    def bind(self, tape: GradTape, trainable: bool = True) -> dict:
        make = tape.var if trainable else tape.const
        return {k: make(v) for k, v in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


def encode_global(net: EquiNet, points) -> GlobalFeature:
    pv = net.bind(GradTape(record=False), trainable=False)
    channels, per_point, centroid = trace_global(net.cfg, pv, points)
    return GlobalFeature(channels.value, centroid, per_point.value)


def encode_local(net: EquiNet, points, g: GlobalFeature) -> LocalFeature:
    """Invariant per-point descriptors, reusing the per-point features held by ``g``."""
    if g.point_features is None or len(g.point_features) != len(points):
        raise ShapeMismatch("global feature was not computed from this cloud")
    tape = GradTape(record=False)
    pv = net.bind(tape, trainable=False)
    desc = trace_local(net.cfg, pv, tape.const(g.point_features), tape.const(g.channels))
    return LocalFeature(desc.value)


def encode(net: EquiNet, points):
    """Both features from one pass of the shared encoder."""
    g = encode_global(net, points)
    return g, encode_local(net, points, g)
