"""Coarse register: closed-form alignment of global features, the occupancy
decoder with its loss, the registration loss, and stage-1 training."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape
from .equinet import EquiNet, GlobalFeature, trace_global
from .geometry import PerturbationSpec, RigidTransform, Scenario, sample_transform
from .mathcore import DegenerateConfiguration, weighted_kabsch
from .scenarios import make_pair
from .shapes import sample_queries

log = logging.getLogger(__name__)


class EmptyQuerySet(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class GlobalAlignment:
    transform: RigidTransform
    degenerate: bool = False


def align_global(fp: GlobalFeature, fq: GlobalFeature) -> GlobalAlignment:
    """Rigid transform taking the channel rows of ``fp`` onto those of ``fq``.

    Rows are already paired by channel index, so this is a plain uniform
    Kabsch solve. A rank-deficient configuration falls back to identity.
    """
    if fp.channels.shape != fq.channels.shape:
        raise ValueError(f"channel shapes differ: {fp.channels.shape} vs {fq.channels.shape}")
    try:
        return GlobalAlignment(weighted_kabsch(fp.as_points(), fq.as_points()))
    except DegenerateConfiguration:
        return GlobalAlignment(RigidTransform.identity(), degenerate=True)


def trace_align(ch_p, cen_p, ch_q, cen_q):
    """Traced counterpart of :func:`align_global`; returns (R, t) Vars."""
    mp, mq = ad.mean(ch_p, axis=0), ad.mean(ch_q, axis=0)
    xp = ch_p - ad.reshape(mp, (1, 3))
    xq = ch_q - ad.reshape(mq, (1, 3))
    rot = ad.kabsch_rotation(ad.einsum("ci,cj->ij", xq, xp))
    t = (mq + cen_q) - ad.einsum("ij,j->i", rot, mp + cen_p)
    return rot, t


# -- occupancy decoder -------------------------------------------------------------

@dataclass
class OccupancyDecoder:
    """MLP over the pose-invariant pairing [⟨p − c, channel_i⟩_i, ‖p − c‖]."""

    params: dict

    @classmethod
    def create(cls, in_channels: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        dims = [in_channels + 1, hidden, hidden, 1]
        params = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(a)
            params[f"dec.W{i}"] = rng.uniform(-bound, bound, size=(b, a))
            params[f"dec.b{i}"] = np.zeros(b)
        return cls(params)

    @classmethod
    def zeros_like(cls, other: "OccupancyDecoder"):
        return cls({k: np.zeros_like(v) for k, v in other.params.items()})

    def bind(self, tape: GradTape, trainable=True):
        make = tape.var if trainable else tape.const
        return {k: make(v) for k, v in self.params.items()}


def _invariant_pairing(channels, centroid, positions):
    rel = np.asarray(positions, dtype=np.float64) - centroid
    inner = ad.einsum("qd,cd->qc", rel, channels)
    dist = np.linalg.norm(rel, axis=1, keepdims=True)
    return ad.concat([inner, dist], axis=1)


def trace_logits(dv: dict, channels, centroid, positions):
    h = _invariant_pairing(channels, centroid, positions)
    n_layers = len([k for k in dv if k.startswith("dec.W")])
    for i in range(n_layers):
        h = ad.einsum("oi,qi->qo", dv[f"dec.W{i}"], h) + dv[f"dec.b{i}"]
        if i < n_layers - 1:
            h = ad.relu(h)
    return ad.reshape(h, (-1,))


def decode_occupancy(dec: OccupancyDecoder, g: GlobalFeature, positions) -> np.ndarray:
    """Occupancy probability for each query position (shape ``(M,)``)."""
    tape = GradTape(record=False)
    positions = np.atleast_2d(positions)
    logits = trace_logits(dec.bind(tape, False), tape.const(g.channels), g.centroid, positions)
    return 0.5 * (1.0 + np.tanh(0.5 * logits.value))


def binary_cross_entropy(probs, labels, eps=1e-12):
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def trace_loss_occ(dv, channels, centroid, positions, labels):
    if len(labels) == 0:
        raise EmptyQuerySet("occupancy loss needs at least one query")
    logits = trace_logits(dv, channels, centroid, positions)
    return ad.sum(ad.bce_with_logits(logits, labels))


def loss_occ(dec: OccupancyDecoder, g: GlobalFeature, queries) -> float:
    """Summed cross-entropy of predicted against true occupancy."""
    if len(queries) == 0:
        raise EmptyQuerySet("occupancy loss needs at least one query")
    tape = GradTape(record=False)
    loss = trace_loss_occ(dec.bind(tape, False), tape.const(g.channels), g.centroid,
                          queries.positions, queries.labels)
    return float(loss.value)


def loss_reg(est: RigidTransform, gt: RigidTransform) -> float:
    """‖R_gtᵀ R_est − I‖²_F + ‖t_gt − t_est‖²."""
    d = gt.rotation.T @ est.rotation - np.eye(3)
    return float(np.sum(d * d) + np.sum((gt.translation - est.translation) ** 2))


def trace_loss_reg(rot, t, gt: RigidTransform):
    d = ad.einsum("ji,jk->ik", gt.rotation, rot) - np.eye(3)
    dt = t - gt.translation
    return ad.sum(d * d) + ad.sum(dt * dt)


# -- stage-1 training ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    steps: int = 200
    batch_size: int = 1          # shapes per step
    n_queries: int = 256         # occupancy queries per cloud
    n_points: int = 256          # points per training cloud
    lam: float = 0.5             # weight of L_occ; L_reg gets 1 - lam
    clip_norm: float = 1.0
    scenario: Scenario = Scenario.NOISY
    max_angle_deg: float = 180.0
    max_translation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.batch_size < 1 or self.n_queries < 1:
            raise ValueError("learning rate and counts must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        object.__setattr__(self, "scenario", Scenario(self.scenario))


@dataclass
class TrainResult:
    net: EquiNet
    decoder: OccupancyDecoder
    history: list = field(default_factory=list)  # dicts: step, l_occ, l_reg, total

    def write_csv(self, path):
        write_history_csv(path, self.history)


def write_history_csv(path, history):
    if not history:
        raise ValueError("empty training history")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def clip_and_step(params: dict, grads: dict, lr: float, clip_norm: float) -> float:
    """In-place gradient step with global-norm clipping; returns the raw norm."""
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    scale = lr * (min(1.0, clip_norm / norm) if norm > 0 else 1.0)
    for k, g in grads.items():
        params[k] = params[k] - scale * g
    return norm


def stage1_losses(net: EquiNet, dec: OccupancyDecoder, tape: GradTape, pv, dv,
                  shape, cfg: TrainConfig, rng):
    """Traced (l_occ, l_reg) for one shape."""
    spec = PerturbationSpec(cfg.max_angle_deg, cfg.max_translation, cfg.scenario)
    gt = sample_transform(spec, rng)
    src, tgt = make_pair(shape, cfg.scenario, gt, rng, cfg.n_points)
    ch_p, _, cen_p = trace_global(net.cfg, pv, src)
    ch_q, _, cen_q = trace_global(net.cfg, pv, tgt)
    q = sample_queries(shape, cfg.n_queries, rng)
    l_occ = (trace_loss_occ(dv, ch_p, cen_p, q.positions, q.labels)
             + trace_loss_occ(dv, ch_q, cen_q, gt.apply(q.positions), q.labels))
    rot, t = trace_align(ch_p, cen_p, ch_q, cen_q)
    return l_occ, trace_loss_reg(rot, t, gt)


def train_stage1(dataset, cfg: TrainConfig, net: EquiNet | None = None,
                 decoder: OccupancyDecoder | None = None) -> TrainResult:
    """Joint training of the encoder and occupancy decoder on λ·L_occ + (1−λ)·L_reg."""
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([cfg.seed, 1])
    net = net or EquiNet.create(seed=cfg.seed)
    net = EquiNet(net.cfg, dict(net.params))
    decoder = decoder or OccupancyDecoder.create(net.cfg.global_channels, seed=cfg.seed)
    decoder = OccupancyDecoder(dict(decoder.params))
    history = []
    for step in range(cfg.steps):
        tape = GradTape()
        pv, dv = net.bind(tape), decoder.bind(tape)
        l_occ = l_reg = 0.0
        for _ in range(cfg.batch_size):
            shape = dataset[int(rng.integers(len(dataset)))]
            lo, lr_ = stage1_losses(net, decoder, tape, pv, dv, shape, cfg, rng)
            l_occ = lo + l_occ
            l_reg = lr_ + l_reg
        total = cfg.lam * l_occ + (1.0 - cfg.lam) * l_reg
        if not np.isfinite(total.value):
            raise NonFiniteLoss(step, float(total.value))
        grads = tape.backward(total)
        gp = {k: ad.grad_of(grads, v) for k, v in pv.items()}
        gd = {k: ad.grad_of(grads, v) for k, v in dv.items()}
        allg = {**{("enc", k): g for k, g in gp.items()}, **{("dec", k): g for k, g in gd.items()}}
        allp = {**{("enc", k): v for k, v in net.params.items()},
                **{("dec", k): v for k, v in decoder.params.items()}}
        clip_and_step(allp, allg, cfg.lr, cfg.clip_norm)
        for (part, k), v in allp.items():
            (net.params if part == "enc" else decoder.params)[k] = v
        row = {"step": step, "l_occ": float(l_occ.value), "l_reg": float(l_reg.value),
               "total": float(total.value)}
        history.append(row)
        if step % 20 == 0:
            log.info("stage1 step %d  L_occ %.4f  L_reg %.4f", step, row["l_occ"], row["l_reg"])
    return TrainResult(net, decoder, history)
