"""Fine register: hard elimination, distance-aware similarity matching and
iterative weighted-Kabsch refinement, plus stage-2 training.

Every learned piece has a deterministic fallback (``weights=None``) so the
geometric pipeline runs without any training.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape
from .equinet import EquiNet, LocalFeature, ShapeMismatch, encode
from .geometry import PerturbationSpec, RigidTransform, Scenario, sample_transform
from .global_register import NonFiniteLoss, align_global, clip_and_step, trace_loss_reg
from .mathcore import DegenerateConfiguration, weighted_kabsch
from .scenarios import make_pair

log = logging.getLogger(__name__)

KEEP_DIVISOR = 6
FALLBACK_BETA = 0.1      # weight of the Euclidean distance in the fallback similarity
SOFTMAX_TAU = 0.05       # temperature of the row softmax
MATCH_RADIUS = 0.1       # a match counts as correct within this distance of ground truth


class TooFewPoints(ValueError):
    pass


@dataclass(frozen=True)
class EliminationScores:
    scores: np.ndarray  # (N,)


@dataclass
class MatchState:
    src_idx: np.ndarray
    tgt_idx: np.ndarray
    similarity: np.ndarray  # K_s x K_t
    weights: np.ndarray     # K_s
    transform: RigidTransform
    iteration: int


@dataclass(frozen=True)
class Refinement:
    transform: RigidTransform
    degenerate: bool = False
    iterations: int = 0
    state: MatchState | None = field(default=None, compare=False, repr=False)


def _unit_rows(f):
    f = np.asarray(f, dtype=np.float64)
    return f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)


def _descriptors(f):
    return f.descriptors if isinstance(f, LocalFeature) else np.asarray(f, dtype=np.float64)


# -- learned weights -----------------------------------------------------------------

@dataclass
class FineWeights:
    """Scorer, similarity and confidence parameters (all under ``fine.``)."""

    params: dict

    @classmethod
    def create(cls, desc_dim: int = 512, proj: int = 32, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng([seed, 2])

        def uni(a, b):
            bound = 1.0 / np.sqrt(b)
            return rng.uniform(-bound, bound, size=(a, b))

        p = {
            "fine.score.W0": uni(hidden, desc_dim), "fine.score.b0": np.zeros(hidden),
            "fine.score.W1": uni(1, hidden), "fine.score.b1": np.zeros(1),
            "fine.sim.P": uni(proj, desc_dim),
            "fine.sim.W0": uni(hidden, 2 * proj + 2), "fine.sim.b0": np.zeros(hidden),
            "fine.sim.W1": uni(1, hidden), "fine.sim.b1": np.zeros(1),
            "fine.conf.W": uni(1, 3), "fine.conf.b": np.zeros(1),
        }
        return cls(p)

    def bind(self, tape: GradTape, trainable=True):
        make = tape.var if trainable else tape.const
        return {k: make(v) for k, v in self.params.items()}


def _frozen(weights: FineWeights):
    return weights.bind(GradTape(record=False), trainable=False)


def _trace_scores(wv, fhat):
    h = ad.relu(ad.einsum("hd,nd->nh", wv["fine.score.W0"], fhat) + wv["fine.score.b0"])
    out = ad.einsum("oh,nh->no", wv["fine.score.W1"], h) + wv["fine.score.b1"]
    return ad.reshape(out, (-1,))


def score_points(f, weights: FineWeights | None = None) -> EliminationScores:
    """Saliency per point. Fallback: distance of the unit descriptor from the
    cloud's mean descriptor, i.e. how atypical the local geometry is."""
    fhat = _unit_rows(_descriptors(f))
    if weights is None:
        return EliminationScores(np.linalg.norm(fhat - fhat.mean(axis=0), axis=1))
    return EliminationScores(_trace_scores(_frozen(weights), fhat).value)


def keep_count(n: int) -> int:
    return n // KEEP_DIVISOR


def top_indices(scores) -> np.ndarray:
    """Indices of the ⌊N/6⌋ highest scores, best first, ties to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n < KEEP_DIVISOR:
        raise TooFewPoints(f"need at least {KEEP_DIVISOR} points, got {n}")
    order = np.lexsort((np.arange(n), -scores))
    return order[: keep_count(n)]


def hard_eliminate(points, f, weights: FineWeights | None = None):
    """Keep the top sixth of points by saliency. Returns (indices, points, descriptors)."""
    desc = _descriptors(f)
    points = np.asarray(points, dtype=np.float64)
    if len(points) != len(desc):
        raise ShapeMismatch(f"{len(points)} points but {len(desc)} descriptors")
    idx = top_indices(score_points(desc, weights).scores)
    return idx, points[idx], desc[idx]


# -- similarity ----------------------------------------------------------------------

def _pair_distances(a, b):
    if a.shape[1] <= 3:
        return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    # Gram form for wide descriptors; avoids an N x M x D temporary
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(d2, 0.0))


def trace_similarity(wv, fs, ft, ps, pt):
    """Learned score from [a_i * b_j, (a_i - b_j)², ‖f̂_i − f̂_j‖, ‖p_i − q_j‖]."""
    fs, ft = _unit_rows(fs), _unit_rows(ft)
    a = ad.einsum("pd,nd->np", wv["fine.sim.P"], fs)
    b = ad.einsum("pd,nd->np", wv["fine.sim.P"], ft)
    ks, kt = len(fs), len(ft)
    a3 = ad.reshape(a, (ks, 1, -1))
    b3 = ad.reshape(b, (1, kt, -1))
    diff = a3 - b3
    consts = np.stack([_pair_distances(fs, ft), _pair_distances(ps, pt)], axis=-1)
    pair = ad.concat([ad.broadcast_to(a3 * b3, (ks, kt, a.shape[1])), diff * diff,
                      wv["fine.sim.P"].tape.const(consts)], axis=2)
    h = ad.relu(ad.einsum("hc,ijc->ijh", wv["fine.sim.W0"], pair) + wv["fine.sim.b0"])
    out = ad.einsum("oh,ijh->ijo", wv["fine.sim.W1"], h) + wv["fine.sim.b1"]
    return ad.reshape(out, (ks, kt))


def compute_similarity(fs, ft, ps, pt, weights: FineWeights | None = None,
                       beta: float = FALLBACK_BETA) -> np.ndarray:
    """K_s x K_t closeness of each (already transformed) source point to each target.

    Fallback: −‖f̂_i − f̂_j‖ − β‖p_i − q_j‖.
    """
    fs, ft = _descriptors(fs), _descriptors(ft)
    ps, pt = np.asarray(ps, dtype=np.float64), np.asarray(pt, dtype=np.float64)
    if fs.shape[1] != ft.shape[1] or len(fs) != len(ps) or len(ft) != len(pt):
        raise ShapeMismatch("feature/point counts or descriptor widths disagree")
    if weights is None:
        return -_pair_distances(_unit_rows(fs), _unit_rows(ft)) - beta * _pair_distances(ps, pt)
    return trace_similarity(_frozen(weights), fs, ft, ps, pt).value


def row_softmax(s, tau: float = SOFTMAX_TAU) -> np.ndarray:
    z = np.asarray(s, dtype=np.float64) / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _confidence_inputs(s, ps, pt, match):
    prob = row_softmax(s)
    top2 = np.sort(s, axis=1)[:, -2:] if s.shape[1] > 1 else np.concatenate([s, s], axis=1)
    dist = np.linalg.norm(ps - pt[match], axis=1)
    return np.stack([prob.max(axis=1), (top2[:, 1] - top2[:, 0]) / SOFTMAX_TAU, dist], axis=1)


def _trace_confidence(wv, feats):
    out = ad.einsum("oc,kc->ko", wv["fine.conf.W"], feats) + wv["fine.conf.b"]
    return ad.reshape(out, (-1,))


def match_weights(s, ps, pt, match, weights: FineWeights | None = None) -> np.ndarray:
    """Confidence per source row. Fallback: the row-softmax maximum."""
    if weights is None:
        return row_softmax(s).max(axis=1)
    logits = _trace_confidence(_frozen(weights), _confidence_inputs(s, ps, pt, match)).value
    return 0.5 * (1.0 + np.tanh(0.5 * logits))


# -- refinement --------------------------------------------------------------------

def refine(p, q, fp, fq, init: RigidTransform, n_iter: int = 3,
           weights: FineWeights | None = None, eliminate: bool = True) -> Refinement:
    """Iteratively match kept points and re-solve the weighted Kabsch problem.

    Each iteration maps the kept source points by the current transform,
    matches every source row to its most similar target, and composes the
    weighted-Kabsch correction onto the current estimate.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    fp, fq = _descriptors(fp), _descriptors(fq)
    if eliminate:
        si, ps, fs = hard_eliminate(p, fp, weights)
        ti, pt, ft = hard_eliminate(q, fq, weights)
    else:
        si, ps, fs = np.arange(len(p)), p, fp
        ti, pt, ft = np.arange(len(q)), q, fq
    current, state = init, None
    for it in range(n_iter):
        moved = current.apply(ps)
        s = compute_similarity(fs, ft, moved, pt, weights)
        match = s.argmax(axis=1)
        w = match_weights(s, moved, pt, match, weights)
        state = MatchState(si, ti[match], s, w, current, it)
        try:
            delta = weighted_kabsch(moved, pt[match], w)
        except DegenerateConfiguration:
            return Refinement(current, True, it, state)
        current = delta.compose(current)
    return Refinement(current, False, n_iter, state)


# -- stage-2 training --------------------------------------------------------------

@dataclass(frozen=True)
class FineTrainConfig:
    lr: float = 0.1
    steps: int = 200
    n_points: int = 512
    clip_norm: float = 1.0
    scenario: Scenario = Scenario.NOISY
    max_angle_deg: float = 180.0
    max_translation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.n_points < KEEP_DIVISOR * 3:
            raise ValueError("learning rate, steps and point count must be positive")
        object.__setattr__(self, "scenario", Scenario(self.scenario))


@dataclass
class Stage2Result:
    weights: FineWeights
    history: list = field(default_factory=list)  # dicts: step, l_match, l_score, l_conf, l_reg, total


def _mean_bce(logits, labels):
    return ad.mean(ad.bce_with_logits(logits, labels))


def trace_weighted_kabsch(src, tgt, w):
    """Traced weighted Kabsch on constant point sets with traced weights."""
    wn = w / ad.sum(w)
    cs = ad.einsum("k,ki->i", wn, src)
    ct = ad.einsum("k,ki->i", wn, tgt)
    xs = src - ad.reshape(cs, (1, 3))
    xt = (tgt - ad.reshape(ct, (1, 3))) * ad.reshape(wn, (-1, 1))
    rot = ad.kabsch_rotation(ad.einsum("ki,kj->ij", xt, xs))
    return rot, ct - ad.einsum("ij,j->i", rot, cs)


def _nn_correct(fa, fb, pa_mapped, pb):
    """Does each row of ``fa`` find, by descriptor distance, a point of ``pb``
    within MATCH_RADIUS of its true position?"""
    nn = _pair_distances(_unit_rows(fa), _unit_rows(fb)).argmin(axis=1)
    return (np.linalg.norm(pa_mapped - pb[nn], axis=1) < MATCH_RADIUS).astype(np.float64)


def stage2_losses(wv, weights: FineWeights, net: EquiNet, shape, cfg: FineTrainConfig, rng):
    """Traced (l_match, l_score, l_conf, l_reg) for one shape."""
    spec = PerturbationSpec(cfg.max_angle_deg, cfg.max_translation, cfg.scenario)
    gt = sample_transform(spec, rng)
    src, tgt = make_pair(shape, cfg.scenario, gt, rng, cfg.n_points)
    gp, lp = encode(net, src)
    gq, lq = encode(net, tgt)
    init = align_global(gp, gq).transform
    fp, fq = lp.descriptors, lq.descriptors

    # scorer: a point is salient if its descriptor alone finds its counterpart
    score_labels = np.concatenate([_nn_correct(fp, fq, gt.apply(src), tgt),
                                   _nn_correct(fq, fp, gt.inverse().apply(tgt), src)])
    fhat = _unit_rows(np.concatenate([fp, fq]))
    l_score = _mean_bce(_trace_scores(wv, fhat), score_labels)

    si, ps, fs = hard_eliminate(src, fp, weights)
    ti, pt, ft = hard_eliminate(tgt, fq, weights)
    moved = init.apply(ps)
    s = trace_similarity(wv, fs, ft, moved, pt)
    target = _pair_distances(gt.apply(ps), pt).argmin(axis=1)
    logp = ad.log_softmax(s, axis=1)
    l_match = -ad.mean(ad.take(ad.reshape(logp, (-1,)), np.arange(len(ps)) * len(pt) + target))

    match = s.value.argmax(axis=1)
    correct = (np.linalg.norm(gt.apply(ps) - pt[match], axis=1) < MATCH_RADIUS).astype(np.float64)
    conf = _trace_confidence(wv, _confidence_inputs(s.value, moved, pt, match))
    l_conf = _mean_bce(conf, correct)

    rot, t = trace_weighted_kabsch(moved, pt[match], ad.sigmoid(conf))
    r_est = ad.einsum("ij,jk->ik", rot, init.rotation)
    t_est = ad.einsum("ij,j->i", rot, init.translation) + t
    l_reg = trace_loss_reg(r_est, t_est, gt)
    return l_match, l_score, l_conf, l_reg


def train_stage2(dataset, net: EquiNet, cfg: FineTrainConfig,
                 weights: FineWeights | None = None) -> Stage2Result:
    """Train scorer, similarity and confidence with the extractor frozen.

    The extractor never enters the tape, so its weights cannot change.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([cfg.seed, 3])
    weights = weights or FineWeights.create(net.cfg.descriptor_dim, seed=cfg.seed)
    weights = FineWeights(dict(weights.params))
    history = []
    for step in range(cfg.steps):
        tape = GradTape()
        wv = weights.bind(tape)
        shape = dataset[int(rng.integers(len(dataset)))]
        l_match, l_score, l_conf, l_reg = stage2_losses(wv, weights, net, shape, cfg, rng)
        total = l_match + l_score + l_conf + l_reg
        if not np.isfinite(total.value):
            raise NonFiniteLoss(step, float(total.value))
        grads = tape.backward(total)
        clip_and_step(weights.params, {k: ad.grad_of(grads, v) for k, v in wv.items()},
                      cfg.lr, cfg.clip_norm)
        row = {"step": step, "l_match": float(l_match.value), "l_score": float(l_score.value),
               "l_conf": float(l_conf.value), "l_reg": float(l_reg.value),
               "total": float(total.value)}
        history.append(row)
        if step % 20 == 0:
            log.info("stage2 step %d  L_match %.4f  L_reg %.4f", step, row["l_match"], row["l_reg"])
    return Stage2Result(weights, history)
