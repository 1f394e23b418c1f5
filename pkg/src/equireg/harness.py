"""Experiment orchestration: angle-range sweeps, recall reports and the self-test."""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import CorruptCheckpoint, MissingCheckpoint, Model, dumps, load_model, loads
from .equinet import EncoderConfig, EquiNet, encode, encode_global, trace_global, trace_local
from .geometry import (PerturbationSpec, RegistrationErrors, RigidTransform, Scenario,
                       recall, registration_errors, sample_transform)
from .global_register import OccupancyDecoder, align_global, trace_align, trace_loss_occ, trace_loss_reg
from .local_register import refine
from .mathcore import random_rotation, svd3, weighted_kabsch
from .scenarios import make_pair
from .shapes import random_shape, sample_queries, sample_surface

DEFAULT_ANGLES = (45.0, 90.0, 135.0, 180.0)
STAGES = ("coarse", "full")
FORMATS = ("csv", "json", "table")


class ConfigInvalid(ValueError):
    pass


class UnknownFormat(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario = Scenario.CLEAN
    angles: tuple = DEFAULT_ANGLES
    max_translation: float = 0.5
    instances: int = 200
    stage: str = "coarse"
    seed: int = 0
    checkpoint: str | None = None
    fallback_scorer: bool = False
    n_points: int = 1024
    n_iter: int = 3
    crop_method: str = "fps"
    net_seed: int = 0      # initialization of the untrained extractor when no checkpoint is given
    workers: int = 1

    def __post_init__(self):
        try:
            object.__setattr__(self, "scenario", Scenario(self.scenario))
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from None
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if self.instances < 1:
            raise ConfigInvalid("instances must be >= 1")
        if any(not 0.0 < a <= 180.0 for a in self.angles):
            raise ConfigInvalid("angle ranges must lie in (0, 180]")
        if self.max_translation < 0:
            raise ConfigInvalid("max translation must be >= 0")
        if self.stage not in STAGES:
            raise ConfigInvalid(f"stage must be one of {STAGES}")
        if self.n_points < 6 or self.n_iter < 1 or self.workers < 1:
            raise ConfigInvalid("n_points >= 6, n_iter >= 1 and workers >= 1 required")
        if self.crop_method not in ("fps", "halfspace"):
            raise ConfigInvalid("crop_method must be fps or halfspace")


@dataclass(frozen=True)
class RecallCell:
    scenario: str
    max_angle: float
    instances: int
    recall: float
    median_rot_deg: float
    median_trans: float
    seconds_per_instance: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class RecallReport:
    stage: str
    cells: tuple = ()

    def cell(self, max_angle):
        for c in self.cells:
            if c.max_angle == float(max_angle):
                return c
        raise KeyError(max_angle)


# -- running -----------------------------------------------------------------------

def resolve_model(cfg: ExperimentConfig) -> Model:
    if cfg.checkpoint is None:
        model = Model(net=EquiNet.create(seed=cfg.net_seed))
    else:
        model = load_model(cfg.checkpoint)
        if model.net is None:
            raise ConfigInvalid(f"{cfg.checkpoint} holds no extractor weights")
    if cfg.stage == "full" and not cfg.fallback_scorer and model.fine is None:
        raise MissingCheckpoint("the learned fine register needs a stage-2 checkpoint "
                                "(or use the fallback scorer)")
    return model


def _instance_streams(seed, index):
    """Shape, cloud and transform streams; clouds do not depend on the angle range."""
    return (np.random.default_rng([seed, index, 0]), np.random.default_rng([seed, index, 1]),
            np.random.default_rng([seed, index, 2]))


def register(model: Model, src, tgt, stage="coarse", n_iter=3, fallback_scorer=False,
             src_features=None) -> RigidTransform:
    """Estimate the transform taking ``src`` onto ``tgt`` with the chosen pipeline."""
    full = stage == "full"
    if src_features is None:
        src_features = encode(model.net, src) if full else (encode_global(model.net, src), None)
    gp, lp = src_features
    if full:
        gq, lq = encode(model.net, tgt)
    else:
        gq = encode_global(model.net, tgt)
    est = align_global(gp, gq).transform
    if full:
        fine = None if fallback_scorer else model.fine
        est = refine(src, tgt, lp, lq, est, n_iter, fine).transform
    return est


def run_instance(cfg: ExperimentConfig, model: Model, index: int):
    """(errors, wall-clock seconds) for one instance, per angle range."""
    shape_rng, cloud_rng, tf_rng = _instance_streams(cfg.seed, index)
    shape = random_shape(shape_rng)
    src, tgt0 = make_pair(shape, cfg.scenario, RigidTransform.identity(), cloud_rng,
                          cfg.n_points, cfg.crop_method)
    start = time.perf_counter()
    if cfg.stage == "full":
        feats = encode(model.net, src)
    else:
        feats = (encode_global(model.net, src), None)
    src_seconds = time.perf_counter() - start
    state = tf_rng.bit_generator.state
    out = []
    for angle in cfg.angles:
        tf_rng.bit_generator.state = state  # common random numbers across angle ranges
        gt = sample_transform(PerturbationSpec(angle, cfg.max_translation), tf_rng)
        tgt = gt.apply(tgt0)
        start = time.perf_counter()
        est = register(model, src, tgt, cfg.stage, cfg.n_iter, cfg.fallback_scorer, feats)
        out.append((registration_errors(gt, est), src_seconds + time.perf_counter() - start))
    return out


def _run_chunk(args):
    cfg, model, indices = args
    return [run_instance(cfg, model, i) for i in indices]


def run_experiment(cfg: ExperimentConfig, model: Model | None = None) -> RecallReport:
    """Recall and median errors per angle range, deterministic per seed.

    Instances are independent, so ``cfg.workers > 1`` fans them out over
    processes; results are gathered back in instance order before reduction.
    """
    model = model or resolve_model(cfg)
    indices = list(range(cfg.instances))
    if cfg.workers == 1:
        results = _run_chunk((cfg, model, indices))
    else:
        chunks = [indices[w::cfg.workers] for w in range(cfg.workers)]
        with ProcessPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(_run_chunk, [(cfg, model, c) for c in chunks]))
        results = [None] * cfg.instances
        for chunk, part in zip(chunks, parts):
            for i, r in zip(chunk, part):
                results[i] = r
    cells = []
    for a, angle in enumerate(cfg.angles):
        errs = [r[a][0] for r in results]
        cells.append(RecallCell(
            scenario=cfg.scenario.value, max_angle=angle, instances=len(errs),
            recall=recall(errs),
            median_rot_deg=float(np.median([e.rot_err_deg for e in errs])),
            median_trans=float(np.median([e.trans_err for e in errs])),
            seconds_per_instance=float(np.mean([r[a][1] for r in results]))))
    return RecallReport(cfg.stage, tuple(cells))


# -- serialization -----------------------------------------------------------------

_CSV_COLUMNS = ("scenario", "stage", "max_angle", "instances", "recall",
                "median_rot_deg", "median_trans")


def _range_label(angle):
    return f"[0,{angle:g}]"


def report_format(r: RecallReport, fmt: str, include_timing: bool = False) -> str:
    """Serialize a report. Timing is machine-dependent, so it is left out
    unless asked for; that keeps reports byte-identical across runs."""
    if fmt == "json":
        keep = None if include_timing else "seconds_per_instance"
        cells = [{k: v for k, v in asdict(c).items() if k != keep} for c in r.cells]
        return json.dumps({"stage": r.stage, "cells": cells}, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        cols = _CSV_COLUMNS + (("seconds_per_instance",) if include_timing else ())
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for c in r.cells:
            row = asdict(c)
            row["stage"] = r.stage
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in cols])
        return buf.getvalue()
    if fmt == "table":
        labels = [_range_label(c.max_angle) for c in r.cells]
        head = f"{'method':<24}" + "".join(f"{x:>10}" for x in labels)
        if not r.cells:
            return head.rstrip() + "\n"
        name = f"{r.stage} ({r.cells[0].scenario})"
        rows = [
            (f"{name} recall %", [f"{100 * c.recall:.1f}" for c in r.cells]),
            ("median rot (deg)", [f"{c.median_rot_deg:.3g}" for c in r.cells]),
            ("median trans", [f"{c.median_trans:.3g}" for c in r.cells]),
        ]
        if include_timing:
            rows.append(("ms / instance", [f"{1e3 * c.seconds_per_instance:.1f}" for c in r.cells]))
        lines = [head] + [f"{k:<24}" + "".join(f"{v:>10}" for v in vals) for k, vals in rows]
        return "\n".join(lines) + "\n"
    raise UnknownFormat(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def report_from_json(text: str) -> RecallReport:
    data = json.loads(text)
    return RecallReport(data["stage"], tuple(RecallCell(**c) for c in data["cells"]))


# -- self-test ---------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str


def _suite_svd(rng):
    worst = 0.0
    for i in range(2000):
        m = rng.normal(size=(3, 3))
        if i % 4 == 0:
            m[:, 2] = m[:, 0] * rng.normal() + 1e-9 * rng.normal(size=3)
        u, s, v = svd3(m)
        rec = np.abs(u @ np.diag(s) @ v.T - m).max() / np.abs(m).max()
        orth = max(np.abs(u.T @ u - np.eye(3)).max(), np.abs(v.T @ v - np.eye(3)).max())
        worst = max(worst, rec, orth)
    return worst < 1e-9, f"max reconstruction/orthonormality residual {worst:.2e}"


def _suite_kabsch(rng):
    worst_r = worst_t = 0.0
    for _ in range(200):
        src = rng.normal(size=(20, 3))
        gt = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        e = registration_errors(gt, weighted_kabsch(src, gt.apply(src), rng.uniform(0.1, 1, 20)))
        worst_r, worst_t = max(worst_r, e.rot_err_deg), max(worst_t, e.trans_err)
    return worst_r < 1e-7 and worst_t < 1e-9, f"max rot {worst_r:.2e} deg, trans {worst_t:.2e}"


def _trials(rng, count, n_points=128):
    for i in range(count):
        net = EquiNet.create(seed=int(rng.integers(2**31)))
        shape = random_shape(rng)
        p = sample_surface(shape, n_points, rng)
        gt = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        yield net, p, gt


def equivariance_residual(net, p, gt):
    """Relative ∞-norm residual of the (R, t)-commutation of the global feature."""
    a = encode_global(net, gt.apply(p)).as_points()
    b = gt.apply(encode_global(net, p).as_points())
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def invariance_residual(net, p, gt):
    _, la = encode(net, p)
    _, lb = encode(net, gt.apply(p))
    a, b = la.descriptors, lb.descriptors
    return float(np.abs(a - b).max() / max(np.abs(a).max(), 1e-12))


def _suite_equivariance(rng, count=20):
    worst = max(equivariance_residual(*t) for t in _trials(rng, count))
    return worst < 1e-5, f"max relative residual {worst:.2e}"


def _suite_invariance(rng, count=20):
    worst = max(invariance_residual(*t) for t in _trials(rng, count))
    return worst < 1e-5, f"max relative deviation {worst:.2e}"


TOY_ENCODER = EncoderConfig(global_channels=4, hidden_channels=3, edge_channels=2, feat_channels=2,
                            invariant_channels=2, k=4)


def toy_stage1_problem(seed=0, n_points=12, n_queries=6):
    """A small encoder + decoder with a fixed pair, queries and transform.

    Returns (params, loss_fn) for :func:`autodiff.check_gradients`; the loss is
    λ·L_occ + (1−λ)·L_reg through the traced alignment, plus the local head.
    """
    rng = np.random.default_rng(seed)
    net = EquiNet.create(TOY_ENCODER, seed=seed)
    dec = OccupancyDecoder.create(TOY_ENCODER.global_channels, hidden=5, seed=seed)
    shape = random_shape(rng)
    gt = RigidTransform(random_rotation(rng), rng.uniform(-0.5, 0.5, 3))
    src = sample_surface(shape, n_points, rng)
    tgt = gt.apply(src + rng.normal(scale=0.01, size=src.shape))
    q = sample_queries(shape, n_queries, rng)
    params = {**net.params, **dec.params}

    def loss_fn(tape, vs):
        pv = {k: vs[k] for k in net.params}
        dv = {k: vs[k] for k in dec.params}
        ch_p, per_p, cen_p = trace_global(TOY_ENCODER, pv, src)
        ch_q, _, cen_q = trace_global(TOY_ENCODER, pv, tgt)
        l_occ = (trace_loss_occ(dv, ch_p, cen_p, q.positions, q.labels)
                 + trace_loss_occ(dv, ch_q, cen_q, gt.apply(q.positions), q.labels))
        rot, t = trace_align(ch_p, cen_p, ch_q, cen_q)
        desc = trace_local(TOY_ENCODER, pv, per_p, ch_p)
        return 0.5 * l_occ + 0.5 * trace_loss_reg(rot, t, gt) + 1e-3 * ad.sum(desc * desc)

    return params, loss_fn


def _suite_gradient(rng):
    params, loss_fn = toy_stage1_problem(int(rng.integers(1000)))
    worst, where_ = ad.check_gradients(loss_fn, params, max_entries=4, rng=rng)
    return worst < 1e-4, f"max relative error {worst:.2e} at {where_}"


def _suite_checkpoint(rng, path=None):
    try:
        if path is not None:
            with open(path, "rb") as fh:
                blob = fh.read()
            arrays, texts = loads(blob)
        else:
            model = Model(net=EquiNet.create(seed=int(rng.integers(1000))))
            arrays = {k: v for k, v in model.net.params.items()}
            texts = {"note": "selftest"}
            blob = dumps(arrays, texts)
        back, back_texts = loads(dumps(arrays, texts))
        same = back.keys() == arrays.keys() and all(
            back[k].tobytes() == np.ascontiguousarray(arrays[k], "<f8").tobytes() for k in arrays)
        return same and back_texts == texts, f"{len(arrays)} arrays round-tripped bit-exactly"
    except (CorruptCheckpoint, OSError) as exc:
        return False, f"{type(exc).__name__}: {exc}"


SUITES = ("svd", "kabsch", "equivariance", "invariance", "gradient", "checkpoint")


def selftest(seed: int = 0, checkpoint=None, suites=SUITES) -> list:
    """Run the property suites; returns one SuiteResult per suite."""
    results = []
    for name in suites:
        rng = np.random.default_rng([seed, SUITES.index(name)])
        try:
            if name == "checkpoint":
                ok, detail = _suite_checkpoint(rng, checkpoint)
            else:
                ok, detail = globals()[f"_suite_{name}"](rng)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(SuiteResult(name, bool(ok), detail))
    return results
