"""End-to-end acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL line that is repeated in the terminal summary.
"""
import time

import numpy as np
import pytest

from equireg.autodiff import check_gradients
from equireg.checkpoint import Model, save_model
from equireg.cli import main
from equireg.equinet import EncoderConfig, EquiNet, encode
from equireg.geometry import registration_errors
from equireg.global_register import TrainConfig, train_stage1
from equireg.harness import (ExperimentConfig, equivariance_residual, invariance_residual,
                             run_experiment, toy_stage1_problem)
from equireg.local_register import FineTrainConfig, refine, train_stage2
from equireg.mathcore import RigidTransform, axis_angle, random_rotation, weighted_kabsch
from equireg.shapes import generate_dataset, random_shape, sample_surface

from test_autodiff import CASES, _loss, _probe

ANGLES = (45.0, 90.0, 135.0, 180.0)


def moving_average_drop(values, window=10):
    v = np.asarray(values, dtype=np.float64)
    first, last = v[:window].mean(), v[-window:].mean()
    return 1.0 - last / first, first, last


@pytest.fixture(scope="module")
def trials():
    """100 random (cloud, weight seed, R, t) trials shared by criteria 2 to 4."""
    rng = np.random.default_rng(2024)
    out = []
    for _ in range(100):
        p = sample_surface(random_shape(rng), 256, rng)
        gt = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        out.append((int(rng.integers(2**31)), p, gt))
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Two-stage smoke training on 20 procedural shapes, 200 steps each."""
    data = generate_dataset(20, 0, "train")
    t0 = time.perf_counter()
    s1 = train_stage1(data, TrainConfig(steps=200))
    t1 = time.perf_counter()
    before = s1.net.checksum()
    s2 = train_stage2(data, s1.net, FineTrainConfig(steps=200))
    t2 = time.perf_counter()
    path = tmp_path_factory.mktemp("ckpt") / "smoke.ckpt"
    model = Model(s1.net, s1.decoder, s2.weights)
    save_model(path, model)
    return dict(stage1=s1, stage2=s2, before=before, model=model, path=path,
                seconds=(t1 - t0, t2 - t1))


def test_criterion_01_clean_recall(verdict):
    start = time.perf_counter()
    report = run_experiment(ExperimentConfig(scenario="clean", angles=ANGLES, instances=200))
    elapsed = time.perf_counter() - start
    recalls = [c.recall for c in report.cells]
    ok = all(r == 1.0 for r in recalls) and elapsed < 120
    verdict("criterion 1 clean recall", ok,
            f"recall {recalls} over 200 instances per range, {elapsed:.1f} s (limit 120 s)")
    assert ok


def test_criterion_02_equivariance(trials, verdict):
    worst = max(equivariance_residual(EquiNet.create(seed=s), p, gt) for s, p, gt in trials)
    ok = worst < 1e-5
    verdict("criterion 2 equivariance", ok, f"max relative residual {worst:.2e} over 100 trials")
    assert ok


def test_criterion_03_invariance(trials, verdict):
    worst = max(invariance_residual(EquiNet.create(seed=s), p, gt) for s, p, gt in trials)
    ok = worst < 1e-5
    verdict("criterion 3 invariance", ok, f"max relative deviation {worst:.2e} over 100 trials")
    assert ok


def test_criterion_04_ablations(trials, verdict):
    plain = EncoderConfig(vector_neurons=False)
    headless = EncoderConfig(invariant_head=False)
    eq = [equivariance_residual(EquiNet.create(plain, seed=s), p, gt) for s, p, gt in trials]
    inv = [invariance_residual(EquiNet.create(headless, seed=s), p, gt) for s, p, gt in trials]
    ok = min(eq) > 0.01 and min(inv) > 0.01
    verdict("criterion 4 ablations", ok,
            f"min equivariance residual without vector neurons {min(eq):.3g}, "
            f"min invariance residual without invariant head {min(inv):.3g} (need > 0.01)")
    assert ok


def test_criterion_05_weighted_kabsch(verdict):
    rng = np.random.default_rng(5)
    worst_r = worst_t = 0.0
    for i in range(1000):
        n = int(rng.integers(3, 60))
        src = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)
        gt = RigidTransform(random_rotation(rng), rng.uniform(-5, 5, 3))
        w = None if i % 2 else rng.uniform(0.01, 1.0, n)
        e = registration_errors(gt, weighted_kabsch(src, gt.apply(src), w))
        worst_r, worst_t = max(worst_r, e.rot_err_deg), max(worst_t, e.trans_err)
    ok = worst_r < 1e-7 and worst_t < 1e-9
    verdict("criterion 5 weighted Kabsch", ok,
            f"max rot error {worst_r:.2e} deg, max trans error {worst_t:.2e} over 1000 problems")
    assert ok


def test_criterion_06_gradients(verdict):
    results = {}
    for name in sorted(CASES):
        rng = np.random.default_rng(sorted(CASES).index(name))
        params = _probe(rng, *CASES[name], positive=name in ("sqrt", "div"))
        results[name] = check_gradients(_loss(name, rng), params)[0]
    for seed in range(3):
        params, loss_fn = toy_stage1_problem(seed=seed)
        results[f"stage-1 total loss (seed {seed})"] = check_gradients(loss_fn, params)[0]
    worst_name = max(results, key=results.get)
    ok = results[worst_name] < 1e-4
    verdict("criterion 6 gradients", ok,
            f"{len(results)} checks, worst relative error {results[worst_name]:.2e} ({worst_name})")
    assert ok


def test_criterion_07_local_exactness(verdict):
    net = EquiNet.create(seed=0)
    hits, worst = 0, 0.0
    for i in range(100):
        rng = np.random.default_rng([7, i])
        p = sample_surface(random_shape(rng), 1024, rng)
        gt = RigidTransform(random_rotation(rng), rng.uniform(-0.5, 0.5, 3))
        q = gt.apply(p[rng.permutation(len(p))])
        off = RigidTransform(axis_angle(rng.normal(size=3), np.radians(rng.uniform(0, 10))),
                             rng.uniform(-1, 1, 3) * 0.1 / np.sqrt(3))
        out = refine(p, q, encode(net, p)[1], encode(net, q)[1], off.compose(gt), n_iter=3)
        err = registration_errors(gt, out.transform).rot_err_deg
        worst = max(worst, err)
        hits += err < 1e-4
    ok = hits == 100
    verdict("criterion 7 local exactness", ok,
            f"{hits}/100 below 1e-4 deg within 3 iterations, worst {worst:.2e} deg")
    assert ok


def test_criterion_08a_stage1_occupancy_loss(trained, verdict):
    drop, first, last = moving_average_drop([h["l_occ"] for h in trained["stage1"].history])
    ok = drop >= 0.5
    verdict("criterion 8a stage-1 L_occ", ok,
            f"10-step moving average {first:.2f} -> {last:.2f}, drop {100 * drop:.1f}% "
            f"(need >= 50%; {trained['seconds'][0]:.0f} s)")
    assert ok


def test_criterion_08b_stage2_matching_loss(trained, verdict):
    drop, first, last = moving_average_drop([h["l_match"] for h in trained["stage2"].history])
    ok = drop >= 0.3
    verdict("criterion 8b stage-2 matching loss", ok,
            f"10-step moving average {first:.3f} -> {last:.3f}, drop {100 * drop:.1f}% "
            f"(need >= 30%; {trained['seconds'][1]:.0f} s)")
    assert ok


def test_criterion_08c_extractor_frozen(trained, verdict):
    after = trained["stage1"].net.checksum()
    ok = after == trained["before"] == trained["model"].net.checksum()
    verdict("criterion 8c extractor frozen", ok, f"sha256 {after[:16]}... before and after stage 2")
    assert ok


def test_criterion_09_directional_robustness(trained, verdict):
    cfg = ExperimentConfig(scenario="noisy", angles=(45, 180), instances=100, stage="full")
    report = run_experiment(cfg, trained["model"])
    m45, m180 = report.cell(45).median_rot_deg, report.cell(180).median_rot_deg
    ok = m180 <= 1.2 * m45
    verdict("criterion 9 directional robustness", ok,
            f"median rot error {m45:.2f} deg at 45, {m180:.2f} deg at 180 "
            f"(ratio {m180 / m45:.3f}, limit 1.2; recall {report.cell(45).recall:.2f}/"
            f"{report.cell(180).recall:.2f})")
    assert ok


def test_criterion_10_determinism(trained, tmp_path, capsys, verdict):
    runs = [
        ["--scenario", "clean"],
        ["--scenario", "noisy", "--stage", "full", "--fallback-scorer"],
        ["--scenario", "partial", "--stage", "full", "--checkpoint", str(trained["path"])],
        ["--scenario", "independent", "--workers", "2", "--seed", "3"],
    ]
    identical = 0
    for i, extra in enumerate(runs):
        outs = []
        for rep in range(2):
            path = tmp_path / f"r{i}_{rep}.json"
            code = main(["eval", "--instances", "5", "--format", "json", "--out", str(path)] + extra)
            assert code == 0
            outs.append(path.read_bytes())
        identical += outs[0] == outs[1]
    capsys.readouterr()
    ok = identical == len(runs)
    verdict("criterion 10 determinism", ok,
            f"{identical}/{len(runs)} eval invocations byte-identical on repeat")
    assert ok
