"""End-to-end acceptance checks, one test per criterion (A1..A9).

Each test records a PASS/FAIL line that conftest prints in the terminal
summary.  The ordering benchmark (A5) takes hours on a CPU, so by default it
checks the committed report in ``acceptance_artifacts/`` after confirming
its config hash against freshly generated data; set ``ADAPOOL_A5_RETRAIN=1``
to retrain from scratch instead.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from adapool import bench as bm
from adapool import bounds as B
from adapool import pooling as P
from adapool.datagen import VectorSet, generate_dataset, read_dataset, write_dataset
from adapool.encoder import POOL_METHODS, EncoderConfig, ModelState, load_checkpoint, save_checkpoint
from adapool.tasks import baseline_sweep, make_labels
from adapool.train_eval import EvalReport, TrainConfig, config_hash, cross_validate, evaluate, train_fold

import gradcheck

pytestmark = pytest.mark.acceptance

ARTIFACTS = Path(__file__).parent / "acceptance_artifacts"

# published baseline rows, keyed by k (k = N - 1 stands for "all other rows")
CENTROID_TABLE = {1: 0.093, 2: 0.071, 4: 0.055, 8: 0.043, 16: 0.031, 32: 0.020, 64: 0.008, 127: 0.000}
TARGET_TABLE = {1: 0.058, 2: 0.044, 4: 0.040, 8: 0.041, 16: 0.048, 32: 0.060, 64: 0.080, 127: 0.126}


def report(record, name, ok, detail):
    record(name, ok, detail)
    assert ok, detail


def test_A1_bound_containment(acceptance):
    t0 = time.perf_counter()
    res = B.sweep(100_000, seed=1, n_max=64)
    dt = time.perf_counter() - t0
    ok = res.passed and res.worst_slack >= -1e-12 and dt < 60
    report(acceptance, "A1", ok, f"{res.cases} cases, {res.failures} violations, "
                                 f"worst slack {res.worst_slack:.2e}, {dt:.1f}s")


def test_A2_corollary_reductions(acceptance):
    t0 = time.perf_counter()
    res = P.reduction_sweep(2000, seed=2)
    dt = time.perf_counter() - t0
    ok = res["avg_error"] <= 1e-12 and res["max_error"] <= 1e-3
    report(acceptance, "A2", ok, f"avg err {res['avg_error']:.1e} (tol 1e-12), "
                                 f"max err {res['max_error']:.1e} (tol 1e-3), {dt:.1f}s")


def test_A3_signal_centroid_optimality(acceptance):
    rng = np.random.default_rng(3)
    worst_gap, worst_grad = np.inf, 0.0
    h = 1e-6
    for _ in range(10_000):
        N = int(rng.integers(2, 33))
        d = int(rng.integers(1, 9))
        mask = np.zeros(N, dtype=bool)
        mask[rng.choice(N, size=int(rng.integers(1, N + 1)), replace=False)] = True
        X = VectorSet(rng.normal(size=(N, d)) * rng.uniform(0.1, 5), mask)
        c = P.signal_optimal_pool(X)
        base = P.signal_loss(X, c)
        s = X.data[mask]
        # loss at c + delta for 100 random perturbations at once
        deltas = rng.normal(scale=rng.uniform(1e-3, 1), size=(100, d))
        diff = s[None] - (c + deltas)[:, None]
        losses = (diff * diff).mean(axis=(1, 2))
        worst_gap = min(worst_gap, (losses - base).min())
        g = np.array([(P.signal_loss(X, c + h * e) - P.signal_loss(X, c - h * e)) / (2 * h) for e in np.eye(d)])
        worst_grad = max(worst_grad, float(np.linalg.norm(g)))
    ok = worst_gap >= 0 and worst_grad < 1e-6
    report(acceptance, "A3", ok, f"min loss gain over centroid {worst_gap:.2e}, max |grad| {worst_grad:.1e}")


def test_A4_baseline_reproduction(acceptance):
    t0 = time.perf_counter()
    got = baseline_sweep(100_000, 128, 16, seed=0, ks=sorted(CENTROID_TABLE))
    dt = time.perf_counter() - t0
    bad = []
    for k, (c, t) in got.items():
        for label, val, ref in (("centroid", c, CENTROID_TABLE[k]), ("target", t, TARGET_TABLE[k])):
            tol = 0.15 * ref if ref > 0 else 0.002
            if abs(val - ref) > tol:
                bad.append(f"{label} k={k}: {val:.4f} vs {ref:.3f}")
    rows = " ".join(f"k{k}={c:.3f}/{t:.3f}" for k, (c, t) in got.items())
    ok = not bad and dt < 600
    report(acceptance, "A4", ok, f"{rows}; {dt:.0f}s" + (f"; off: {bad}" if bad else ""))


def a5_setup():
    ds = generate_dataset(50_000, 32, 16, seed=0)
    cfg = TrainConfig(epochs=20, batch_size=128, lr=5e-4, folds=3, holdout_fraction=0.1, seed=0,
                      k_list=(1, 16), methods=("ada", "avg", "cls"), encoder=EncoderConfig(num_layers=3))
    labels = {k: make_labels(ds, "knn", k) for k in cfg.k_list}
    return ds, cfg, labels


def test_A5_desk_scale_ordering(acceptance):
    ds, cfg, labels = a5_setup()
    path = ARTIFACTS / "a5_report.json"
    if os.environ.get("ADAPOOL_A5_RETRAIN") == "1":
        rep = cross_validate(ds, labels, cfg)
        source = "retrained"
    elif not path.exists():
        report(acceptance, "A5", False, f"no recorded report at {path}; set ADAPOOL_A5_RETRAIN=1")
    else:
        rep = EvalReport.from_json(path.read_text())
        source = "recorded report"
        if rep.config_hash != config_hash(ds, cfg, labels):
            report(acceptance, "A5", False, "recorded report does not match the regenerated data/config")
    per_fold = {}
    for f in rep.folds:
        per_fold.setdefault((f["method"], f["k"]), {})[f["fold"]] = f["holdout_loss"]
    folds = sorted(per_fold[("ada", 1)])
    checks = []
    for j in folds:
        ada1, avg1, cls1 = (per_fold[(m, 1)][j] for m in ("ada", "avg", "cls"))
        ada16, avg16 = per_fold[("ada", 16)][j], per_fold[("avg", 16)][j]
        checks.append(ada1 < avg1 and ada1 < cls1 and ada16 <= 1.5 * avg16)
    means = {(m, k): rep.loss(m, k) for m, k in per_fold}
    ok = len(folds) >= 3 and all(checks) and means[("ada", 1)] < min(means[("avg", 1)], means[("cls", 1)])
    detail = (f"{source}; {len(folds)} seeds; k=1 ada {means[('ada', 1)]:.4f} avg {means[('avg', 1)]:.4f} "
              f"cls {means[('cls', 1)]:.4f}; k=16 ada {means[('ada', 16)]:.4f} avg {means[('avg', 16)]:.4f}; "
              f"per-seed ordering {checks}")
    report(acceptance, "A5", ok, detail)


def test_A6_aggregation_approximation(acceptance):
    t0 = time.perf_counter()
    ds = generate_dataset(4000, 16, 16, seed=11)
    x = ds.data.astype(np.float64)
    n = ds.count
    train, val, hold = np.arange(int(0.8 * n)), np.arange(int(0.8 * n), int(0.9 * n)), np.arange(int(0.9 * n), n)
    cfg = TrainConfig(epochs=40, batch_size=32, lr=1e-3)
    losses = {}
    for kind, method in (("avg", "avg"), ("avg", "ada"), ("min", "max"), ("min", "ada")):
        lab = make_labels(ds, kind)
        enc = EncoderConfig(num_layers=1, num_heads=4, dim_input=16, dim_hidden=32, dim_ff=64, dropout_ff=0.0,
                            pool_method=method, seed=1)
        res = train_fold(x, lab, train, val, enc, cfg, np.random.default_rng(0))
        losses[(kind, method)] = evaluate(res.state, x[hold], lab.target_index[hold], lab.y[hold])
    dt = time.perf_counter() - t0
    fits = losses[("avg", "avg")] < 1e-3 and losses[("avg", "ada")] < 1e-3
    gap = losses[("min", "max")] / losses[("min", "ada")]
    ok = fits and gap >= 2 and dt < 1800
    detail = ", ".join(f"{m} head on {k}: {v:.2e}" for (k, m), v in losses.items())
    report(acceptance, "A6", ok, f"{detail}; max/ada on min = {gap:.2f} (need >= 2); {dt:.0f}s")


def test_A7_gradient_correctness(acceptance):
    ops = gradcheck.op_errors()
    enc = {m: gradcheck.encoder_error(m, seed=0, layers=2, N=6, dim=8) for m in POOL_METHODS}
    worst_op = max(ops, key=ops.get)
    ok = max(ops.values()) < 1e-4 and max(enc.values()) < 1e-4
    report(acceptance, "A7", ok, f"{len(ops)} ops, worst {worst_op} {ops[worst_op]:.1e}; encoder "
                                 + " ".join(f"{m} {e:.1e}" for m, e in enc.items()))


def test_A8_pooling_complexity(acceptance):
    t0 = time.perf_counter()
    slopes = {}
    for m in bm.KERNELS:
        res = bm.bench_pooling(m, [1000, 2000, 4000, 8000], [16], reps=15, warmup=2)
        slopes[m] = res[0].slope
    dt = time.perf_counter() - t0
    lo, hi = bm.SLOPE_RANGE
    ok = all(lo <= s <= hi for s in slopes.values()) and dt < 300
    report(acceptance, "A8", ok, " ".join(f"{m} {s:.2f}" for m, s in slopes.items()) + f" (range [{lo}, {hi}])")


def test_A9_determinism_and_formats(acceptance, tmp_path):
    a = generate_dataset(300, 8, 4, seed=9)
    b = generate_dataset(300, 8, 4, seed=9)
    same_data = a.data.tobytes() == b.data.tobytes()
    write_dataset(tmp_path / "a.pbs", a)
    write_dataset(tmp_path / "b.pbs", b)
    same_files = (tmp_path / "a.pbs").read_bytes() == (tmp_path / "b.pbs").read_bytes()
    data_rt = read_dataset(tmp_path / "a.pbs").data.tobytes() == a.data.tobytes()

    labels = {1: make_labels(a, "knn", 1)}
    cfg = TrainConfig(epochs=2, batch_size=32, folds=2, k_list=(1,),
                      encoder=EncoderConfig(num_layers=1, num_heads=2, dim_hidden=8, dim_ff=16))
    r1 = cross_validate(a, labels, cfg, ckpt_dir=tmp_path / "c1")
    r2 = cross_validate(b, labels, cfg, ckpt_dir=tmp_path / "c2")
    same_report = r1.to_json(timing=False) == r2.to_json(timing=False)
    same_ckpt = all((tmp_path / "c1" / p.name).read_bytes() == p.read_bytes() for p in (tmp_path / "c2").iterdir())

    state = ModelState.init(EncoderConfig(num_layers=2, pool_method="ada", seed=4))
    save_checkpoint(tmp_path / "m.ckpt", state)
    back, _ = load_checkpoint(tmp_path / "m.ckpt")
    ckpt_rt = all(back[n].data.tobytes() == p.data.tobytes() for n, p in state.params.items())
    checks = {"dataset bytes": same_data and same_files, "dataset round trip": data_rt,
              "report bytes": same_report, "checkpoint bytes": same_ckpt, "checkpoint round trip": ckpt_rt}
    report(acceptance, "A9", all(checks.values()), ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in checks.items()))
