"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines; failures surface through the usual pytest report.  The whole
module is designed to finish in a few minutes on a desktop CPU.
"""
import functools
import json
import math
import os
import time

import numpy as np
import pytest

from gazessm.bench import BenchConfig, NullPowerSampler, benchmark_inference
from gazessm.cli import main as cli_main
from gazessm.evaluation import (
    SynthSpec,
    check_splits,
    generate_synthetic,
    make_kfold_splits,
    make_loso_splits,
    run_protocol,
)
from gazessm.metrics import auc_pairwise, compute_metrics
from gazessm.model import ModelConfig, branch_forward, forward_batch, init_params, run_stack
from gazessm.numerics import Tensor, grad_check, matmul, add, mul, no_grad, tsum, flip
from gazessm.ssm import ssm_scan
from gazessm.train import TrainConfig, compute_pos_weight, optimize_threshold, weighted_bce
from gazessm.xmd import load_windows, validate_windows

from conftest import FIXTURE_DIR, tiny_model_config
from test_evaluation import trapezoid_auc
from test_ssm import naive_scan, random_scan_inputs
from test_tensor import _fd_cases


def criterion(num, title):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[criterion {num:02d}] FAIL  {title}")
                raise
            print(f"[criterion {num:02d}] PASS  {title}")

        return wrapper

    return deco


# -- shared expensive fixtures --------------------------------------------------


@pytest.fixture(scope="module")
def smoke_windows():
    windows, _ = generate_synthetic(SynthSpec())  # 6 x 40, T=100
    return windows


def smoke_train_cfg():
    return TrainConfig(lr=3e-3, batch_size=64, max_epochs=50, patience=15, seed=0)


def smoke_model_cfg():
    return ModelConfig(
        input_dim=30, d_model=16, d_state=8, d_conv=4, expand=2,
        layers_per_direction=1, dropout=0.1, seed=0,
    )


@pytest.fixture(scope="module")
def smoke_protocol(smoke_windows):
    splits = make_loso_splits({w.participant_id for w in smoke_windows})
    t0 = time.time()
    report, artifacts = run_protocol(smoke_windows, splits, smoke_train_cfg(), smoke_model_cfg())
    return report, artifacts, time.time() - t0


# -- criteria -------------------------------------------------------------------


@criterion(1, "gradient suite: all ops + end-to-end tiny model < 1e-4 (64-bit)")
def test_c01_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(42)

    cases, params = _fd_cases(rng)
    for name, build in cases.items():
        err = grad_check(lambda: build(params), params)
        assert err < 1e-4, f"{name}: {err}"

    from gazessm.numerics import UNARY_FNS, apply_unary

    for fn in sorted(UNARY_FNS):
        x = rng.normal(size=(2, 5))
        if fn == "log1p":
            x = np.abs(x)
        p = Tensor(x, requires_grad=True)
        coeff = Tensor(rng.normal(size=(2, 5)))
        err = grad_check(lambda: tsum(mul(apply_unary(p, fn), coeff)), [p])
        assert err < 1e-4, f"{fn}: {err}"

    u, dt, a, b, c, skip = random_scan_inputs(rng, bsz=1, tlen=5, ch=2, n=3, requires_grad=True)
    coeff = Tensor(rng.normal(size=u.shape))
    err = grad_check(lambda: tsum(mul(ssm_scan(u, dt, a, b, c, skip), coeff)), [u, dt, a, b, c, skip])
    assert err < 1e-4, f"scan: {err}"

    # end-to-end: T=8, input 6, d_model 8, one layer per direction
    cfg = tiny_model_config()
    model = init_params(cfg, dtype=np.float64)
    z = Tensor(rng.normal(size=(1, 8, cfg.input_dim)))
    labels = np.array([1.0])

    def loss_fn():
        _, logit, _, _ = forward_batch(z, model, training=False)
        return weighted_bce(logit, labels, pos_weight=2.0)

    err = grad_check(loss_fn, model.parameter_list())
    elapsed = time.time() - t0
    assert err < 1e-4, f"end-to-end: {err}"
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


@criterion(2, "ZOH matches closed forms within 1e-12 incl. the small-step branch")
def test_c02_zoh_closed_form():
    import mpmath

    from gazessm.ssm import discretize_zoh

    mpmath.mp.dps = 50
    rng = np.random.default_rng(7)
    checked = 0
    small_branch = 0
    for i in range(1000):
        if i % 4 == 0:  # force the |delta*a| < 1e-8 branch for a quarter of cases
            a = -(10.0 ** rng.uniform(-12, -6))
            d = 10.0 ** rng.uniform(-6, -3)
        else:
            a = -(10.0 ** rng.uniform(-4, 1))
            d = 10.0 ** rng.uniform(-4, 0.7)
        b = float(rng.normal())
        if abs(d * a) < 1e-8:
            small_branch += 1
        abar, bbar = discretize_zoh(a, b, d)
        ma, md, mb = mpmath.mpf(a), mpmath.mpf(d), mpmath.mpf(b)
        ref_abar = float(mpmath.exp(ma * md))
        ref_bbar = float((mpmath.exp(ma * md) - 1) / ma * mb)
        assert abs(abar - ref_abar) <= 1e-12 * max(1.0, abs(ref_abar))
        assert abs(bbar - ref_bbar) <= 1e-12 * max(1.0, abs(ref_bbar))
        checked += 1
    assert checked == 1000
    assert small_branch >= 200


@criterion(3, "scan equals the naive recurrence within 1e-10 (64-bit)")
def test_c03_scan_oracle():
    rng = np.random.default_rng(11)
    for _ in range(8):
        tlen = int(rng.integers(4, 65))
        ch = int(rng.integers(1, 6))
        n = int(rng.integers(1, 7))
        u, dt, a, b, c, skip = random_scan_inputs(rng, bsz=2, tlen=tlen, ch=ch, n=n)
        y = ssm_scan(u, dt, a, b, c, skip).data
        ref = naive_scan(u.data, dt.data, a.data, b.data, c.data, skip.data)
        assert np.abs(y - ref).max() < 1e-10


def _median_time(fn, reps=5):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


@criterion(4, "linear-time contract: scan 4096/1024 in [3,6]; model 1000/500 in [1.6,2.6]")
def test_c04_linear_time():
    rng = np.random.default_rng(3)

    def scan_inputs(tlen):
        u = Tensor(rng.normal(size=(1, tlen, 8)).astype(np.float32))
        dt = Tensor(np.full((1, tlen, 8), 0.3, np.float32))
        a = Tensor(-np.abs(rng.normal(size=(8, 4))).astype(np.float32) - 0.1)
        b = Tensor(rng.normal(size=(1, tlen, 4)).astype(np.float32))
        c = Tensor(rng.normal(size=(1, tlen, 4)).astype(np.float32))
        skip = Tensor(np.ones(8, np.float32))
        return u, dt, a, b, c, skip

    short = scan_inputs(1024)
    long = scan_inputs(4096)
    with no_grad():
        t_short = _median_time(lambda: ssm_scan(*short))
        t_long = _median_time(lambda: ssm_scan(*long))
    ratio = t_long / t_short
    assert 3.0 <= ratio <= 6.0, f"scan ratio {ratio:.2f}"

    cfg = ModelConfig(input_dim=30, d_model=32, d_state=8, d_conv=4, expand=2,
                      layers_per_direction=2, dropout=0.0, seed=0)
    params = init_params(cfg)
    z500 = Tensor(rng.normal(size=(1, 500, 30)).astype(np.float32))
    z1000 = Tensor(rng.normal(size=(1, 1000, 30)).astype(np.float32))
    with no_grad():
        t500 = _median_time(lambda: forward_batch(z500, params))
        t1000 = _median_time(lambda: forward_batch(z1000, params))
    ratio = t1000 / t500
    assert 1.6 <= ratio <= 2.6, f"inference ratio {ratio:.2f}"


@criterion(5, "XMD invariants hold with zero violations over >= 1e5 cells")
def test_c05_xmd_invariants(tmp_path, smoke_windows):
    total_cells = 0

    # bundled fixture through the real CLI pipeline
    out = str(tmp_path / "pre")
    assert cli_main(["preprocess", "--raw-dir", FIXTURE_DIR, "--profile", "clare", "--out", out]) == 0
    fixture_windows, manifest = load_windows(os.path.join(out, "manifest.json"))
    cells, violations = validate_windows(fixture_windows, rate=manifest["pipeline"]["sample_rate"])
    assert violations == [], violations
    total_cells += cells

    spec = SynthSpec()
    cells, violations = validate_windows(smoke_windows, rate=spec.sample_rate)
    assert violations == [], violations
    total_cells += cells
    assert total_cells >= 100_000, total_cells


@criterion(6, "causality and bidirectional structure")
def test_c06_causality_bidirectionality():
    rng = np.random.default_rng(5)
    cfg = tiny_model_config(layers_per_direction=2)
    params = init_params(cfg, dtype=np.float64)

    # forward stack never lets information flow backward in time
    z = rng.normal(size=(1, 12, cfg.input_dim))
    base = branch_forward(Tensor(z), "forward", params).data
    for t_perturb in (3, 8):
        z2 = z.copy()
        z2[:, t_perturb] += 1.0
        bumped = branch_forward(Tensor(z2), "forward", params).data
        assert np.allclose(base[:, :t_perturb], bumped[:, :t_perturb], atol=1e-12)
        assert not np.array_equal(base[:, t_perturb:], bumped[:, t_perturb:])

    # backward branch is exactly flip -> backward stack -> flip
    h0 = add(matmul(Tensor(z), params.w_in), params.b_in)
    manual = flip(run_stack(flip(h0, axis=1), params.bwd_blocks, 0.0, False, None), axis=1).data
    assert np.array_equal(branch_forward(Tensor(z), "backward", params).data, manual)

    # with shared weights, palindromic input gives flip-symmetric outputs
    for fb, bb in zip(params.fwd_blocks, params.bwd_blocks):
        for (_, tf), (_, tb) in zip(fb.tensors(), bb.tensors()):
            tb.data = tf.data.copy()
    half = rng.normal(size=(1, 6, cfg.input_dim))
    pal = np.concatenate([half, half[:, ::-1]], axis=1)
    fwd = branch_forward(Tensor(pal), "forward", params).data
    bwd = branch_forward(Tensor(pal), "backward", params).data
    assert np.abs(bwd - fwd[:, ::-1]).max() < 1e-6


@criterion(7, "learning smoke: oracle >= 0.85, train acc >= 0.95, LOSO mean >= 0.80, < 10 min")
def test_c07_learning_smoke(smoke_windows, smoke_protocol):
    from sklearn.linear_model import LogisticRegression

    # pre-registered oracle: logistic regression on per-window pupil mean
    x = np.stack([w.z[:, :2].mean() for w in smoke_windows]).reshape(-1, 1)
    y = np.array([w.label for w in smoke_windows])
    pids = np.array([w.participant_id for w in smoke_windows])
    oracle_accs = []
    for p in sorted(set(pids)):
        clf = LogisticRegression().fit(x[pids != p], y[pids != p])
        oracle_accs.append(clf.score(x[pids == p], y[pids == p]))
    assert np.mean(oracle_accs) >= 0.85, f"oracle mean {np.mean(oracle_accs):.3f}"

    report, artifacts, elapsed = smoke_protocol
    assert elapsed < 600.0, f"smoke training took {elapsed:.0f}s"
    for fold in report["folds"]:
        assert fold["epochs_run"] <= 50
        assert fold["train_accuracy"] >= 0.95, f"fold {fold['fold_id']}: train {fold['train_accuracy']}"
    mean_acc = report["aggregate"]["accuracy"]["mean"]
    assert mean_acc >= 0.80, f"LOSO mean accuracy {mean_acc:.3f}"


@criterion(8, "null check: separation-0 data gives LOSO AUC in [0.4, 0.6]")
def test_c08_null_check():
    spec = SynthSpec(separation=0.0, burst_rate_low=2.0, burst_rate_high=2.0, seed=0)
    windows, meta = generate_synthetic(spec)
    assert meta["label_signal"] == "none"
    tc = TrainConfig(lr=3e-3, batch_size=64, max_epochs=6, patience=3, seed=0)
    report, _ = run_protocol(
        windows, make_loso_splits({w.participant_id for w in windows}), tc, smoke_model_cfg()
    )
    mean_auc = report["aggregate"]["auc"]["mean"]
    assert 0.4 <= mean_auc <= 0.6, f"null AUC {mean_auc:.3f}"


@criterion(9, "imbalance machinery: threshold guarantee, pos weight, BCE closed forms")
def test_c09_imbalance(smoke_protocol):
    _, artifacts, _ = smoke_protocol
    assert artifacts, "no trained folds"
    for fold_id, art in artifacts.items():
        probs = 1.0 - art.val_probs if art.flip else art.val_probs
        acc_star = np.mean((probs >= art.threshold).astype(int) == art.val_labels)
        acc_half = np.mean((probs >= 0.5).astype(int) == art.val_labels)
        assert acc_star >= acc_half, f"fold {fold_id}"

    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        probs = rng.random(n)
        labels = rng.integers(0, 2, n)
        theta = optimize_threshold(probs, labels)
        assert np.mean((probs >= theta).astype(int) == labels) >= np.mean(
            (probs >= 0.5).astype(int) == labels
        )

    assert compute_pos_weight(100, 300, "inverse_frequency") == 3.0
    assert abs(weighted_bce(Tensor([0.0]), np.array([1.0]), 2.0).item() - 2 * math.log(2)) < 1e-9
    assert abs(weighted_bce(Tensor([0.0]), np.array([0.0]), 1.0).item() - math.log(2)) < 1e-9


@criterion(10, "metric oracles: pairwise AUC == trapezoid AUC; confusion fixtures exact")
def test_c10_metric_oracles():
    rng = np.random.default_rng(13)
    compared = 0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        scores = np.round(rng.random(n), rng.integers(1, 4))  # rounding forces ties
        labels = rng.integers(0, 2, n)
        a = auc_pairwise(scores, labels)
        b = trapezoid_auc(scores, labels)
        if a is None:
            assert b is None
            continue
        assert abs(a - b) < 1e-9
        compared += 1
    assert compared > 900

    rep = compute_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], 0.5, False)
    assert (rep.tp, rep.tn, rep.fp, rep.fn) == (2, 2, 0, 0)
    assert rep.accuracy == 1.0 and rep.f1_macro == 1.0
    rep = compute_metrics([0.9, 0.9, 0.9, 0.9], [1, 1, 0, 0], 0.5, False)
    assert rep.f1_positive == pytest.approx(2 / 3)
    assert rep.f1_macro == pytest.approx(1 / 3)
    rep = compute_metrics([0.8, 0.7, 0.6, 0.2], [1, 0, 1, 0], 0.5, False)
    assert rep.auc == 0.75


@criterion(11, "protocol integrity: partitions valid, reports bit-reproducible")
def test_c11_protocol_integrity():
    participants = [f"p{i:02d}" for i in range(9)]
    loso = make_loso_splits(participants)
    check_splits(loso, participants)
    for k in (2, 3, 5, 9):
        kf = make_kfold_splits(participants, k, seed=4)
        check_splits(kf, participants)

    spec = SynthSpec(participants=3, windows_per_participant=6, t_steps=30, separation=3.0, seed=1)
    windows, _ = generate_synthetic(spec)
    tc = TrainConfig(lr=3e-3, batch_size=16, max_epochs=2, patience=2, seed=0)
    mc = tiny_model_config(input_dim=30)
    splits = make_loso_splits({w.participant_id for w in windows})
    r1, _ = run_protocol(windows, splits, tc, mc)
    r2, _ = run_protocol(windows, splits, tc, mc)
    assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)

    by_pid = {w.participant_id for w in windows}
    for fold in r1["folds"]:
        assert set(fold["test_participants"]) <= by_pid


@criterion(12, "benchmark harness: warmup excluded, FPS consistent, null power ok")
def test_c12_benchmark_harness():
    calls = {"n": 0}

    def counting_forward(z):
        calls["n"] += 1
        return np.zeros(1)

    cfg = BenchConfig()  # paper-protocol defaults: warmup 20, iterations 100, T=500
    audit = benchmark_inference(None, cfg, forward_fn=counting_forward)
    assert calls["n"] == 120
    assert audit["iterations_measured"] == 100
    assert audit["iterations_warmup"] == 20

    params = init_params(ModelConfig(input_dim=30, d_model=16, d_state=8, d_conv=4,
                                     expand=2, layers_per_direction=1, dropout=0.0, seed=0))
    cfg = BenchConfig(warmup_iterations=5, iterations=30)
    report = benchmark_inference(params, cfg, power=NullPowerSampler())
    assert abs(report["fps"] - 1000.0 / report["latency_ms"]["mean"]) / report["fps"] < 0.005
    assert report["power_watts"] is None
    assert report["power_sampler_errors"] == 0
    assert report["config"] == cfg.to_dict()


@criterion(13, "end-to-end: preprocess -> train -> evaluate on the bundled fixture")
def test_c13_end_to_end_cli(tmp_path):
    pre = str(tmp_path / "pre")
    assert cli_main(["preprocess", "--raw-dir", FIXTURE_DIR, "--profile", "clare", "--out", pre]) == 0

    run_dir = str(tmp_path / "run")
    assert cli_main([
        "train", "--manifest", os.path.join(pre, "manifest.json"), "--protocol", "loso",
        "--out", run_dir,
        "--d-model", "8", "--d-state", "4", "--d-conv", "2", "--layers", "1",
        "--max-epochs", "2", "--patience", "2", "--batch-size", "8", "--lr", "3e-3",
        "--val-fraction", "0.2",
    ]) == 0

    eval_dir = str(tmp_path / "eval")
    assert cli_main([
        "evaluate", "--manifest", os.path.join(pre, "manifest.json"),
        "--artifacts", run_dir, "--out", eval_dir,
    ]) == 0

    report = json.load(open(os.path.join(eval_dir, "report.json")))
    assert report["n_folds"] == 2
    assert len(report["folds"]) == 2
    agg = report["aggregate"]["accuracy"]
    assert agg is not None and 0.0 <= agg["mean"] <= 1.0
    for fold in report["folds"]:
        for key in ("accuracy", "f1_macro", "threshold", "flip", "tp", "tn", "fp", "fn"):
            assert key in fold
