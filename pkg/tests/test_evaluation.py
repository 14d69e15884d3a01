import numpy as np
import pytest

from gazessm.errors import ContractError, ProtocolError
from gazessm.evaluation import (
    SynthSpec,
    check_splits,
    generate_synthetic,
    make_kfold_splits,
    make_loso_splits,
    run_protocol,
)
from gazessm.metrics import auc_pairwise, compute_metrics
from gazessm.model import ModelConfig
from gazessm.train import TrainConfig
from gazessm.xmd import validate_windows


def trapezoid_auc(scores, labels):
    """Independent oracle: ROC curve by threshold sweep + trapezoid rule."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pos = (labels == 1).sum()
    neg = (labels == 0).sum()
    if pos == 0 or neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tpr = [0.0]
    fpr = [0.0]
    tp = fp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:  # process tied scores as one step
            tp += y[j]
            fp += 1 - y[j]
            j += 1
        tpr.append(tp / pos)
        fpr.append(fp / neg)
        i = j
    return float(np.trapezoid(tpr, fpr))


class TestSplits:
    def test_loso_three_participants(self):
        splits = make_loso_splits(["a", "b", "c"])
        assert len(splits) == 3
        for s in splits:
            assert len(s.test_participants) == 1
            assert len(s.train_participants) == 2

    def test_loso_partition(self):
        ps = [f"p{i}" for i in range(7)]
        splits = make_loso_splits(ps)
        check_splits(splits, ps)
        tests = sorted(p for s in splits for p in s.test_participants)
        assert tests == sorted(ps)

    def test_loso_no_overlap(self):
        for s in make_loso_splits(["x", "y", "z"]):
            assert not set(s.train_participants) & set(s.test_participants)

    def test_loso_needs_two(self):
        with pytest.raises(ProtocolError):
            make_loso_splits(["only"])

    def test_kfold_sizes(self):
        splits = make_kfold_splits([f"p{i}" for i in range(10)], k=5, seed=0)
        assert [len(s.test_participants) for s in splits] == [2] * 5
        check_splits(splits, [f"p{i}" for i in range(10)])

    def test_kfold_uneven_sizes(self):
        splits = make_kfold_splits([f"p{i}" for i in range(7)], k=3, seed=0)
        assert sorted(len(s.test_participants) for s in splits) == [2, 2, 3]

    def test_kfold_seed_changes_partition(self):
        ps = [f"p{i}" for i in range(10)]
        a = make_kfold_splits(ps, 5, seed=0)
        b = make_kfold_splits(ps, 5, seed=1)
        assert any(x.test_participants != y.test_participants for x, y in zip(a, b))

    def test_kfold_equals_loso_at_k_n(self):
        ps = [f"p{i}" for i in range(4)]
        kf = make_kfold_splits(ps, 4, seed=3)
        tests = sorted(tuple(s.test_participants) for s in kf)
        assert tests == [(p,) for p in sorted(ps)]

    def test_kfold_k_out_of_range(self):
        with pytest.raises(ProtocolError):
            make_kfold_splits(["a", "b"], 3)
        with pytest.raises(ProtocolError):
            make_kfold_splits(["a", "b"], 1)


class TestComputeMetrics:
    def test_perfect_separation(self):
        rep = compute_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], 0.5, False)
        assert rep.accuracy == 1.0 and rep.auc == 1.0 and rep.f1_macro == 1.0
        assert (rep.tp, rep.tn, rep.fp, rep.fn) == (2, 2, 0, 0)

    def test_pairwise_counting_example(self):
        # pairs: (.8>.7) + (.8>.2) + (.6<.7 miss) + (.6>.2) = 3 of 4
        assert auc_pairwise([0.8, 0.7, 0.6, 0.2], [1, 0, 1, 0]) == 0.75

    def test_all_predicted_positive_f1(self):
        rep = compute_metrics([0.9, 0.9, 0.9, 0.9], [1, 1, 0, 0], 0.5, False)
        assert rep.f1_positive == pytest.approx(2 / 3)
        assert rep.f1_negative == 0.0
        assert rep.f1_macro == pytest.approx(1 / 3)

    def test_tie_half_credit(self):
        assert auc_pairwise([0.5, 0.5], [1, 0]) == 0.5

    def test_flip_applied_before_counts(self):
        rep = compute_metrics([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0], 0.5, True)
        assert rep.accuracy == 1.0 and rep.auc == 1.0

    def test_single_class_auc_absent(self):
        rep = compute_metrics([0.2, 0.9], [1, 1], 0.5, False)
        assert rep.auc is None

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            compute_metrics([], [], 0.5, False)

    def test_accuracy_consistent_with_counts(self, rng):
        probs = rng.random(37)
        labels = rng.integers(0, 2, 37)
        rep = compute_metrics(probs, labels, 0.4, False)
        assert rep.accuracy == (rep.tp + rep.tn) / 37
        assert rep.tp + rep.tn + rep.fp + rep.fn == 37

    def test_pairwise_equals_trapezoid(self, rng):
        for _ in range(300):
            n = int(rng.integers(3, 40))
            scores = np.round(rng.random(n), 2)  # coarse grid forces ties
            labels = rng.integers(0, 2, n)
            a = auc_pairwise(scores, labels)
            b = trapezoid_auc(scores, labels)
            if a is None:
                assert b is None
            else:
                assert abs(a - b) < 1e-9

    def test_auc_invariant_to_monotone_transform(self, rng):
        scores = rng.random(25)
        labels = rng.integers(0, 2, 25)
        labels[0], labels[1] = 0, 1
        a = auc_pairwise(scores, labels)
        b = auc_pairwise(np.exp(3 * scores), labels)
        assert abs(a - b) < 1e-12


class TestSyntheticGenerator:
    def test_invariants_hold(self):
        spec = SynthSpec(participants=3, windows_per_participant=6, t_steps=40, seed=5)
        windows, _ = generate_synthetic(spec)
        cells, violations = validate_windows(
            windows, rate=spec.sample_rate, window_seconds=spec.window_seconds
        )
        assert violations == []
        assert cells == 3 * 6 * 40 * 10

    def test_oracle_accuracy_on_defaults(self):
        # pre-registered oracle: logistic regression on per-window pupil mean
        from sklearn.linear_model import LogisticRegression

        windows, _ = generate_synthetic(SynthSpec())
        x = np.stack([w.z[:, :2].mean() for w in windows]).reshape(-1, 1)
        y = np.array([w.label for w in windows])
        pids = np.array([w.participant_id for w in windows])
        accs = []
        for p in sorted(set(pids)):
            clf = LogisticRegression().fit(x[pids != p], y[pids != p])
            accs.append(clf.score(x[pids == p], y[pids == p]))
        assert np.mean(accs) >= 0.85

    def test_null_spec_flagged_and_signal_free(self):
        spec = SynthSpec(separation=0.0, burst_rate_low=2.0, burst_rate_high=2.0, seed=2)
        windows, meta = generate_synthetic(spec)
        assert meta["label_signal"] == "none"
        x = np.stack([w.z[:, :2].mean() for w in windows])
        y = np.array([w.label for w in windows])
        auc = auc_pairwise(x, y)
        assert 0.4 < auc < 0.6

    def test_burst_rates_differ_by_class(self):
        spec = SynthSpec(separation=0.0, burst_rate_low=0.5, burst_rate_high=6.0, seed=3)
        windows, _ = generate_synthetic(spec)
        obs_frac = np.array([w.z[:, 10:20].mean() for w in windows])
        y = np.array([w.label for w in windows])
        assert obs_frac[y == 0].mean() > obs_frac[y == 1].mean()

    def test_deterministic(self):
        a, _ = generate_synthetic(SynthSpec(seed=9))
        b, _ = generate_synthetic(SynthSpec(seed=9))
        for wa, wb in zip(a, b):
            assert np.array_equal(wa.z, wb.z) and wa.label == wb.label


def _protocol_setup(n_participants=3, n_windows=8, t=30, seed=0):
    spec = SynthSpec(
        participants=n_participants,
        windows_per_participant=n_windows,
        t_steps=t,
        separation=3.0,
        seed=seed,
    )
    windows, _ = generate_synthetic(spec)
    tc = TrainConfig(lr=3e-3, batch_size=16, max_epochs=2, patience=2, seed=0)
    mc = ModelConfig(
        input_dim=30, d_model=8, d_state=4, d_conv=2, expand=2,
        layers_per_direction=1, dropout=0.0, seed=0,
    )
    return windows, tc, mc


class TestRunProtocol:
    def test_report_structure_and_leakage(self):
        windows, tc, mc = _protocol_setup()
        splits = make_loso_splits({w.participant_id for w in windows})
        report, artifacts = run_protocol(windows, splits, tc, mc)
        assert report["n_folds"] == 3
        assert len(report["folds"]) == 3
        by_pid = {}
        for w in windows:
            by_pid.setdefault(w.participant_id, []).append(w)
        for fold in report["folds"]:
            assert fold["n_test"] == sum(len(by_pid[p]) for p in fold["test_participants"])
            assert fold["threshold"] > 0 and fold["threshold"] < 1
            assert "attention_forward" in fold
        agg = report["aggregate"]["accuracy"]
        assert agg is not None and 0.0 <= agg["mean"] <= 1.0

    def test_deterministic_report(self):
        windows, tc, mc = _protocol_setup()
        splits = make_loso_splits({w.participant_id for w in windows})
        r1, _ = run_protocol(windows, splits, tc, mc)
        r2, _ = run_protocol(windows, splits, tc, mc)
        import json

        assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)

    def test_degenerate_folds_skipped_and_counted(self):
        windows, tc, mc = _protocol_setup(n_participants=2)
        # force single-class training sides: one participant all 0, other all 1
        for w in windows:
            w.label = 0 if w.participant_id == "S00" else 1
        splits = make_loso_splits({w.participant_id for w in windows})
        report, artifacts = run_protocol(windows, splits, tc, mc)
        assert report["n_skipped_folds"] == 2
        assert report["folds"] == []
        assert report["aggregate"]["accuracy"] is None

    def test_checkpoints_written(self, tmp_path):
        windows, tc, mc = _protocol_setup()
        splits = make_loso_splits({w.participant_id for w in windows})
        run_protocol(windows, splits, tc, mc, checkpoint_dir=str(tmp_path))
        import os

        from gazessm.model import load_checkpoint

        for s in splits:
            path = os.path.join(tmp_path, f"fold_{s.fold_id:03d}", "checkpoint.bin")
            assert os.path.exists(path)
            load_checkpoint(path)
