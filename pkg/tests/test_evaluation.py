"""Metric tests: exhaustive small-matrix oracle, MCC identities, report I/O."""

import itertools
import json

import numpy as np
import pytest

from trafficbench.evaluation import (
    REPORT_SCHEMA,
    ConfusionMatrix,
    adversary_confidence_sweep,
    build_confusion,
    emit_report,
    epsilon_security,
    evaluate_predictions,
    fitted_slope,
    mcc,
    per_class_prf,
    precision_recall_f1,
    render_table,
    report_from_dict,
    report_to_dict,
    topk_accuracy,
)
from trafficbench.ingest import ContractError


def oracle_prf(counts):
    """Direct per-class computation from first principles."""
    k = counts.shape[0]
    out = []
    for c in range(k):
        tp = counts[c, c]
        fp = counts[:, c].sum() - tp
        fn = counts[c, :].sum() - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        out.append((p, r, f, counts[c, :].sum()))
    return out


def oracle_mcc_from_pairs(truth, pred, k):
    """MCC via the explicit sample-covariance definition over indicators."""
    t = np.zeros((len(truth), k))
    p = np.zeros((len(truth), k))
    t[np.arange(len(truth)), truth] = 1
    p[np.arange(len(truth)), pred] = 1
    tc, pc = t - t.mean(axis=0), p - p.mean(axis=0)
    num = (tc * pc).sum()
    den = np.sqrt((tc * tc).sum()) * np.sqrt((pc * pc).sum())
    return num / den if den else 0.0


class TestExhaustiveOracle:
    def test_all_small_matrices(self):
        # every 2x2 and 3x3 confusion matrix with entries 0..3
        for k, cap in ((2, 3), (3, 2)):
            for flat in itertools.product(range(cap + 1), repeat=k * k):
                counts = np.array(flat, dtype=np.int64).reshape(k, k)
                if counts.sum() == 0:
                    continue
                cm = ConfusionMatrix(np.arange(k), counts)
                precision, recall, f1, support = per_class_prf(cm)
                for c, (p, r, f, s) in enumerate(oracle_prf(counts)):
                    assert precision[c] == pytest.approx(p, abs=1e-12)
                    assert recall[c] == pytest.approx(r, abs=1e-12)
                    assert f1[c] == pytest.approx(f, abs=1e-12)
                    assert support[c] == s
                truth = np.repeat(np.arange(k), counts.sum(axis=1))
                pred = np.concatenate(
                    [np.repeat(np.arange(k), counts[c]) for c in range(k)]
                )
                assert mcc(cm) == pytest.approx(
                    oracle_mcc_from_pairs(truth, pred, k), abs=1e-12
                )

    def test_binary_mcc_closed_form(self):
        # covariance form reduces to (TP*TN - FP*FN)/sqrt(...)
        counts = np.array([[13, 4], [7, 21]], dtype=np.int64)  # [true][pred]
        tp, fn, fp, tn = 13, 4, 7, 21
        expect = (tp * tn - fp * fn) / np.sqrt(
            (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        )
        assert mcc(ConfusionMatrix(np.arange(2), counts)) == pytest.approx(expect, abs=1e-12)

    def test_mcc_zero_variance(self):
        # all predictions in one class -> denominator 0 -> 0 by convention
        counts = np.array([[5, 0], [3, 0]], dtype=np.int64)
        assert mcc(ConfusionMatrix(np.arange(2), counts)) == 0.0

    def test_mcc_perfect_and_inverted(self):
        eye = np.eye(3, dtype=np.int64) * 4
        assert mcc(ConfusionMatrix(np.arange(3), eye)) == pytest.approx(1.0)
        swap = np.array([[0, 5], [5, 0]], dtype=np.int64)
        assert mcc(ConfusionMatrix(np.arange(2), swap)) == pytest.approx(-1.0)


class TestConfusionAndAverages:
    def test_build_confusion_counts(self):
        cm = build_confusion(np.array(["a", "b", "b", "a"]), ["a", "b", "a", "a"])
        lut = {c: i for i, c in enumerate(cm.classes)}
        assert cm.counts[lut["a"], lut["a"]] == 2
        assert cm.counts[lut["a"], lut["b"]] == 1
        assert cm.counts[lut["b"], lut["b"]] == 1
        assert cm.total == 4

    def test_build_confusion_accepts_rankings(self):
        ranked = np.array([[0, 1], [1, 0], [0, 1]])
        cm = build_confusion(ranked, [0, 1, 1])
        assert cm.counts[1, 0] == 1  # last sample: true 1, top-1 pred 0

    def test_weighted_recall_equals_top1(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 4, size=200)
        preds = np.where(rng.uniform(size=200) < 0.7, labels, rng.integers(0, 4, size=200))
        cm = build_confusion(preds, labels)
        _, rw, _ = precision_recall_f1(cm, "weighted")
        assert rw == pytest.approx((preds == labels).mean(), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            build_confusion(np.array([0, 1]), [0, 1, 2])

    def test_negative_counts_rejected(self):
        with pytest.raises(ContractError):
            ConfusionMatrix(np.arange(2), np.array([[1, -1], [0, 2]]))

    def test_unknown_averaging(self):
        cm = build_confusion(np.array([0, 1]), [0, 1])
        with pytest.raises(ContractError):
            precision_recall_f1(cm, "median")


class TestTopK:
    def test_monotone_in_k(self):
        rng = np.random.default_rng(4)
        ranked = np.stack([rng.permutation(5) for _ in range(100)])
        labels = rng.integers(0, 5, size=100)
        accs = [topk_accuracy(ranked, labels, k) for k in range(1, 6)]
        assert all(a <= b for a, b in zip(accs, accs[1:]))
        assert accs[-1] == 1.0  # full permutation always contains truth

    def test_k_exceeds_ranking(self):
        with pytest.raises(ContractError):
            topk_accuracy(np.array([[0, 1]]), [0], 3)


class TestEvaluateAndReports:
    def make_report(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 6, size=120)
        ranked = np.stack([rng.permutation(6) for _ in range(120)])
        return evaluate_predictions(ranked, labels, metadata={"attack": "test"})

    def test_round_trip(self):
        rep = self.make_report()
        back = report_from_dict(report_to_dict(rep))
        assert back == rep

    def test_schema_gate(self):
        doc = report_to_dict(self.make_report())
        doc["schema"] = "trafficbench/0"
        with pytest.raises(ContractError):
            report_from_dict(doc)

    def test_dict_is_json_safe(self):
        json.dumps(report_to_dict(self.make_report()))

    def test_epsilon_security_is_max_top1(self):
        reps = [self.make_report() for _ in range(3)]
        reps[1].top1 = 0.9
        assert epsilon_security(reps) == 0.9
        with pytest.raises(ContractError):
            epsilon_security([])

    def test_emit_report_deterministic(self, tmp_path):
        rep = self.make_report()
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        emit_report([rep], p1, wall_seconds=1.0)
        emit_report([rep], p2, wall_seconds=99.0)
        assert p1.read_bytes() == p2.read_bytes()  # env data lives in sidecar
        env = json.loads((tmp_path / "a.json.env.json").read_text())
        assert env["wall_seconds"] == 1.0
        assert (tmp_path / "a.json.txt").exists()

    def test_render_table_has_aggregate_row(self):
        table = render_table(self.make_report())
        assert table.splitlines()[-1].startswith("all")


class TestSweepAndSlope:
    def test_fitted_slope_exact_line(self):
        assert fitted_slope([0, 0.5, 1.0], [0.1, 0.35, 0.6]) == pytest.approx(0.5, abs=1e-12)

    def test_sweep_level_one_uses_full_test_set(self):
        # a 1-NN memorizer scores perfectly once the test set leaks fully
        def train_fn(x, y, seed):
            return list(zip(x.tolist(), y.tolist()))

        def eval_fn(model, x, y):
            xs = np.array([m[0] for m in model])
            ys = np.array([m[1] for m in model])
            d = np.abs(x[:, None, 0] - xs[None, :, 0])
            preds = ys[d.argmin(axis=1)]
            return evaluate_predictions(preds, y)

        rng = np.random.default_rng(6)
        xtr = rng.uniform(0, 1, size=(40, 1))
        ytr = (xtr[:, 0] > 0.5).astype(int)
        xte = rng.uniform(2, 3, size=(40, 1))  # disjoint support: unlearnable
        yte = rng.integers(0, 2, size=40)
        curve = adversary_confidence_sweep(
            train_fn, eval_fn, xtr, ytr, xte, yte, [0.0, 0.5, 1.0], seed=7
        )
        assert curve.levels == [0.0, 0.5, 1.0]
        assert curve.mcc[-1] == pytest.approx(1.0)
        assert fitted_slope(curve.levels, curve.mcc) > 0

    def test_sweep_rejects_bad_levels(self):
        fn = lambda *a: None
        with pytest.raises(ContractError):
            adversary_confidence_sweep(fn, fn, [], [], [], [], [0.5, 0.5], seed=0)
        with pytest.raises(ContractError):
            adversary_confidence_sweep(fn, fn, [], [], [], [], [], seed=0)
