from __future__ import annotations

import json
import math

import numpy as np
import pytest

from ctguard.cohort import Label, Sample, SplitPlan, SplitPolicy, Trial
from ctguard.evalkit import (
    ConfusionMatrix,
    LabelOutsideClassSet,
    ReportFormatError,
    SingleClassEval,
    confusion,
    evaluate,
    precision_recall,
    read_report,
    report_json,
    roc,
    roc_csv,
    roc_svg,
    write_report,
    write_roc_artifacts,
)
from ctguard.learners import fit_tree


def mann_whitney_auc(y_true, scores, positive):
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=float)
    pos = s[y == positive]
    neg = s[y != positive]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def brute_confusion(y_true, y_pred, classes):
    k = len(classes)
    counts = np.zeros((k, k), dtype=np.int64)
    for i, ci in enumerate(classes):
        for j, cj in enumerate(classes):
            counts[i, j] = sum(
                1 for t, p in zip(y_true, y_pred) if t == ci and p == cj
            )
    return counts


class TestConfusion:
    def test_two_class_example(self):
        cm = confusion(["A", "A", "B"], ["A", "B", "B"], ["A", "B"])
        assert cm.counts.tolist() == [[1, 1], [0, 1]]
        assert cm.total() == 3

    def test_perfect_predictions_are_diagonal(self):
        y = ["A", "B", "C", "B", "A"]
        cm = confusion(y, y, ["A", "B", "C"])
        assert np.array_equal(cm.counts, np.diag([2, 2, 1]))
        assert cm.accuracy() == 1.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(40)
        classes = [0, 1, 2]
        for _ in range(20):
            y_true = rng.integers(0, 3, size=50).tolist()
            y_pred = rng.integers(0, 3, size=50).tolist()
            cm = confusion(y_true, y_pred, classes)
            assert np.array_equal(cm.counts, brute_confusion(y_true, y_pred, classes))

    def test_label_outside_class_set(self):
        with pytest.raises(LabelOutsideClassSet):
            confusion(["A", "Z"], ["A", "A"], ["A", "B"])
        with pytest.raises(LabelOutsideClassSet):
            confusion(["A", "A"], ["A", "Z"], ["A", "B"])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion(["A"], ["A", "B"], ["A", "B"])

    def test_one_vs_rest_reduction(self):
        cm = confusion(
            ["A", "A", "A", "B", "B", "C"],
            ["A", "B", "A", "B", "C", "C"],
            ["A", "B", "C"],
        )
        tp, fp, fn, tn = cm.one_vs_rest("A")
        assert (tp, fp, fn, tn) == (2, 0, 1, 3)


class TestPrecisionRecall:
    def test_plain_arithmetic(self):
        cm = ConfusionMatrix(["neg", "pos"], np.array([[5, 1], [1, 9]]))
        p, r = precision_recall(cm, "pos")
        assert p == 0.9
        assert r == 0.9

    def test_recall_fifteen_sixteenths(self):
        cm = ConfusionMatrix(["neg", "pos"], np.array([[4, 0], [1, 15]]))
        _, r = precision_recall(cm, "pos")
        assert r == 0.9375

    def test_all_correct_is_perfect_everywhere(self):
        cm = ConfusionMatrix(["a", "b", "c"], np.diag([3, 4, 5]))
        for cls in ("a", "b", "c"):
            assert precision_recall(cm, cls) == (1.0, 1.0)

    def test_zero_over_zero_counts_as_one(self):
        # class "b" never predicted and never true
        cm = ConfusionMatrix(["a", "b"], np.array([[7, 0], [0, 0]]))
        assert precision_recall(cm, "b") == (1.0, 1.0)


class TestRoc:
    def test_frozen_four_point_curve(self):
        curve = roc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8], 1)
        assert curve.auc == pytest.approx(0.75, abs=1e-12)
        expect = [
            (0.0, 0.0, math.inf),
            (0.0, 0.5, 0.8),
            (0.5, 0.5, 0.4),
            (0.5, 1.0, 0.35),
            (1.0, 1.0, 0.1),
        ]
        assert curve.points == expect

    def test_perfect_separation(self):
        curve = roc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9], 1)
        assert curve.auc == 1.0

    def test_all_scores_equal(self):
        curve = roc([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5], 1)
        assert curve.auc == 0.5
        assert curve.points == [(0.0, 0.0, math.inf), (1.0, 1.0, 0.5)]

    def test_matches_mann_whitney_oracle(self):
        rng = np.random.default_rng(41)
        for trial in range(60):
            n = int(rng.integers(4, 40))
            y = rng.integers(0, 2, size=n)
            if len(np.unique(y)) < 2:
                continue
            if trial % 2:
                scores = rng.normal(size=n)
            else:
                scores = rng.integers(0, 4, size=n).astype(float)  # heavy ties
            curve = roc(y, scores, 1)
            assert abs(curve.auc - mann_whitney_auc(y, scores, 1)) <= 1e-9

    def test_score_negation_symmetry(self):
        rng = np.random.default_rng(42)
        y = rng.integers(0, 2, size=30)
        scores = rng.normal(size=30)
        a = roc(y, scores, 1).auc
        b = roc(y, -scores, 1).auc
        assert abs(a + b - 1.0) <= 1e-9

    def test_monotone_and_anchored(self):
        rng = np.random.default_rng(43)
        y = rng.integers(0, 2, size=25)
        curve = roc(y, rng.normal(size=25), 1)
        fprs = [p[0] for p in curve.points]
        tprs = [p[1] for p in curve.points]
        assert fprs == sorted(fprs)
        assert tprs == sorted(tprs)
        assert curve.points[0] == (0.0, 0.0, math.inf)
        assert curve.points[-1][:2] == (1.0, 1.0)
        curve.validate()

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassEval):
            roc([1, 1, 1], [0.1, 0.2, 0.3], 1)
        with pytest.raises(SingleClassEval):
            roc([0, 0, 0], [0.1, 0.2, 0.3], 1)


def _sample(value: float, label: Label, trial: Trial, patient: str, idx: int) -> Sample:
    image = np.full((2, 2), value, dtype=np.float32)
    return Sample(image=image, label=label, trial=trial, source=(patient, idx))


def _toy_split() -> SplitPlan:
    train, test = [], []
    for i in range(8):
        train.append(_sample(0.1 + 0.01 * i, Label.UNTAMPERED, Trial.NA, "pa", i))
        train.append(_sample(0.9 - 0.01 * i, Label.FM, Trial.BLIND, "pb", i))
    for i in range(4):
        test.append(_sample(0.15 + 0.01 * i, Label.UNTAMPERED, Trial.NA, "pc", i))
        test.append(_sample(0.85 - 0.01 * i, Label.FM, Trial.OPEN, "pd", i))
    return SplitPlan(train=train, test=test, policy=SplitPolicy.TRIAL_BASED, seed=0)


def _fit_on_split(split: SplitPlan):
    X = np.stack([s.image.ravel() for s in split.train])
    y = np.array([s.label.value for s in split.train])
    return fit_tree(X, y)


class TestEvaluate:
    def test_report_contents(self):
        split = _toy_split()
        model = _fit_on_split(split)
        report = evaluate(model, split, metadata={"regime": "demo"})
        assert report.accuracy == 1.0
        assert report.confusion.class_names == ["FM", "UNTAMPERED"]
        assert report.per_class["FM"] == {"precision": 1.0, "recall": 1.0}
        assert set(report.roc) == {"FM", "UNTAMPERED"}
        for curve in report.roc.values():
            assert curve.auc == 1.0
        assert report.run_metadata["regime"] == "demo"
        assert report.run_metadata["learner"] == "tree"
        assert report.run_metadata["score_kind"] == "leaf_distribution"
        counts = report.run_metadata["class_counts"]
        assert counts["train"] == {"FM": 8, "UNTAMPERED": 8}
        assert counts["test"] == {"FM": 4, "UNTAMPERED": 4}
        report.validate()

    def test_label_map_collapses_classes(self):
        split = _toy_split()
        X = np.stack([s.image.ravel() for s in split.train])
        collapse = lambda lab: "clean" if lab is Label.UNTAMPERED else "tampered"
        y = np.array([collapse(s.label) for s in split.train])
        model = fit_tree(X, y)
        report = evaluate(model, split, label_map=collapse)
        assert report.confusion.class_names == ["clean", "tampered"]
        assert report.accuracy == 1.0

    def test_accuracy_equals_trace_over_total(self):
        split = _toy_split()
        model = _fit_on_split(split)
        report = evaluate(model, split)
        cm = report.confusion
        assert report.accuracy == np.trace(cm.counts) / cm.counts.sum()


class TestReportArtifacts:
    def test_json_round_trip_and_revalidation(self, tmp_path):
        split = _toy_split()
        report = evaluate(_fit_on_split(split), split)
        path = tmp_path / "report.json"
        write_report(report, path)
        clone = read_report(path)
        assert clone.accuracy == report.accuracy
        assert clone.per_class == report.per_class
        assert np.array_equal(clone.confusion.counts, report.confusion.counts)
        assert clone.roc["FM"].points == report.roc["FM"].points

    def test_json_bytes_are_deterministic(self):
        split = _toy_split()
        report = evaluate(_fit_on_split(split), split)
        again = evaluate(_fit_on_split(split), split)
        assert report_json(report) == report_json(again)

    def test_infinity_threshold_survives_json(self, tmp_path):
        split = _toy_split()
        report = evaluate(_fit_on_split(split), split)
        path = tmp_path / "report.json"
        write_report(report, path)
        assert "Infinity" in path.read_text()
        clone = read_report(path)
        assert clone.roc["FM"].points[0][2] == math.inf

    def test_tampered_report_rejected(self, tmp_path):
        split = _toy_split()
        report = evaluate(_fit_on_split(split), split)
        path = tmp_path / "report.json"
        write_report(report, path)
        raw = json.loads(path.read_text())
        raw["accuracy"] = 0.5
        path.write_text(json.dumps(raw, allow_nan=True))
        with pytest.raises(ReportFormatError):
            read_report(path)

    def test_tampered_auc_rejected(self, tmp_path):
        split = _toy_split()
        report = evaluate(_fit_on_split(split), split)
        path = tmp_path / "report.json"
        write_report(report, path)
        raw = json.loads(path.read_text())
        raw["roc"]["FM"]["auc"] = 0.123
        path.write_text(json.dumps(raw, allow_nan=True))
        with pytest.raises(ReportFormatError):
            read_report(path)

    def test_csv_layout(self):
        curve = roc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8], 1)
        text = roc_csv(curve)
        lines = text.strip().split("\n")
        assert lines[0] == "threshold,fpr,tpr"
        assert lines[1] == "inf,0.0,0.0"
        assert lines[-1] == "0.1,1.0,1.0"

    def test_svg_contains_curve_and_label(self):
        curve = roc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8], 1)
        svg = roc_svg(curve, title="FM")
        assert svg.startswith("<svg")
        assert "<polyline" in svg
        assert "AUC = 0.7500" in svg
        assert "FM" in svg

    def test_artifact_files_written(self, tmp_path):
        split = _toy_split()
        report = evaluate(_fit_on_split(split), split)
        written = write_roc_artifacts(report, tmp_path)
        names = sorted(p.name for p in written)
        assert names == [
            "roc_FM.csv",
            "roc_FM.svg",
            "roc_UNTAMPERED.csv",
            "roc_UNTAMPERED.svg",
        ]
        for p in written:
            assert p.exists() and p.stat().st_size > 0
