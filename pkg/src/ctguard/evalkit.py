"""Classification metrics and report artifacts.

Computes confusion matrices, per-class precision/recall, accuracy, and
one-vs-rest ROC curves with trapezoidal AUC, then serializes them as a
JSON report plus per-class CSV tables and SVG plots. Reports are
re-validated against their own invariants when read back.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .cohort import SplitPlan
from .preprocess import flatten

REPORT_SCHEMA_VERSION = 1


class EvalError(Exception):
    pass


class LabelOutsideClassSet(EvalError):
    def __init__(self, label):
        self.label = label
        super().__init__(f"label {label!r} not in the declared class set")


class SingleClassEval(EvalError):
    pass


class ReportFormatError(EvalError):
    pass


class OneVsRest(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class ConfusionMatrix:
    """Exact counts; rows are true classes, columns predicted."""

    class_names: list
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ValueError(f"counts must be {k}x{k}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total()

    def one_vs_rest(self, cls) -> OneVsRest:
        i = self.class_names.index(cls)
        tp = int(self.counts[i, i])
        fp = int(self.counts[:, i].sum()) - tp
        fn = int(self.counts[i, :].sum()) - tp
        tn = self.total() - tp - fp - fn
        return OneVsRest(tp, fp, fn, tn)


def confusion(y_true, y_pred, classes: Sequence) -> ConfusionMatrix:
    y_true = list(y_true)
    y_pred = list(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError("y_true and y_pred must have equal length")
    names = list(classes)
    index = {c: i for i, c in enumerate(names)}
    counts = np.zeros((len(names), len(names)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        if t not in index:
            raise LabelOutsideClassSet(t)
        if p not in index:
            raise LabelOutsideClassSet(p)
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(class_names=names, counts=counts)


def precision_recall(cm: ConfusionMatrix, cls) -> tuple[float, float]:
    """TP/(TP+FP) and TP/(TP+FN); an empty denominator counts as perfect."""
    tp, fp, fn, _ = cm.one_vs_rest(cls)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def _degenerate_rates(cm: ConfusionMatrix) -> list[str]:
    notes = []
    for cls in cm.class_names:
        tp, fp, fn, _ = cm.one_vs_rest(cls)
        if tp + fp == 0:
            notes.append(f"precision for {cls!r} is 0/0, reported as 1")
        if tp + fn == 0:
            notes.append(f"recall for {cls!r} is 0/0, reported as 1")
    return notes


@dataclass
class RocCurve:
    """Threshold sweep; points are (fpr, tpr, threshold), fpr non-decreasing."""

    points: list[tuple[float, float, float]]
    auc: float

    def validate(self) -> None:
        if not self.points:
            raise ReportFormatError("ROC curve has no points")
        fprs = [p[0] for p in self.points]
        tprs = [p[1] for p in self.points]
        if (fprs[0], tprs[0]) != (0.0, 0.0) or (fprs[-1], tprs[-1]) != (1.0, 1.0):
            raise ReportFormatError("ROC must start at (0,0) and end at (1,1)")
        if any(b < a for a, b in zip(fprs, fprs[1:])):
            raise ReportFormatError("ROC fpr sequence must be non-decreasing")
        if any(b < a for a, b in zip(tprs, tprs[1:])):
            raise ReportFormatError("ROC tpr sequence must be non-decreasing")
        if abs(self.auc - _trapezoid(self.points)) > 1e-12:
            raise ReportFormatError("stored AUC disagrees with the stored points")


def _trapezoid(points: list[tuple[float, float, float]]) -> float:
    fprs = np.array([p[0] for p in points])
    tprs = np.array([p[1] for p in points])
    return float(np.trapezoid(tprs, fprs))


def roc(y_true, scores, positive_class) -> RocCurve:
    """Sweep distinct scores descending; tied scores collapse to one point."""
    y = np.asarray(list(y_true))
    s = np.asarray(scores, dtype=np.float64)
    if len(y) != len(s):
        raise ValueError("y_true and scores must have equal length")
    pos = y == positive_class
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassEval(
            f"ROC for {positive_class!r} needs both positive and negative samples"
        )
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    pos_sorted = pos[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    group_last = np.append(np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1)
    points = [(0.0, 0.0, math.inf)]
    for i in group_last:
        points.append((fp[i] / n_neg, tp[i] / n_pos, float(s_sorted[i])))
    return RocCurve(points=points, auc=_trapezoid(points))


@dataclass
class MetricsReport:
    accuracy: float
    per_class: dict
    confusion: ConfusionMatrix
    roc: dict
    run_metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.accuracy != self.confusion.accuracy():
            raise ReportFormatError("accuracy disagrees with the confusion matrix")
        for cls in self.confusion.class_names:
            stored = self.per_class[_class_key(cls)]
            p, r = precision_recall(self.confusion, cls)
            if stored["precision"] != p or stored["recall"] != r:
                raise ReportFormatError(
                    f"precision/recall for {cls!r} disagree with the confusion matrix"
                )
        for curve in self.roc.values():
            curve.validate()

    def to_json_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "accuracy": self.accuracy,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "confusion": {
                "class_names": [_native(c) for c in self.confusion.class_names],
                "counts": self.confusion.counts.tolist(),
            },
            "roc": {
                str(k): {"auc": v.auc, "points": [list(p) for p in v.points]}
                for k, v in self.roc.items()
            },
            "run_metadata": self.run_metadata,
        }


def _native(value):
    if isinstance(value, np.generic):
        return value.item()
    return value


def _class_key(cls) -> str:
    return str(_native(cls))


def evaluate(
    model,
    split: SplitPlan,
    *,
    label_map=None,
    metadata: dict | None = None,
) -> MetricsReport:
    """Score a fitted model on the held-out half of a split plan.

    label_map converts a sample's label enum to the model's target value;
    it must be the same mapping used to build the training targets.
    """
    if label_map is None:
        label_map = lambda label: label.value
    X = np.stack([flatten(s.image) for s in split.test])
    y_true = [label_map(s.label) for s in split.test]
    y_pred = list(model.predict(X))
    scores = model.scores(X)
    classes = [_native(c) for c in model.classes]

    cm = confusion(y_true, y_pred, classes)
    per_class = {}
    for cls in classes:
        p, r = precision_recall(cm, cls)
        per_class[_class_key(cls)] = {"precision": p, "recall": r}

    warnings = _degenerate_rates(cm)
    present = set(y_true)

    def curve_for(idx_cls):
        idx, cls = idx_cls
        return _class_key(cls), roc(y_true, scores[:, idx], cls)

    curve_inputs = [
        (i, cls) for i, cls in enumerate(classes)
        if cls in present and len(present) > 1
    ]
    for i, cls in enumerate(classes):
        if (i, cls) not in curve_inputs:
            warnings.append(f"ROC for {cls!r} skipped: test split lacks both outcomes")
    if len(curve_inputs) > 2:
        with ThreadPoolExecutor(max_workers=len(curve_inputs)) as pool:
            curves = dict(pool.map(curve_for, curve_inputs))
    else:
        curves = dict(map(curve_for, curve_inputs))

    run_metadata = dict(metadata or {})
    run_metadata.setdefault("learner", _learner_name(model))
    run_metadata.setdefault("hyperparameters", _hyperparameters(model))
    run_metadata.setdefault("score_kind", _score_kind(model))
    run_metadata["class_counts"] = {
        "train": _label_counts(split.train),
        "test": _label_counts(split.test),
    }
    if warnings:
        run_metadata["warnings"] = warnings

    return MetricsReport(
        accuracy=cm.accuracy(),
        per_class=per_class,
        confusion=cm,
        roc=curves,
        run_metadata=run_metadata,
    )


def _label_counts(samples) -> dict:
    out: dict[str, int] = {}
    for s in samples:
        key = s.label.value
        out[key] = out.get(key, 0) + 1
    return dict(sorted(out.items()))


def _learner_name(model) -> str:
    return {"DecisionTree": "tree", "RandomForest": "forest", "SvmModel": "svm"}.get(
        type(model).__name__, type(model).__name__
    )


def _hyperparameters(model) -> dict:
    name = type(model).__name__
    if name == "DecisionTree":
        return {
            "max_depth": model.max_depth,
            "min_samples_leaf": model.min_samples_leaf,
        }
    if name == "RandomForest":
        return {
            "n_trees": len(model.trees),
            "seed": model.seed,
            "bootstrap": model.bootstrap,
            "features_per_split": model.features_per_split,
        }
    if name == "SvmModel":
        return {
            "C": model.C,
            "kernel": model.kernel.value,
            "gamma": model.gamma,
            "tol": model.tol,
        }
    return {}


def _score_kind(model) -> str:
    return {
        "DecisionTree": "leaf_distribution",
        "RandomForest": "vote_fraction",
        "SvmModel": "signed_margin",
    }.get(type(model).__name__, "unknown")


def report_json(report: MetricsReport) -> str:
    # allow_nan also admits Infinity, needed for the ROC threshold anchor
    return json.dumps(report.to_json_dict(), sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_report(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(report_json(report))


def read_report(path: str | Path) -> MetricsReport:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ReportFormatError(f"unreadable report: {err}") from err
    try:
        if raw["schema_version"] != REPORT_SCHEMA_VERSION:
            raise ReportFormatError(
                f"unsupported report schema {raw['schema_version']}"
            )
        cm = ConfusionMatrix(
            class_names=raw["confusion"]["class_names"],
            counts=np.array(raw["confusion"]["counts"], dtype=np.int64),
        )
        curves = {
            key: RocCurve(points=[tuple(p) for p in val["points"]], auc=val["auc"])
            for key, val in raw["roc"].items()
        }
        report = MetricsReport(
            accuracy=raw["accuracy"],
            per_class=raw["per_class"],
            confusion=cm,
            roc=curves,
            run_metadata=raw.get("run_metadata", {}),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise ReportFormatError(f"malformed report: {err}") from err
    report.validate()
    return report


def _fmt(value: float) -> str:
    return repr(float(value))


def roc_csv(curve: RocCurve) -> str:
    lines = ["threshold,fpr,tpr"]
    for fpr, tpr, threshold in curve.points:
        lines.append(f"{_fmt(threshold)},{_fmt(fpr)},{_fmt(tpr)}")
    return "\n".join(lines) + "\n"


def roc_svg(curve: RocCurve, title: str = "") -> str:
    """Standalone line plot of the curve with a chance diagonal."""
    size, margin = 440, 50
    plot = size - 2 * margin

    def sx(v: float) -> str:
        return f"{margin + v * plot:.2f}"

    def sy(v: float) -> str:
        return f"{margin + plot - v * plot:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {size} {size}" '
        f'width="{size}" height="{size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" '
        'fill="none" stroke="#333" stroke-width="1"/>',
    ]
    for tick in (0.25, 0.5, 0.75):
        parts.append(
            f'<line x1="{sx(tick)}" y1="{sy(0)}" x2="{sx(tick)}" y2="{sy(1)}" '
            'stroke="#ddd" stroke-width="1"/>'
        )
        parts.append(
            f'<line x1="{sx(0)}" y1="{sy(tick)}" x2="{sx(1)}" y2="{sy(tick)}" '
            'stroke="#ddd" stroke-width="1"/>'
        )
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="{sx(tick)}" y="{size - margin + 20}" font-size="11" '
            f'text-anchor="middle" fill="#333">{tick:g}</text>'
        )
        parts.append(
            f'<text x="{margin - 8}" y="{sy(tick)}" font-size="11" '
            f'text-anchor="end" dominant-baseline="middle" fill="#333">{tick:g}</text>'
        )
    parts.append(
        f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(1)}" '
        'stroke="#999" stroke-width="1" stroke-dasharray="5,4"/>'
    )
    coords = " ".join(f"{sx(p[0])},{sy(p[1])}" for p in curve.points)
    parts.append(
        f'<polyline points="{coords}" fill="none" stroke="#1565c0" stroke-width="2"/>'
    )
    label = f"AUC = {curve.auc:.4f}"
    if title:
        label = f"{title}  ({label})"
    parts.append(
        f'<text x="{size / 2:.0f}" y="{margin - 16}" font-size="14" '
        f'text-anchor="middle" fill="#111">{label}</text>'
    )
    parts.append(
        f'<text x="{size / 2:.0f}" y="{size - 12}" font-size="12" '
        'text-anchor="middle" fill="#333">false positive rate</text>'
    )
    parts.append(
        f'<text x="14" y="{size / 2:.0f}" font-size="12" text-anchor="middle" '
        f'fill="#333" transform="rotate(-90 14 {size / 2:.0f})">true positive rate</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _safe_name(cls) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in str(cls))


def write_roc_artifacts(report: MetricsReport, directory: str | Path) -> list[Path]:
    """Write roc_<class>.csv and roc_<class>.svg for every stored curve."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for cls, curve in sorted(report.roc.items()):
        base = f"roc_{_safe_name(cls)}"
        csv_path = directory / f"{base}.csv"
        csv_path.write_text(roc_csv(curve))
        svg_path = directory / f"{base}.svg"
        svg_path.write_text(roc_svg(curve, title=str(cls)))
        written += [csv_path, svg_path]
    return written
