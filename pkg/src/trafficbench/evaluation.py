"""Metric suite and machine-readable reports.

Precision/recall/F1 are per-class one-vs-rest with macro or
class-frequency-weighted averaging; MCC uses the confusion-matrix
covariance generalization, which reduces to the familiar binary formula
for two classes.  0/0 conventions: empty-class precision/recall and
zero-variance MCC are 0, keeping every report total.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from trafficbench.ingest import ContractError

REPORT_SCHEMA = "trafficbench/1"


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: np.ndarray
    counts: np.ndarray  # counts[true, pred]

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ContractError("confusion matrix must be square")
        if (counts < 0).any():
            raise ContractError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "classes", np.asarray(self.classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalReport:
    top1: float
    top5: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    mcc: float
    per_class: list  # dicts: class, support, top1, precision, recall, f1
    epsilon_security: float | None = None
    overhead_pct: float | None = None
    metadata: dict = field(default_factory=dict)


@dataclass
class AdversaryConfidenceCurve:
    levels: list
    mcc: list
    reports: list


def build_confusion(ranked_preds: np.ndarray, labels) -> ConfusionMatrix:
    """Tally Top-1 predictions against truth.

    ``ranked_preds`` is (n, k) class labels best-first (k >= 1), or (n,)
    plain predictions.
    """
    ranked_preds = np.asarray(ranked_preds)
    labels = np.asarray(labels)
    if len(ranked_preds) != len(labels):
        raise ContractError("predictions and labels differ in length")
    top1 = ranked_preds[:, 0] if ranked_preds.ndim == 2 else ranked_preds
    classes = np.unique(np.concatenate([labels, top1]))
    lut = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(labels, top1):
        counts[lut[t], lut[p]] += 1
    return ConfusionMatrix(classes, counts)


def batch_per_class_prf(counts: np.ndarray):
    """Vectorized one-vs-rest metrics for an (M, k, k) stack of matrices.

    Returns (precision, recall, f1, support), each (M, k); 0/0 -> 0.
    """
    c = np.asarray(counts, dtype=np.float64)
    tp = np.diagonal(c, axis1=-2, axis2=-1)
    fp = c.sum(axis=-2) - tp
    fn = c.sum(axis=-1) - tp
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    support = np.asarray(counts).sum(axis=-1)
    return precision, recall, f1, support


def batch_averaged_prf(counts: np.ndarray, averaging: str = "macro"):
    """Averaged (precision, recall, f1) per matrix in an (M, k, k) stack.

    Macro counts zero-support classes as 0; weighted gives them weight 0.
    """
    precision, recall, f1, support = batch_per_class_prf(counts)
    if averaging == "macro":
        return precision.mean(axis=-1), recall.mean(axis=-1), f1.mean(axis=-1)
    if averaging == "weighted":
        w = support / support.sum(axis=-1, keepdims=True)
        return (
            (precision * w).sum(axis=-1),
            (recall * w).sum(axis=-1),
            (f1 * w).sum(axis=-1),
        )
    raise ContractError(f"unknown averaging {averaging!r}")


def batch_mcc(counts: np.ndarray) -> np.ndarray:
    """Vectorized covariance-form MCC for an (M, k, k) stack; 0 on zero
    variance."""
    c = np.asarray(counts, dtype=np.float64)
    s = c.sum(axis=(-2, -1))
    correct = np.trace(c, axis1=-2, axis2=-1)
    t = c.sum(axis=-1)  # true-class totals
    p = c.sum(axis=-2)  # predicted-class totals
    cov_tp = correct * s - (t * p).sum(axis=-1)
    cov_tt = s * s - (t * t).sum(axis=-1)
    cov_pp = s * s - (p * p).sum(axis=-1)
    denom = np.sqrt(cov_tt) * np.sqrt(cov_pp)
    return np.clip(_safe_div(cov_tp, denom), -1.0, 1.0)


def per_class_prf(cm: ConfusionMatrix):
    """One-vs-rest (precision, recall, f1, support) per class; 0/0 -> 0."""
    precision, recall, f1, support = batch_per_class_prf(cm.counts[None])
    return precision[0], recall[0], f1[0], cm.counts.sum(axis=1)


def precision_recall_f1(cm: ConfusionMatrix, averaging: str = "macro"):
    """Averaged (precision, recall, f1).  Macro counts zero-support classes
    as 0; weighted excludes them (their weight is 0)."""
    if cm.total == 0:
        raise ContractError("empty confusion matrix")
    p, r, f = batch_averaged_prf(cm.counts[None], averaging)
    return float(p[0]), float(r[0]), float(f[0])


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation via the covariance form; 0 on zero variance.

    For two classes this equals
    (TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN)).
    """
    if cm.total == 0:
        raise ContractError("empty confusion matrix")
    return float(batch_mcc(cm.counts[None])[0])


def topk_accuracy(ranked_preds: np.ndarray, labels, k: int) -> float:
    """Fraction of samples whose true label is in the first k ranks."""
    ranked_preds = np.asarray(ranked_preds)
    labels = np.asarray(labels)
    if ranked_preds.ndim != 2 or ranked_preds.shape[1] < k:
        raise ContractError(f"rankings must provide at least k={k} entries")
    hits = (ranked_preds[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def evaluate_predictions(ranked_preds: np.ndarray, labels, metadata: dict | None = None) -> EvalReport:
    """Full metric report from ranked predictions."""
    ranked_preds = np.asarray(ranked_preds)
    labels = np.asarray(labels)
    cm = build_confusion(ranked_preds, labels)
    precision, recall, f1, support = per_class_prf(cm)
    pm, rm, fm = precision_recall_f1(cm, "macro")
    pw, rw, fw = precision_recall_f1(cm, "weighted")
    k_avail = ranked_preds.shape[1] if ranked_preds.ndim == 2 else 1
    per_class = []
    for i, cls in enumerate(cm.classes):
        mask = labels == cls
        row = {
            "class": _jsonable(cls),
            "support": int(support[i]),
            "top1": float((np.atleast_2d(ranked_preds.T).T[mask, 0] == cls).mean()) if mask.any() else 0.0,
            "precision": float(precision[i]),
            "recall": float(recall[i]),
            "f1": float(f1[i]),
        }
        if k_avail >= 5:
            row["top5"] = topk_accuracy(ranked_preds[mask], labels[mask], 5) if mask.any() else 0.0
        per_class.append(row)
    return EvalReport(
        top1=topk_accuracy(np.atleast_2d(ranked_preds.T).T, labels, 1),
        top5=topk_accuracy(ranked_preds, labels, min(5, k_avail)) if k_avail >= 5 else float("nan"),
        precision_macro=pm, recall_macro=rm, f1_macro=fm,
        precision_weighted=pw, recall_weighted=rw, f1_weighted=fw,
        mcc=mcc(cm),
        per_class=per_class,
        metadata=metadata or {},
    )


def epsilon_security(reports: list[EvalReport]) -> float:
    """Defense failure probability: Top-1 of the strongest attack on the
    defended data.  Lower means a stronger defense."""
    if not reports:
        raise ContractError("need at least one attack report")
    return max(r.top1 for r in reports)


def adversary_confidence_sweep(
    train_fn,
    eval_fn,
    x_train, y_train, x_test, y_test,
    levels,
    seed: int,
) -> AdversaryConfidenceCurve:
    """MCC as a function of attacker knowledge of the target's test data.

    At level q a seeded q-fraction of test windows joins the attacker's
    training set and evaluation runs on the remainder; level 1.0 trains on
    everything and evaluates on the full test set (the perfectly-informed
    adversary).  ``train_fn(x, y, seed) -> model``;
    ``eval_fn(model, x, y) -> EvalReport``.
    """
    levels = list(levels)
    if not levels:
        raise ContractError("levels must be non-empty")
    if any(not 0 <= q <= 1 for q in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ContractError("levels must be increasing fractions in [0, 1]")
    x_train = np.asarray(x_train)
    x_test = np.asarray(x_test)
    y_train = np.asarray(y_train)
    y_test = np.asarray(y_test)
    curve = AdversaryConfidenceCurve([], [], [])
    for li, q in enumerate(levels):
        rng = np.random.default_rng(np.uint64(seed) + np.uint64(li))
        n_test = len(x_test)
        if q >= 1.0:
            xt = np.concatenate([x_train, x_test])
            yt = np.concatenate([y_train, y_test])
            xe, ye = x_test, y_test
        else:
            n_leak = int(round(q * n_test))
            leak = rng.permutation(n_test)[:n_leak]
            keep = np.setdiff1d(np.arange(n_test), leak)
            xt = np.concatenate([x_train, x_test[leak]])
            yt = np.concatenate([y_train, y_test[leak]])
            xe, ye = x_test[keep], y_test[keep]
        model = train_fn(xt, yt, seed + li)
        report = eval_fn(model, xe, ye)
        curve.levels.append(q)
        curve.mcc.append(report.mcc)
        curve.reports.append(report)
    return curve


def fitted_slope(levels, values) -> float:
    """Least-squares slope of values over levels."""
    levels = np.asarray(levels, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    return float(np.polyfit(levels, values, 1)[0])


def report_to_dict(report: EvalReport) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "top1": report.top1,
        "top5": report.top5,
        "precision_macro": report.precision_macro,
        "recall_macro": report.recall_macro,
        "f1_macro": report.f1_macro,
        "precision_weighted": report.precision_weighted,
        "recall_weighted": report.recall_weighted,
        "f1_weighted": report.f1_weighted,
        "mcc": report.mcc,
        "per_class": report.per_class,
        "epsilon_security": report.epsilon_security,
        "overhead_pct": report.overhead_pct,
        "metadata": report.metadata,
    }


def report_from_dict(doc: dict) -> EvalReport:
    if doc.get("schema") != REPORT_SCHEMA:
        raise ContractError(f"unsupported report schema {doc.get('schema')!r}")
    fields = {k: v for k, v in doc.items() if k != "schema"}
    return EvalReport(**fields)


def render_table(report: EvalReport) -> str:
    """Deterministic fixed-width per-class table plus the aggregate row."""
    headers = ["class", "support", "top1", "top5", "mcc", "precision", "recall", "f1"]
    rows = []
    for row in report.per_class:
        rows.append([
            str(row["class"]), str(row["support"]),
            _fmt(row["top1"]), _fmt(row.get("top5")),
            "-", _fmt(row["precision"]), _fmt(row["recall"]), _fmt(row["f1"]),
        ])
    rows.append([
        "all", str(sum(r["support"] for r in report.per_class)),
        _fmt(report.top1), _fmt(report.top5), _fmt(report.mcc),
        _fmt(report.precision_weighted), _fmt(report.recall_weighted),
        _fmt(report.f1_weighted),
    ])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    for r in rows:
        lines.append(" | ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def emit_report(reports: list[EvalReport], path, wall_seconds: float | None = None) -> None:
    """Write the versioned JSON report plus a plain-text table rendering.

    The main JSON is a pure function of the reports so reruns are
    byte-identical; the wall-clock / peak-memory environment record goes
    to a ``.env.json`` sidecar instead.
    """
    if not reports:
        raise ContractError("no reports to emit")
    doc = {
        "schema": REPORT_SCHEMA,
        "reports": [report_to_dict(r) for r in reports],
    }
    env = {
        "python": platform.python_version(),
        "wall_seconds": wall_seconds,
        "peak_rss_kb": _peak_rss_kb(),
        "emitted_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(str(path) + ".env.json", "w", encoding="utf-8") as fh:
            json.dump(env, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(str(path) + ".txt", "w", encoding="utf-8") as fh:
            for r in reports:
                fh.write(render_table(r))
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"report emission failed for {path}: {exc}") from exc


def _peak_rss_kb():
    try:
        import resource

        return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)
    except Exception:  # pragma: no cover
        return None


def _safe_div(num, den):
    out = np.zeros_like(np.asarray(num, dtype=np.float64))
    nz = np.asarray(den) != 0
    out[nz] = np.asarray(num, dtype=np.float64)[nz] / np.asarray(den, dtype=np.float64)[nz]
    return out


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "-"
    return f"{v:.4f}"


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v
