"""IoU family, foreground coverage/precision and the point-level matching baseline."""
from __future__ import annotations

import csv
import io
import json

import numpy as np

from .numerics import pairwise_cosine
from .slm import threshold_argmax


def _pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def iou(pred, gt, class_id: int) -> float:
    pred, gt = _pair(pred, gt)
    p, g = pred == class_id, gt == class_id
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def mean_iou(results, class_ids, include_absent: bool = False) -> float:
    """Mean per-class IoU with TP/FP/FN pooled over all ``(pred, gt)`` pairs.

    A class absent from both prediction and ground truth everywhere is
    skipped unless ``include_absent`` is set, in which case it scores 1.
    """
    class_ids = list(class_ids)
    if not class_ids:
        raise ValueError("mean IoU needs at least one class")
    if isinstance(results, tuple) and len(results) == 2 and np.ndim(results[0]) == 1:
        results = [results]
    pairs = [_pair(p, g) for p, g in results]
    scores = []
    for c in class_ids:
        tp = fp = fn = 0
        for p, g in pairs:
            pc, gc = p == c, g == c
            tp += int(np.sum(pc & gc))
            fp += int(np.sum(pc & ~gc))
            fn += int(np.sum(~pc & gc))
        if tp + fp + fn == 0:
            if include_absent:
                scores.append(1.0)
            continue
        scores.append(tp / (tp + fp + fn))
    if not scores:
        return 1.0
    return float(np.mean(scores))


def _as_set(x) -> set:
    arr = np.asarray(x) if not isinstance(x, (set, frozenset)) else None
    if arr is None:
        return set(x)
    if arr.dtype == bool:
        return set(np.flatnonzero(arr).tolist())
    return set(arr.ravel().tolist())


def coverage_rate(pred_fg, gt_fg) -> float:
    """|pred ∩ gt| / |gt|. Inputs are index collections or boolean masks."""
    p, g = _as_set(pred_fg), _as_set(gt_fg)
    if not g:
        raise ValueError("coverage needs a non-empty ground-truth foreground")
    return len(p & g) / len(g)


def precision_rate(pred_fg, gt_fg) -> float:
    """|pred ∩ gt| / |pred|, and 1.0 when nothing is selected."""
    p, g = _as_set(pred_fg), _as_set(gt_fg)
    if not p:
        return 1.0
    return len(p & g) / len(p)


def fg_rates(pred, gt) -> tuple:
    """Coverage and precision where a selected point counts as correct only
    if its predicted class matches the ground truth."""
    pred, gt = _pair(pred, gt)
    selected = pred > 0
    gt_fg = gt > 0
    correct = selected & (pred == gt)
    cov = float(correct.sum() / gt_fg.sum()) if gt_fg.any() else float("nan")
    prec = float(correct.sum() / selected.sum()) if selected.any() else 1.0
    return cov, prec


def pointlevel_baseline(prototypes, F_q, tau: float = 0.7) -> np.ndarray:
    """Label each query point by its most similar class prototype if above ``tau``."""
    P = np.atleast_2d(np.asarray(prototypes, dtype=np.float32))
    return threshold_argmax(pairwise_cosine(P, F_q), tau)


REPORT_FIELDS = ("episode", "miou", "coverage", "precision", "self_loss")


def format_float(x) -> float | None:
    """Round for stable text output; NaN becomes null."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return None
    return round(float(x), 6)


def records_to_json(records: list) -> str:
    return json.dumps(records, indent=2, sort_keys=True) + "\n"


def records_to_csv(records: list, fields=REPORT_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return buf.getvalue()
