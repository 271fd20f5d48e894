"""Evaluation metrics: IoU/mIoU with exact integer counters, the loose
overlap-tolerant protocol, existence-detection AP/precision/recall, and the
per-task mIoU curve matrix."""

import numpy as np


class MetricsError(Exception):
    pass


def iou_counts(pred, truth, classes):
    """Exact TP/FP/FN pixel counters per class, summed over an image set."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricsError(f"prediction shape {pred.shape} does not match "
                           f"truth shape {truth.shape}")
    counts = {}
    for c in classes:
        p = pred == c
        t = truth == c
        tp = int(np.count_nonzero(p & t))
        fp = int(np.count_nonzero(p & ~t))
        fn = int(np.count_nonzero(~p & t))
        counts[c] = (tp, fp, fn)
    return counts


def merge_counts(parts):
    """Order-independent reduction of per-class integer counters."""
    total = {}
    for part in parts:
        for c, (tp, fp, fn) in part.items():
            otp, ofp, ofn = total.get(c, (0, 0, 0))
            total[c] = (otp + tp, ofp + fp, ofn + fn)
    return total


def iou_from_counts(counts):
    """Per-class IoU; classes never predicted nor present are excluded."""
    out = {}
    for c, (tp, fp, fn) in counts.items():
        denom = tp + fp + fn
        if denom > 0:
            out[c] = tp / denom
    return out


def miou(preds, truths, classes, include_background=True):
    """Per-class IoU and their unweighted mean over an image set."""
    cls = list(classes)
    if include_background and 0 not in cls:
        cls = [0] + cls
    counts = iou_counts(preds, truths, cls)
    per_class = iou_from_counts(counts)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def resolve_loose(claims, fallback_pred, truth):
    """Loose protocol: a pixel whose ground-truth class is among the claimants
    is credited to that class; otherwise the single-choice fallback stands."""
    label = np.asarray(fallback_pred).copy()
    truth = np.asarray(truth)
    for c, mask in claims.items():
        win = mask & (truth == c)
        label[win] = c
    return label


def miou_loose(claims_list, fallback_preds, truths, classes,
               include_background=True):
    """mIoU under the loose protocol over a list of images."""
    resolved = np.stack([resolve_loose(cl, fp, tr) for cl, fp, tr in
                         zip(claims_list, fallback_preds, truths)])
    return miou(resolved, np.stack([np.asarray(t) for t in truths]), classes,
                include_background)


def average_precision(scores, labels):
    """AP as the mean of precision measured at each positive, scores sorted
    descending (stable)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] > 0
    n_pos = int(hits.sum())
    if n_pos == 0:
        return None
    cum = np.cumsum(hits)
    precision_at = cum / (np.arange(hits.size) + 1)
    return float(precision_at[hits].sum() / n_pos)


def phase1_metrics(scores, presence, alpha=0.5):
    """Existence-detection quality: mAP over classes plus micro-averaged
    precision/recall at the operating threshold.

    scores: (N, C) router probabilities; presence: (N, C) 0/1 ground truth.
    """
    scores = np.asarray(scores, dtype=np.float64)
    presence = np.asarray(presence)
    aps = []
    for j in range(scores.shape[1]):
        ap = average_precision(scores[:, j], presence[:, j])
        if ap is not None:
            aps.append(ap)
    decided = scores >= alpha
    truth = presence > 0
    tp = int(np.count_nonzero(decided & truth))
    fp = int(np.count_nonzero(decided & ~truth))
    fn = int(np.count_nonzero(~decided & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {"mAP": float(np.mean(aps)) if aps else 0.0,
            "precision": float(precision), "recall": float(recall),
            "alpha": float(alpha)}


def curve_matrix(entries, n_tasks):
    """Per-task mIoU curve: rows = task whose classes are scored, columns =
    checkpoint after which they are evaluated; NaN below the diagonal."""
    m = np.full((n_tasks, n_tasks), np.nan)
    for (learned_t, eval_t), value in entries.items():
        if eval_t < learned_t:
            raise MetricsError(f"task {learned_t} cannot be evaluated before "
                               f"it is learned (checkpoint {eval_t})")
        m[learned_t - 1, eval_t - 1] = value
    for t in range(1, n_tasks + 1):
        missing = [e for e in range(t, n_tasks + 1)
                   if np.isnan(m[t - 1, e - 1])]
        if missing:
            raise MetricsError(f"missing checkpoint evaluations for task {t}: "
                               f"{missing}")
    return m


def group_miou(per_class, old_classes, new_classes):
    """Grouped means in the old/new/all column convention."""
    def mean_over(cs):
        vals = [per_class[c] for c in cs if c in per_class]
        return float(np.mean(vals)) if vals else 0.0
    all_cs = sorted(per_class)
    return {"old": mean_over(old_classes), "new": mean_over(new_classes),
            "all": mean_over(all_cs)}
