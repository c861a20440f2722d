"""Instance segmentation scores: IoU matching, detection rates and SEG.

Detection metrics use one-to-one greedy matching by descending IoU at a
threshold; for thresholds >= 0.5 a pixel can give an instance at most one
partner with that much overlap, so the greedy matching is the unique
optimal one.  SEG follows the cell-tracking convention: a ground truth
object matches the prediction covering strictly more than half of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, ShapeError


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (gt id, pred id, IoU)
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _compact(mask: np.ndarray):
    """Map positive ids to 0..n-1; returns (index map, ids, sizes)."""
    ids = np.unique(mask)
    ids = ids[ids > 0]
    lut = np.zeros(int(mask.max()) + 1 if mask.size else 1, dtype=np.int64)
    lut[ids] = np.arange(1, len(ids) + 1)
    compact = lut[mask]
    sizes = np.bincount(compact.ravel(), minlength=len(ids) + 1)[1:]
    return compact, ids, sizes


def iou_matrix(gt, pred):
    """Pairwise IoU and overlap counts between positive instances.

    Returns (iou (G,P), overlap (G,P), gt_ids, pred_ids, gt_sizes, pred_sizes);
    background (label 0) is excluded on both sides.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    cg, gt_ids, gt_sizes = _compact(gt)
    cp, pred_ids, pred_sizes = _compact(pred)
    G, P = len(gt_ids), len(pred_ids)
    joint = np.bincount(
        (cg.ravel() * (P + 1) + cp.ravel()), minlength=(G + 1) * (P + 1)
    ).reshape(G + 1, P + 1)
    overlap = joint[1:, 1:]
    union = gt_sizes[:, None] + pred_sizes[None, :] - overlap
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, overlap / union, 0.0)
    return iou, overlap, gt_ids, pred_ids, gt_sizes, pred_sizes


def match_at_threshold(gt, pred, threshold: float) -> MatchResult:
    """Greedy one-to-one matching of instances with IoU >= threshold."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    iou, _, gt_ids, pred_ids, _, _ = iou_matrix(gt, pred)
    G, P = iou.shape
    cand = np.argwhere(iou >= threshold)
    order = sorted(
        (( -iou[g, p], gt_ids[g], pred_ids[p], g, p) for g, p in cand),
    )
    used_g = np.zeros(G, bool)
    used_p = np.zeros(P, bool)
    result = MatchResult()
    for _, gid, pid, g, p in order:
        if used_g[g] or used_p[p]:
            continue
        used_g[g] = used_p[p] = True
        result.pairs.append((int(gid), int(pid), float(iou[g, p])))
    result.tp = len(result.pairs)
    result.fp = P - result.tp
    result.fn = G - result.tp
    return result


def scores_from_counts(tp: int, fp: int, fn: int) -> dict:
    """Recall, precision, F1 and detection accuracy; empty denominators give 0."""
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    return {"f1": f1, "recall": recall, "precision": precision, "accuracy": accuracy}


def detection_scores(match: MatchResult) -> dict:
    return scores_from_counts(match.tp, match.fp, match.fn)


def seg_score(gt, pred) -> float:
    """Mean IoU over ground truth objects, matched only when the prediction
    covers strictly more than half the object; unmatched objects score 0."""
    iou, overlap, gt_ids, _, gt_sizes, _ = iou_matrix(gt, pred)
    if len(gt_ids) == 0:
        raise DegenerateError("no ground truth objects")
    total = 0.0
    for g in range(len(gt_ids)):
        covering = np.flatnonzero(overlap[g] * 2 > gt_sizes[g])
        if len(covering):
            total += float(iou[g, covering[0]])  # at most one can qualify
    return total / len(gt_ids)


def seg_score_dataset(gt_masks, pred_masks) -> float:
    """SEG pooled over all ground truth objects of a dataset."""
    total = 0.0
    objects = 0
    for gt, pred in zip(gt_masks, pred_masks):
        iou, overlap, gt_ids, _, gt_sizes, _ = iou_matrix(gt, pred)
        objects += len(gt_ids)
        for g in range(len(gt_ids)):
            covering = np.flatnonzero(overlap[g] * 2 > gt_sizes[g])
            if len(covering):
                total += float(iou[g, covering[0]])
    if objects == 0:
        raise DegenerateError("no ground truth objects")
    return total / objects


def threshold_sweep(gt_masks, pred_masks, thresholds, per_image: bool = False):
    """Detection scores per IoU threshold over a dataset.

    By default TP/FP/FN counts are pooled over all images before scoring;
    with ``per_image`` the scores are averaged over images instead.  Returns
    rows of (metric, threshold, value).
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("empty threshold list")
    if len(gt_masks) != len(pred_masks):
        raise ShapeError("gt and prediction counts differ")
    rows = []
    for t in thresholds:
        if per_image:
            acc: dict[str, list] = {}
            for gt, pred in zip(gt_masks, pred_masks):
                for k, v in detection_scores(match_at_threshold(gt, pred, t)).items():
                    acc.setdefault(k, []).append(v)
            scores = {k: float(np.mean(v)) for k, v in acc.items()}
        else:
            tp = fp = fn = 0
            for gt, pred in zip(gt_masks, pred_masks):
                m = match_at_threshold(gt, pred, t)
                tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
            scores = scores_from_counts(tp, fp, fn)
        for key in ("f1", "recall", "precision", "accuracy"):
            rows.append((key, float(t), scores[key]))
    return rows


def format_score_table(rows) -> str:
    """UTF-8 tab-separated table with the fixed (metric, threshold, value) header."""
    lines = ["metric\tthreshold\tvalue"]
    for metric, threshold, value in rows:
        lines.append(f"{metric}\t{threshold:g}\t{value:.6f}")
    return "\n".join(lines) + "\n"
