"""COCO-style detection metrics for single-class lesion detection.

Predictions and ground truth are keyed by frame id. Boxes are normalised
centre-form ``(cx, cy, w, h)``; IoU is scale invariant so no pixel
conversion is needed.
"""
from __future__ import annotations

import json
import warnings

import numpy as np

from . import kernels
from .matching import box_iou

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100
RECALL_SLACK = 1e-12


def match_detections(pred_boxes, scores, gt_boxes, iou_threshold: float):
    """Greedy score-ordered matching of one frame's predictions.

    Returns (order, matched_gt): predictions sorted by descending score
    (stable) and, per sorted prediction, the matched gt index or -1.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    iou = box_iou(pred_boxes[order], gt_boxes)
    return order, kernels.greedy_match(iou, float(iou_threshold))


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a score-sorted true-positive vector."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # the slack keeps a recall of exactly k/100 (e.g. 7/25) from rounding below its grid point
    idx = np.searchsorted(recall, RECALL_POINTS - RECALL_SLACK, side="left")
    q = np.zeros(len(RECALL_POINTS))
    valid = idx < len(recall)
    q[valid] = envelope[idx[valid]]
    return float(q.mean())


def _gather(preds: dict, gts: dict, iou_threshold: float, max_dets: int = MAX_DETS):
    """Pool per-frame matches; returns (scores, tp flags, n_gt)."""
    all_scores, all_tp = [], []
    n_gt = 0
    for fid, gt in gts.items():
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        n_gt += len(gt)
        p = preds.get(fid)
        if p is None:
            continue
        boxes = np.asarray(p["boxes"], dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(p["scores"], dtype=np.float64).reshape(-1)
        order, matched = match_detections(boxes, scores, gt, iou_threshold)
        keep = order[:max_dets]
        all_scores.append(scores[keep])
        all_tp.append((matched[:max_dets] >= 0).astype(np.float64))
    for fid in preds:
        if fid not in gts:
            raise KeyError(f"prediction for unknown frame {fid!r}")
    if not all_scores:
        return np.zeros(0), np.zeros(0), n_gt
    scores = np.concatenate(all_scores)
    tp = np.concatenate(all_tp)
    order = np.argsort(-scores, kind="stable")
    return scores[order], tp[order], n_gt


def average_precision(preds: dict, gts: dict, iou_threshold: float = 0.5, max_dets: int = MAX_DETS) -> float:
    """AP at one IoU threshold. No ground truth at all gives 0 with a warning."""
    _, tp, n_gt = _gather(preds, gts, iou_threshold, max_dets)
    if n_gt == 0:
        warnings.warn("average_precision: no ground-truth boxes; AP reported as 0", RuntimeWarning)
        return 0.0
    return interpolated_ap(tp, n_gt)


def evaluate(preds: dict, gts: dict) -> dict:
    """AP (mean over 0.50:0.05:0.95), AP50, AP75 and AR@100.

    Every gt frame needs a prediction entry (possibly with no boxes).
    """
    missing = sorted(set(gts) - set(preds))
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise ValueError(f"evaluate: {len(missing)} frames without predictions: {shown}")
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in gts.values())
    if n_gt == 0:
        warnings.warn("evaluate: no ground-truth boxes; metrics reported as 0", RuntimeWarning)
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0, "AR100": 0.0, "n_gt": 0, "n_frames": len(gts)}
    aps, recalls = [], []
    for thr in IOU_THRESHOLDS:
        _, tp, _ = _gather(preds, gts, thr)
        aps.append(interpolated_ap(tp, n_gt))
        recalls.append(tp.sum() / n_gt)
    return {"AP": float(np.mean(aps)), "AP50": aps[0], "AP75": aps[5], "AR100": float(np.mean(recalls)),
            "n_gt": int(n_gt), "n_frames": len(gts)}


def format_table(metrics: dict) -> str:
    keys = ["AP", "AP50", "AP75", "AR100"]
    head = " ".join(f"{k:>7}" for k in keys)
    row = " ".join(f"{metrics[k]:7.4f}" for k in keys)
    return f"{head}\n{row}"


def save_predictions(preds: dict, path) -> None:
    """Write a JSON list of ``{"frame_id", "bbox": [cx, cy, w, h], "score"}`` records.

    Frames with no boxes get a record with ``bbox`` null so coverage survives a round trip.
    """
    records = []
    for fid in sorted(preds):
        boxes = np.asarray(preds[fid]["boxes"], dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(preds[fid]["scores"], dtype=np.float64).reshape(-1)
        if len(boxes) == 0:
            records.append({"frame_id": fid, "bbox": None, "score": None})
        for b, sc in zip(boxes, scores):
            records.append({"frame_id": fid, "bbox": [float(v) for v in b], "score": float(sc)})
    with open(path, "w") as fh:
        json.dump(records, fh)


def load_predictions(path) -> dict:
    with open(path) as fh:
        records = json.load(fh)
    boxes: dict[str, list] = {}
    scores: dict[str, list] = {}
    for r in records:
        boxes.setdefault(r["frame_id"], [])
        scores.setdefault(r["frame_id"], [])
        if r.get("bbox") is not None:
            boxes[r["frame_id"]].append(r["bbox"])
            scores[r["frame_id"]].append(r["score"])
    return {fid: {"boxes": np.asarray(boxes[fid], dtype=np.float64).reshape(-1, 4),
                  "scores": np.asarray(scores[fid], dtype=np.float64)} for fid in boxes}
