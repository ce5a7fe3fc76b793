"""Box geometry, bipartite assignment and the per-frame set-prediction loss.

Boxes are normalised ``(cx, cy, w, h)`` unless a function says otherwise.
Class index 0 is the lesion class; the last index is "no object".
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import Tensor

LOSS_WEIGHTS = (1.0, 5.0, 2.0)  # (class, L1, GIoU)
NO_OBJECT_WEIGHT = 0.1


# -- geometry (numpy) ----------------------------------------------------------
def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b):
    b = np.asarray(b, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _pairwise_terms(a, b):
    """IoU, union and enclosing area for every pair of corner-form boxes."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = ew * eh
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return iou, union, enclose


def box_iou_xyxy(a, b) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) corner-form boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    return _pairwise_terms(a, b)[0]


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) centre-form boxes."""
    return box_iou_xyxy(cxcywh_to_xyxy(np.reshape(a, (-1, 4))), cxcywh_to_xyxy(np.reshape(b, (-1, 4))))


def pairwise_giou_xyxy(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iou, union, enclose = _pairwise_terms(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        penalty = np.where(enclose > 0, (enclose - union) / np.where(enclose > 0, enclose, 1), 0.0)
    return iou - penalty


def giou_xyxy(a, b) -> float:
    """Generalised IoU of two corner-form boxes.

    A zero-area union contributes an IoU term of 0, and a zero-area
    enclosing box contributes no penalty.
    """
    return float(pairwise_giou_xyxy(np.reshape(a, (1, 4)), np.reshape(b, (1, 4)))[0, 0])


def giou(a, b) -> float:
    """Generalised IoU of two centre-form boxes."""
    return giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))


def giou_tensor(pred: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Differentiable element-wise GIoU between (M, 4) centre-form boxes."""
    target = np.asarray(target, dtype=pred.dtype)
    tx = cxcywh_to_xyxy(target).astype(pred.dtype)
    cx, cy, w, h = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    x1, y1, x2, y2 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    tx1, ty1, tx2, ty2 = (Tensor(tx[:, i]) for i in range(4))
    area_p = w * h
    area_t = Tensor(target[:, 2] * target[:, 3])
    iw = T.clamp_min(T.minimum(x2, tx2) - T.maximum(x1, tx1), 0.0)
    ih = T.clamp_min(T.minimum(y2, ty2) - T.maximum(y1, ty1), 0.0)
    inter = iw * ih
    union = area_p + area_t - inter
    iou = inter / (union + eps)
    ew = T.maximum(x2, tx2) - T.minimum(x1, tx1)
    eh = T.maximum(y2, ty2) - T.minimum(y1, ty1)
    enclose = ew * eh
    return iou - (enclose - union) / (enclose + eps)


# -- assignment -------------------------------------------------------------------
@dataclass
class Assignment:
    """Ground-truth index ``i`` is matched to prediction ``pred_index[i]``."""

    pred_index: np.ndarray
    cost: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in enumerate(self.pred_index)]


def hungarian(cost) -> Assignment:
    """Minimum-total-cost injective assignment of rows (gts) to columns (predictions)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"hungarian: expected a 2-D cost matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise ValueError(f"hungarian: {n} ground truths exceed {m} predictions")
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    cols = kernels.linear_sum_assignment(cost)
    return Assignment(cols, float(cost[np.arange(n), cols].sum()))


def match_cost(probs, boxes, gt_boxes, weights=LOSS_WEIGHTS) -> np.ndarray:
    """(n_gt, N) matching cost: -w_cls * p_lesion + w_l1 * L1 + w_giou * (1 - GIoU).

    ``probs`` is (N, C+1) softmax output, ``boxes`` (N, 4), ``gt_boxes`` (n_gt, 4).
    """
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.zeros((0, len(boxes)))
    w_cls, w_l1, w_giou = weights
    c_cls = -probs[None, :, 0]
    c_l1 = np.abs(gt_boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    c_giou = 1.0 - pairwise_giou_xyxy(cxcywh_to_xyxy(gt_boxes), cxcywh_to_xyxy(boxes))
    return w_cls * c_cls + w_l1 * c_l1 + w_giou * c_giou


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def set_loss(logits: Tensor, boxes: Tensor, targets, weights=LOSS_WEIGHTS,
             no_object_weight: float = NO_OBJECT_WEIGHT) -> dict:
    """Hungarian-matched DETR loss over a batch of frames.

    ``logits`` (F, N, C+1) and ``boxes`` (F, N, 4) are one frame per row;
    ``targets`` is a length-F list of (n_f, 4) gt boxes (all lesions).
    Cross-entropy covers every query (unmatched -> no-object, down-weighted);
    L1 and GIoU cover matched pairs and are normalised by the gt count.
    Returns Tensors ``loss_cls``, ``loss_l1``, ``loss_giou``, ``total`` plus
    the per-frame ``assignments``.
    """
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        boxes = boxes.reshape(1, *boxes.shape)
        targets = [targets]
    f, n, c1 = logits.shape
    if len(targets) != f:
        raise ValueError(f"set_loss: {f} frames but {len(targets)} target lists")
    no_obj = c1 - 1
    probs = _softmax_np(logits.data.astype(np.float64))
    classes = np.full((f, n), no_obj, dtype=np.int64)
    frame_idx, query_idx, gt_rows, assignments = [], [], [], []
    for i, gt in enumerate(targets):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        if len(gt) == 0:
            assignments.append(Assignment(np.zeros(0, dtype=np.int64), 0.0))
            continue
        a = hungarian(match_cost(probs[i], boxes.data[i], gt, weights))
        assignments.append(a)
        classes[i, a.pred_index] = 0
        frame_idx.extend([i] * len(gt))
        query_idx.extend(a.pred_index.tolist())
        gt_rows.append(gt)
    class_weight = np.ones(c1)
    class_weight[no_obj] = no_object_weight
    loss_cls = T.cross_entropy(logits, classes, class_weight)
    n_boxes = max(len(frame_idx), 1)
    if frame_idx:
        matched = boxes[(np.asarray(frame_idx), np.asarray(query_idx))]
        target = np.concatenate(gt_rows).astype(boxes.dtype)
        loss_l1 = T.tabs(matched - Tensor(target)).sum() * (1.0 / n_boxes)
        loss_giou = (1.0 - giou_tensor(matched, target)).sum() * (1.0 / n_boxes)
    else:
        loss_l1 = Tensor(np.zeros((), dtype=boxes.dtype))
        loss_giou = Tensor(np.zeros((), dtype=boxes.dtype))
    w_cls, w_l1, w_giou = weights
    total = loss_cls * w_cls + loss_l1 * w_l1 + loss_giou * w_giou
    return {"loss_cls": loss_cls, "loss_l1": loss_l1, "loss_giou": loss_giou, "total": total,
            "assignments": assignments}
