"""A second, deliberately plain implementation of COCO-style single-class metrics.

Written with Python loops and corner-form geometry so it shares no code with
the package evaluator.
"""
import numpy as np

THRESHOLDS = [0.5 + 0.05 * i for i in range(10)]


def _corners(b):
    cx, cy, w, h = (float(v) for v in b)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b):
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def frame_flags(boxes, scores, gts, thr, max_dets=100):
    ranked = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))[:max_dets]
    taken = [False] * len(gts)
    out = []
    for i in ranked:
        best, best_iou = -1, thr
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(boxes[i], g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        out.append((float(scores[i]), best >= 0))
    return out


def ap_from_flags(flags, n_gt):
    if n_gt == 0 or not flags:
        return 0.0
    flags = sorted(flags, key=lambda f: -f[0])
    tp = fp = 0
    prec, rec = [], []
    for _, hit in flags:
        tp += hit
        fp += not hit
        prec.append(tp / (tp + fp))
        rec.append(tp / n_gt)
    total = 0.0
    for k in range(101):
        r = k / 100
        cands = [p for p, q in zip(prec, rec) if q >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 101


def reference_metrics(preds, gts):
    n_gt = sum(len(g) for g in gts.values())
    aps, recalls = [], []
    for thr in THRESHOLDS:
        flags = []
        for fid, g in gts.items():
            p = preds[fid]
            flags += frame_flags(list(p["boxes"]), list(p["scores"]), list(g), thr)
        aps.append(ap_from_flags(flags, n_gt))
        recalls.append(sum(hit for _, hit in flags) / n_gt if n_gt else 0.0)
    return {"AP": sum(aps) / len(aps), "AP50": aps[0], "AP75": aps[5], "AR100": sum(recalls) / len(recalls)}


def random_scenario(rng, n_frames=20):
    """Ground truth plus jittered, duplicated and spurious detections with distinct scores."""
    gts, preds = {}, {}
    for f in range(n_frames):
        k = int(rng.integers(0, 4))
        g = np.column_stack([rng.uniform(0.2, 0.8, (k, 2)), rng.uniform(0.05, 0.3, (k, 2))])
        boxes = []
        for b in g:
            for _ in range(int(rng.integers(0, 3))):
                boxes.append(b + rng.normal(0, 0.03, 4) * [1, 1, 0.5, 0.5])
        for _ in range(int(rng.integers(0, 3))):
            boxes.append([*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.3, 2)])
        boxes = np.abs(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
        gts[f"f{f}"] = g
        preds[f"f{f}"] = {"boxes": boxes, "scores": rng.random(len(boxes))}
    return preds, gts
