"""Supervised clip objective: per-frame set losses plus the query-diffusion loss."""
from __future__ import annotations

import numpy as np

from . import diffusion as D
from . import tensor as T
from .detr import SVDETR
from .matching import LOSS_WEIGHTS, set_loss
from .temporal import ClipPrediction, propagate_clip
from .tensor import Tensor

DIFFUSION_INIT_PROB = 0.5


def detection_loss(pred: ClipPrediction, targets, weights=LOSS_WEIGHTS) -> dict:
    """Set loss per decoder application over every frame, summed across applications.

    ``targets[b][t]`` holds the (n, 4) gt boxes of clip ``b``, frame ``t``.
    """
    n_app = len(pred.outputs[0].detections)
    flat_targets = [clip_targets[t] for t in range(len(pred.outputs)) for clip_targets in targets]
    out = None
    for a in range(n_app):
        logits = T.concat([o.detections[a].logits for o in pred.outputs], axis=0)
        boxes = T.concat([o.detections[a].boxes for o in pred.outputs], axis=0)
        part = set_loss(logits, boxes, flat_targets, weights)
        if out is None:
            out = part
            out["assignments"] = [part["assignments"]]
        else:
            for k in ("loss_cls", "loss_l1", "loss_giou", "total"):
                out[k] = out[k] + part[k]
            out["assignments"].append(part["assignments"])
    return out


def diffusion_loss(model: SVDETR, pred: ClipPrediction, rng: np.random.Generator) -> Tensor:
    """Teach the denoiser to produce the last frame's refined queries from frame-1 memory.

    Targets are detached and normalised by the model's running query statistics.
    """
    x0 = pred.outputs[-1].queries.content.data
    model.query_norm.update(x0)
    x0 = model.query_norm.normalize(x0).astype(x0.dtype)
    memory = pred.memories[0].tokens.detach()
    return D.diffusion_train_step(x0, memory, model.schedule, model.denoiser, rng)


def clip_loss(model: SVDETR, frames, targets, rng: np.random.Generator,
              weights=LOSS_WEIGHTS, diffusion_weight: float = 1.0) -> dict:
    """Forward a (B, T, H, W) batch of labeled clips and compute every supervised term.

    Frame-1 queries come from the diffusion sampler (stochastic) with
    probability one half once the query statistics exist, otherwise from the
    learned embeddings.
    """
    use_diff = bool(model.cfg.use_diffusion and model.query_norm.initialised.data[0] > 0
                    and rng.random() < DIFFUSION_INIT_PROB)
    pred = propagate_clip(model, frames, rng=rng, use_diffusion=use_diff, stochastic=True)
    losses = detection_loss(pred, targets, weights)
    total = losses["total"]
    if model.cfg.use_diffusion and diffusion_weight > 0:
        l_diff = diffusion_loss(model, pred, rng)
        total = total + l_diff * diffusion_weight
    else:
        l_diff = Tensor(np.zeros((), dtype=total.dtype))
    losses.update(total=total, loss_diff=l_diff, prediction=pred)
    return losses
