"""Supervised and semi-supervised training loops, prediction and evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from . import tensor as T
from .checkpoint import save_model
from .data import AugPolicy, Clip, augment, frame_ids
from .detr import SVDETR
from .nn import AdamW, step_decay
from .objectives import clip_loss
from .ssl import DEFAULT_ALIGNMENT, TeacherStudent, ssl_train_step
from .temporal import propagate_clip

log = logging.getLogger(__name__)

LOG_KEYS = ("epoch", "step", "loss_total", "loss_cls", "loss_box", "loss_giou", "loss_diff", "loss_cons", "val_ap50")


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    clip_norm: float | None = 1.0
    batch_clips: int = 4  # clips per optimiser update
    decay_every: int = 0  # epochs between x0.1 lr decays; 0 disables
    decay_factor: float = 0.1
    seed: int = 0
    eval_every: int = 5
    checkpoint_every: int = 10
    augment: dict = field(default_factory=dict)  # AugPolicy overrides for the strong view
    mask_ramp_fraction: float = 0.3  # mask count rises linearly from 0 over this fraction of epochs
    # semi-supervised
    alpha: float = 0.99
    lambda_u: float = 1.0
    ramp_fraction: float = 0.1
    alignment: tuple = DEFAULT_ALIGNMENT
    unlabeled_per_step: int = 4

    def policy(self) -> AugPolicy:
        return AugPolicy(**self.augment)

    def to_dict(self) -> dict:
        return asdict(self)


class NonFiniteLoss(FloatingPointError):
    pass


def clips_to_batch(clips: list[Clip]) -> tuple[np.ndarray, list]:
    frames = np.stack([c.frames for c in clips])
    targets = [list(c.annotations) for c in clips]
    return frames, targets


def _lr_for(cfg: TrainConfig, epoch: int) -> float:
    return step_decay(cfg.lr, epoch, cfg.decay_every, cfg.decay_factor)


def _policy_for(cfg: TrainConfig, policy: AugPolicy, epoch: int) -> AugPolicy:
    """Labeled-batch policy for ``epoch`` with the mask count on its curriculum."""
    ramp = cfg.mask_ramp_fraction * cfg.epochs
    if ramp <= 0 or epoch >= ramp:
        return policy
    return replace(policy, mask_count=int(policy.mask_count * epoch / ramp))


def supervised_step(model: SVDETR, optimizer: AdamW, frames, targets, rng: np.random.Generator) -> dict:
    """One optimiser update on a batch of labeled clips."""
    optimizer.zero_grad()
    losses = clip_loss(model, frames, targets, rng)
    total = losses["total"]
    if not np.isfinite(total.data).all():
        raise NonFiniteLoss("non-finite supervised loss")
    total.backward()
    optimizer.step()
    return {"loss_total": float(total.data), "loss_cls": float(losses["loss_cls"].data),
            "loss_l1": float(losses["loss_l1"].data), "loss_giou": float(losses["loss_giou"].data),
            "loss_diff": float(losses["loss_diff"].data), "loss_cons": 0.0}


def _dump_batch(out_dir, batch_ids, epoch, step, err) -> None:
    if out_dir is None:
        return
    with open(Path(out_dir) / "nonfinite_batch.json", "w") as fh:
        json.dump({"epoch": epoch, "step": step, "clip_ids": batch_ids, "error": str(err)}, fh, indent=1)


class _Logger:
    def __init__(self, path):
        self.fh = open(path, "a") if path is not None else None
        self.records = []

    def write(self, rec: dict) -> None:
        rec = {k: rec.get(k) for k in LOG_KEYS}
        self.records.append(rec)
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=False) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _epoch_record(epoch, step, rows, val_ap50):
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}
    return {"epoch": epoch, "step": step, "loss_total": mean.get("loss_total"),
            "loss_cls": mean.get("loss_cls"), "loss_box": mean.get("loss_l1"),
            "loss_giou": mean.get("loss_giou"), "loss_diff": mean.get("loss_diff"),
            "loss_cons": mean.get("loss_cons"), "val_ap50": val_ap50}


def _maybe_eval(model, val_clips, cfg, epoch, is_last):
    if not val_clips or cfg.eval_every <= 0:
        return None
    if (epoch + 1) % cfg.eval_every and not is_last:
        return None
    return evaluate_model(model, val_clips)["AP50"]


def train_supervised(model: SVDETR, train_clips: list[Clip], cfg: TrainConfig, val_clips=None,
                     out_dir=None, log_path=None, time_budget: float | None = None,
                     optimizer: AdamW | None = None) -> dict:
    """Train on labeled clips; returns {"records", "steps", "best_val_ap50", "optimizer"}.

    Data order and augmentation come from ``cfg.seed`` only. Checkpoints
    (``last.ckpt``, ``best.ckpt`` and every ``checkpoint_every`` epochs) go to
    ``out_dir`` when given.
    """
    labeled = [c for c in train_clips if c.labeled]
    if not labeled:
        raise ValueError("train_supervised: no labeled clips")
    data_rng = np.random.default_rng([cfg.seed, 0])
    model_rng = np.random.default_rng([cfg.seed, 1])
    opt = optimizer or AdamW(model.parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay,
                             clip_norm=cfg.clip_norm)
    policy = cfg.policy()
    logger = _Logger(log_path)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    step, best = 0, -1.0
    start = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            opt.lr = _lr_for(cfg, epoch)
            epoch_policy = _policy_for(cfg, policy, epoch)
            rows = []
            order = data_rng.permutation(len(labeled))
            for i in range(0, len(order), cfg.batch_clips):
                batch = [augment(labeled[j], epoch_policy, int(data_rng.integers(2**31))) for j in order[i:i + cfg.batch_clips]]
                frames, targets = clips_to_batch(batch)
                try:
                    rows.append(supervised_step(model, opt, frames, targets, model_rng))
                except NonFiniteLoss as err:
                    _dump_batch(out_dir, [labeled[j].id for j in order[i:i + cfg.batch_clips]], epoch, step, err)
                    raise
                step += 1
            over = time_budget is not None and time.perf_counter() - start > time_budget
            is_last = epoch == cfg.epochs - 1 or over
            val = _maybe_eval(model, val_clips, cfg, epoch, is_last)
            logger.write(_epoch_record(epoch, step, rows, val))
            log.info("epoch %d step %d loss %.4f val_ap50 %s", epoch, step, logger.records[-1]["loss_total"], val)
            if out_dir is not None:
                _save_epoch(out_dir, model, epoch, data_rng, cfg, val, best, is_last)
            if val is not None and val > best:
                best = val
            if over:
                log.info("time budget reached after epoch %d", epoch)
                break
    finally:
        logger.close()
    return {"records": logger.records, "steps": step, "best_val_ap50": best, "optimizer": opt}


def _save_epoch(out_dir, model, epoch, rng, cfg, val, best, is_last, student=None):
    out_dir = Path(out_dir)
    state = rng.bit_generator.state
    extra = {"train_config": cfg.to_dict()}
    if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
        save_model(out_dir / f"epoch{epoch + 1:04d}.ckpt", model, epoch + 1, state, student, extra)
    if val is not None and val > best:
        save_model(out_dir / "best.ckpt", model, epoch + 1, state, student, extra)
    if is_last:
        save_model(out_dir / "last.ckpt", model, epoch + 1, state, student, extra)


def train_debus(student: SVDETR, labeled_clips: list[Clip], unlabeled_clips: list[Clip], cfg: TrainConfig,
                val_clips=None, out_dir=None, log_path=None, time_budget: float | None = None) -> dict:
    """Mean-teacher training from a (supervised warm-started) student.

    Labeled batches follow exactly the supervised loop's random streams; the
    unlabeled branch draws from its own stream. Validation and checkpoints
    use the teacher; the student is stored alongside it.
    """
    labeled = [c for c in labeled_clips if c.labeled]
    if not labeled:
        raise ValueError("train_debus: no labeled clips")
    data_rng = np.random.default_rng([cfg.seed, 0])
    model_rng = np.random.default_rng([cfg.seed, 1])
    u_rng = np.random.default_rng([cfg.seed, 2])
    opt = AdamW(student.parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    steps_per_epoch = -(-len(labeled) // cfg.batch_clips)
    ramp = int(round(cfg.ramp_fraction * cfg.epochs * steps_per_epoch))
    state = TeacherStudent.from_student(student, opt, alpha=cfg.alpha, lambda_u=cfg.lambda_u,
                                        ramp_steps=ramp, alignment=tuple(cfg.alignment))
    policy = cfg.policy()
    geo = AugPolicy(scale_range=policy.scale_range, hflip_prob=policy.hflip_prob, pad_max=policy.pad_max,
                    brightness=0.0, contrast=0.0, gamma_range=None, mask_count=0)
    photo = AugPolicy(scale_range=None, hflip_prob=0.0, pad_max=0, brightness=policy.brightness,
                      contrast=policy.contrast, gamma_range=policy.gamma_range, mask_count=policy.mask_count,
                      mask_size=policy.mask_size, mask_exclude_last=policy.mask_exclude_last)
    logger = _Logger(log_path)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    step, best = 0, -1.0
    start = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            opt.lr = _lr_for(cfg, epoch)
            epoch_policy = _policy_for(cfg, policy, epoch)
            rows = []
            order = data_rng.permutation(len(labeled))
            for i in range(0, len(order), cfg.batch_clips):
                batch = [augment(labeled[j], epoch_policy, int(data_rng.integers(2**31))) for j in order[i:i + cfg.batch_clips]]
                frames, targets = clips_to_batch(batch)
                weak = strong = None
                if unlabeled_clips and cfg.unlabeled_per_step > 0:
                    pick = u_rng.choice(len(unlabeled_clips), size=min(cfg.unlabeled_per_step, len(unlabeled_clips)),
                                        replace=False)
                    weak_clips = [augment(unlabeled_clips[j], geo, int(u_rng.integers(2**31))) for j in pick]
                    strong_clips = [augment(c, photo, int(u_rng.integers(2**31))) for c in weak_clips]
                    weak = np.stack([c.frames for c in weak_clips])
                    strong = np.stack([c.frames for c in strong_clips])
                try:
                    rows.append(ssl_train_step(state, frames, targets, weak, strong, model_rng, u_rng))
                except FloatingPointError as err:
                    _dump_batch(out_dir, [labeled[j].id for j in order[i:i + cfg.batch_clips]], epoch, step, err)
                    raise NonFiniteLoss(str(err)) from err
                step += 1
            over = time_budget is not None and time.perf_counter() - start > time_budget
            is_last = epoch == cfg.epochs - 1 or over
            val = _maybe_eval(state.teacher, val_clips, cfg, epoch, is_last)
            logger.write(_epoch_record(epoch, step, rows, val))
            log.info("epoch %d step %d loss %.4f cons %.4f val_ap50 %s", epoch, step,
                     logger.records[-1]["loss_total"], logger.records[-1]["loss_cons"], val)
            if out_dir is not None:
                _save_epoch(out_dir, state.teacher, epoch, data_rng, cfg, val, best, is_last, student)
            if val is not None and val > best:
                best = val
            if over:
                break
    finally:
        logger.close()
    return {"records": logger.records, "steps": step, "best_val_ap50": best, "state": state}


# -- inference ---------------------------------------------------------------------------------
def predict_clips(model: SVDETR, clips: list[Clip], batch: int = 16, use_context: bool | None = None,
                  seed: int = 0) -> dict:
    """Detections for every frame of every clip, keyed by ``clip_id/t``.

    Frame t of a clip is decoded from frames 0..t only.
    """
    preds = {}
    rng = np.random.default_rng(seed)
    with T.no_grad():
        for i in range(0, len(clips), batch):
            chunk = clips[i:i + batch]
            frames = np.stack([c.frames for c in chunk])
            pred = propagate_clip(model, frames, rng=rng, use_context=use_context)
            for t, det in enumerate(pred.detections):
                scores = det.scores
                boxes = det.boxes.data
                for b, clip in enumerate(chunk):
                    preds[frame_ids(clip)[t]] = {"boxes": boxes[b].astype(np.float64),
                                                 "scores": scores[b].astype(np.float64)}
    return preds


def ground_truth(clips: list[Clip]) -> dict:
    gts = {}
    for clip in clips:
        if clip.annotations is None:
            raise ValueError(f"clip {clip.id} has no annotations")
        for fid, ann in zip(frame_ids(clip), clip.annotations):
            gts[fid] = np.asarray(ann, dtype=np.float64).reshape(-1, 4)
    return gts


def evaluate_model(model: SVDETR, clips: list[Clip], use_context: bool | None = None) -> dict:
    return metrics.evaluate(predict_clips(model, clips, use_context=use_context), ground_truth(clips))
