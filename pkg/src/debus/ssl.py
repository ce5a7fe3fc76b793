"""Mean-teacher semi-supervised training with feature-alignment consistency."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .detr import SVDETR
from .nn import AdamW, Module
from .objectives import clip_loss
from .temporal import ClipPrediction, propagate_clip
from .tensor import Tensor

ALIGNMENT_POINTS = ("backbone", "encoder", "decoder")
DEFAULT_ALIGNMENT = ("encoder", "decoder")


def _pairs(teacher, student) -> list[tuple[Tensor, Tensor, bool]]:
    """(teacher, student, is_buffer) triples; buffers exist only on Modules."""
    if isinstance(teacher, Module) and isinstance(student, Module):
        t_named = dict(teacher.named_tensors())
        s_named = dict(student.named_tensors())
        if t_named.keys() != s_named.keys():
            diff = sorted(set(t_named) ^ set(s_named))
            raise ValueError(f"ema_update: structure mismatch at {diff[:5]}")
        buffers = {k for k, _ in student.named_buffers()}
        pairs = [(t_named[k], s_named[k], k in buffers) for k in t_named]
    else:
        teacher, student = list(teacher), list(student)
        if len(teacher) != len(student):
            raise ValueError(f"ema_update: {len(teacher)} teacher tensors vs {len(student)} student tensors")
        pairs = [(t, s, False) for t, s in zip(teacher, student)]
    for t, s, _ in pairs:
        if t.shape != s.shape:
            raise ValueError(f"ema_update: shape mismatch {t.shape} vs {s.shape}")
    return pairs


def ema_update(teacher, student, alpha: float):
    """teacher <- alpha * teacher + (1 - alpha) * student, in place.

    Accepts two Modules of identical structure or two sequences of Tensors.
    Module buffers (running statistics) are copied from the
    student rather than averaged. Returns ``teacher``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"ema_update: alpha must be in [0, 1], got {alpha}")
    for t, s, is_buffer in _pairs(teacher, student):
        if is_buffer:
            t.data = s.data.astype(t.dtype, copy=True)
        elif alpha == 1.0:
            continue
        elif alpha == 0.0:
            t.data = s.data.astype(t.dtype, copy=True)
        else:
            t.data = (alpha * t.data + (1.0 - alpha) * s.data).astype(t.dtype)
    return teacher


@dataclass
class AlignmentBundle:
    """Paired student/teacher features on one unlabeled batch.

    ``student`` maps an alignment point to a Tensor, or for ``decoder`` to a
    (content, boxes) pair of Tensors shaped (..., N, d) and (..., N, 4).
    ``teacher`` holds the same structure as plain arrays. ``confidence`` is
    the teacher's per-query foreground confidence, shaped (..., N).
    """

    student: dict
    teacher: dict
    confidence: np.ndarray | None = None

    def __post_init__(self):
        if self.student.keys() != self.teacher.keys():
            raise ValueError("AlignmentBundle: student and teacher points differ")
        for k in self.student:
            if k not in ALIGNMENT_POINTS:
                raise ValueError(f"unknown alignment point {k!r}")
            s, t = self.student[k], self.teacher[k]
            if k == "decoder":
                if s[0].shape != np.shape(t[0]) or s[1].shape != np.shape(t[1]):
                    raise ValueError("AlignmentBundle: decoder tensors differ in shape")
            elif s.shape != np.shape(t):
                raise ValueError(f"AlignmentBundle: {k} tensors differ in shape")


def _const(x, dtype) -> Tensor:
    return Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype))


def consistency_loss(bundle: AlignmentBundle) -> Tensor:
    """Sum over enabled points of the student/teacher disagreement.

    Feature points use the mean squared difference. The decoder point uses,
    per query, the mean squared difference of the content embedding plus
    that of the box, weighted by teacher confidence and normalised by the
    confidence sum (0 when every confidence is 0). Teacher tensors are
    treated as constants.
    """
    if not bundle.student:
        raise ValueError("consistency_loss: no alignment point enabled")
    total = None
    for k, s in bundle.student.items():
        t = bundle.teacher[k]
        if k == "decoder":
            sc, sb = s
            dc = T.mean((sc - _const(t[0], sc.dtype)) ** 2, axis=-1)
            db = T.mean((sb - _const(t[1], sb.dtype)) ** 2, axis=-1)
            conf = np.broadcast_to(np.asarray(bundle.confidence, dtype=sc.dtype), dc.shape)
            denom = float(conf.sum())
            if denom > 0:
                term = ((dc + db) * Tensor(conf / denom)).sum()
            else:
                term = ((dc + db) * 0.0).sum()
        else:
            term = T.mse(s, _const(t, s.dtype))
        total = term if total is None else total + term
    return total


def collect_alignment(pred: ClipPrediction, points) -> dict:
    """Feature tensors of one clip prediction keyed by alignment point (all frames)."""
    out = {}
    if "backbone" in points:
        out["backbone"] = T.stack([m.tokens for m in pred.backbone], axis=1)
    if "encoder" in points:
        out["encoder"] = T.stack([m.tokens for m in pred.memories], axis=1)
    if "decoder" in points:
        out["decoder"] = (T.stack([q.content for q in pred.queries], axis=1),
                          T.stack([q.boxes for q in pred.queries], axis=1))
    return out


@dataclass
class TeacherStudent:
    """Student, its EMA teacher, the optimiser and the SSL hyperparameters."""

    student: SVDETR
    teacher: SVDETR
    optimizer: AdamW
    alpha: float = 0.99
    lambda_u: float = 1.0
    ramp_steps: int = 0
    alignment: tuple = DEFAULT_ALIGNMENT
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def from_student(cls, student: SVDETR, optimizer: AdamW, **kw) -> "TeacherStudent":
        """Teacher starts as an exact copy of the (supervised-pretrained) student."""
        teacher = copy.deepcopy(student)
        for _, p in teacher.named_tensors():
            p.requires_grad = False
            p.grad = None
        return cls(student, teacher, optimizer, **kw)

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        bad = set(self.alignment) - set(ALIGNMENT_POINTS)
        if bad:
            raise ValueError(f"unknown alignment points {sorted(bad)}")

    def consistency_weight(self) -> float:
        if self.ramp_steps <= 0:
            return self.lambda_u
        return self.lambda_u * min(1.0, self.step / self.ramp_steps)


def ssl_train_step(state: TeacherStudent, labeled_frames, labeled_targets, unlabeled_weak=None,
                   unlabeled_strong=None, rng: np.random.Generator | None = None,
                   unlabeled_rng: np.random.Generator | None = None) -> dict:
    """One optimiser update on a batch of labeled plus unlabeled clips.

    The student sees strongly augmented labeled clips (supervised loss) and
    the strong view of the unlabeled clips; the teacher sees the weak view
    without gradients. Both views must share geometry so that queries and
    feature tokens correspond by index. ``unlabeled_rng`` drives the
    unlabeled branch only, so a zero consistency weight reproduces the
    supervised trajectory exactly. The EMA update follows the optimiser step.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    student, teacher = state.student, state.teacher
    state.optimizer.zero_grad()
    weight = state.consistency_weight()
    l_cons = None
    has_unlabeled = unlabeled_weak is not None and len(unlabeled_weak) > 0
    if has_unlabeled and weight > 0:
        # before the supervised pass, which refreshes the student's query statistics
        urng = unlabeled_rng if unlabeled_rng is not None else np.random.default_rng(state.step)
        seed = int(urng.integers(2**31))
        with T.no_grad():
            t_pred = propagate_clip(teacher, unlabeled_weak, rng=np.random.default_rng(seed))
        s_pred = propagate_clip(student, unlabeled_strong, rng=np.random.default_rng(seed))
        t_feats = collect_alignment(t_pred, state.alignment)
        teacher_side = {k: (v[0].data, v[1].data) if k == "decoder" else v.data for k, v in t_feats.items()}
        conf = np.stack([d.scores for d in t_pred.detections], axis=1) if "decoder" in state.alignment else None
        bundle = AlignmentBundle(collect_alignment(s_pred, state.alignment), teacher_side, conf)
        l_cons = consistency_loss(bundle)
    sup = clip_loss(student, labeled_frames, labeled_targets, rng)
    total = sup["total"]
    if l_cons is None:
        l_cons = Tensor(np.zeros((), dtype=total.dtype))
    else:
        total = total + l_cons * weight
    if not np.isfinite(total.data).all():
        raise FloatingPointError(f"non-finite SSL loss at step {state.step}")
    total.backward()
    state.optimizer.step()
    ema_update(teacher, student, state.alpha)
    state.step += 1
    out = {k: float(sup[k].data) for k in ("loss_cls", "loss_l1", "loss_giou", "loss_diff")}
    out.update(loss_total=float(total.data), loss_cons=float(l_cons.data), cons_weight=weight)
    state.history.append(out)
    return out
