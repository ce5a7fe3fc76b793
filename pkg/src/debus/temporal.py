"""Clip-level query propagation and its streaming (cached) equivalent."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .detr import DecodeOutput, DetectionSet, FeatureMemory, QuerySet, SVDETR


@dataclass
class ClipPrediction:
    """Per-frame decoder outputs for a batch of clips (frame t uses frames <= t)."""

    outputs: list  # DecodeOutput per frame
    memories: list = field(default_factory=list)  # encoded FeatureMemory per frame
    backbone: list = field(default_factory=list)  # pre-encoder FeatureMemory per frame

    def __len__(self):
        return len(self.outputs)

    @property
    def detections(self) -> list[DetectionSet]:
        return [o.final for o in self.outputs]

    @property
    def queries(self) -> list[QuerySet]:
        return [o.queries for o in self.outputs]


@dataclass
class StreamState:
    queries: QuerySet | None = None
    scores: np.ndarray | None = None
    memory_hash: str = ""
    frame_index: int = 0


def topk_filter(queries: QuerySet, scores, k: int | None) -> QuerySet:
    """Keep the ``k`` highest-scoring queries per batch item, best first.

    Ties go to the lower index. ``k`` of None or >= N passes every query
    through unchanged.
    """
    scores = np.asarray(scores)
    if scores.ndim == 1:
        scores = scores[None]
    n = len(queries)
    if k is None or k >= n:
        return queries
    if k < 0:
        raise ValueError("k must be >= 0")
    order = np.argsort(-scores, axis=-1, kind="stable")[:, :k]
    return queries.take(order)


def query_scores(model: SVDETR, out: DecodeOutput) -> np.ndarray:
    """Ranking signal for propagation: foreground confidence, or received self-attention mass.

    The attention variant sums, for each query, the self-attention weight the
    frame's queries placed on it in the last decoder application.
    """
    if model.cfg.filter_by == "attention":
        n = len(out.queries)
        return out.self_attention[:, :, :n].sum(axis=1)
    return out.final.scores


def _split_frames(mem: FeatureMemory, b: int, t: int) -> list[FeatureMemory]:
    tokens = mem.tokens.reshape(b, t, *mem.tokens.shape[1:])
    return [FeatureMemory(tokens[:, i], mem.pos, mem.hw) for i in range(t)]


def _encode_clip(model: SVDETR, frames: np.ndarray) -> tuple[list, list]:
    """Backbone and encoder over all B*T frames at once, split back per frame."""
    b, t = frames.shape[:2]
    raw = model.backbone_forward(frames.reshape(b * t, *frames.shape[2:]))
    mem = model.encode(raw)
    return _split_frames(mem, b, t), _split_frames(raw, b, t)


def propagate_clip(model: SVDETR, frames, init_queries: QuerySet | None = None,
                   rng: np.random.Generator | None = None, use_context: bool | None = None,
                   use_diffusion: bool | None = None, stochastic: bool = False) -> ClipPrediction:
    """Decode every frame of (B, T, H, W) clips, passing frame t-1's queries forward.

    Frame 1 decodes ``init_queries`` (diffusion samples or learned queries
    when None). Later frames decode the learned queries with the filtered
    refined queries of the previous frame as extra attention context.
    ``use_diffusion`` and ``stochastic`` override how frame-1 queries are drawn.
    """
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.shape[1] == 0:
        raise ValueError("propagate_clip: clip has no frames")
    cfg = model.cfg
    use_context = cfg.use_context if use_context is None else use_context
    memories, raw = _encode_clip(model, frames.astype(model.query_embed.dtype))
    b = frames.shape[0]
    outputs = []
    prev = None
    for t, mem in enumerate(memories):
        if t == 0:
            q = init_queries
            if q is None:
                q = model.initial_queries(mem.tokens, rng, use_diffusion, stochastic)
            out = model.decode(mem, q)
        else:
            ctx = prev if use_context else None
            out = model.decode(mem, model.learned_queries(b), ctx)
        outputs.append(out)
        prev = topk_filter(out.queries, query_scores(model, out), cfg.topk)
    return ClipPrediction(outputs, memories, raw)


def _hash_tokens(tokens: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(tokens).tobytes()).hexdigest()[:16]


def streaming_step(model: SVDETR, state: StreamState | None, frame,
                   rng: np.random.Generator | None = None,
                   init_queries: QuerySet | None = None) -> tuple[DetectionSet, StreamState]:
    """Process one new frame (H, W) or (B, H, W) using the cached previous queries.

    Only the new frame goes through backbone, encoder and decoder; work per
    call does not depend on how many frames came before.
    """
    state = state or StreamState()
    frame = np.asarray(frame, dtype=model.query_embed.dtype)
    if frame.ndim == 2:
        frame = frame[None]
    with T.no_grad():
        mem = model.forward_frames(frame)
        if state.queries is None:
            q = init_queries if init_queries is not None else model.initial_queries(mem.tokens, rng)
            out = model.decode(mem, q)
        else:
            ctx = state.queries if model.cfg.use_context else None
            out = model.decode(mem, model.learned_queries(frame.shape[0]), ctx)
    kept = topk_filter(out.queries, query_scores(model, out), model.cfg.topk)
    new_state = StreamState(kept.detach(), out.final.scores, _hash_tokens(mem.tokens.data), state.frame_index + 1)
    return out.final, new_state
