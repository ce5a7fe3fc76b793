"""Per-frame detection transformer with a query-diffusion initialiser.

Backbone (4 strided convs) -> weight-shared encoder layer applied
``encoder_applications`` times -> weight-shared decoder layer applied
``decoder_applications`` times, each application emitting class logits and
a refined box. Boxes are refined in logit space, so they stay in (0, 1).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import diffusion as D
from . import tensor as T
from .nn import LayerNorm, Linear, MLP, Conv2d, Module, MultiHeadAttention
from .tensor import ShapeError, Tensor

BOX_EPS = 1e-5
# frame intensities in [0, 1] are standardised with these fixed constants
INPUT_MEAN = 0.5
INPUT_STD = 0.25


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    encoder_applications: int = 6
    decoder_applications: int = 2
    num_queries: int = 10
    image_size: int = 64
    ffn_dim: int = 128
    num_classes: int = 1
    backbone_channels: tuple = (16, 32, 64, 64)
    backbone_strides: tuple = (2, 2, 2, 1)
    tie_encoder: bool = True
    tie_decoder: bool = True
    # diffusion initialiser
    use_diffusion: bool = True
    schedule: str = "linear"
    diffusion_steps: int = 100
    sampling_steps: int = 10
    # temporal propagation
    topk: int | None = None
    filter_by: str = "confidence"
    use_context: bool = True

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        self.backbone_strides = tuple(self.backbone_strides)
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be a multiple of 4 for the 2-D positional encoding")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.encoder_applications < 0 or self.decoder_applications < 1:
            raise ValueError("need encoder_applications >= 0 and decoder_applications >= 1")
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ValueError("backbone_channels and backbone_strides differ in length")
        if self.filter_by not in ("confidence", "attention"):
            raise ValueError(f"unknown filter_by {self.filter_by!r}")
        if self.topk is not None and self.topk < 0:
            raise ValueError("topk must be >= 0")

    @property
    def feature_size(self) -> int:
        s = self.image_size
        for stride in self.backbone_strides:
            s = (s + 2 - 3) // stride + 1
        return s

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class FeatureMemory:
    """Flattened feature tokens (F, L, d) plus their fixed positional codes (L, d)."""

    tokens: Tensor
    pos: np.ndarray
    hw: tuple

    def __len__(self):
        return self.tokens.shape[1]


@dataclass
class QuerySet:
    """Content embeddings (B, N, d) and boxes (B, N, 4) in normalised cx, cy, w, h.

    ``box_logits`` optionally carries a differentiable inverse-sigmoid of the
    boxes (learned reference boxes); otherwise the logits are taken from the
    box values as constants.
    """

    content: Tensor
    boxes: Tensor
    box_logits: Tensor | None = None

    def __len__(self):
        return self.content.shape[1]

    def detach(self) -> "QuerySet":
        return QuerySet(self.content.detach(), self.boxes.detach())

    def logits(self) -> Tensor:
        if self.box_logits is not None:
            return self.box_logits
        b = np.clip(self.boxes.data, BOX_EPS, 1 - BOX_EPS)
        return Tensor(np.log(b / (1 - b)))

    def take(self, index) -> "QuerySet":
        """Gather queries by a (B, K) index array."""
        rows = np.arange(self.content.shape[0])[:, None]
        return QuerySet(self.content[(rows, index)], self.boxes[(rows, index)])


@dataclass
class DetectionSet:
    """Per-query class logits (B, N, C+1) and boxes (B, N, 4)."""

    logits: Tensor
    boxes: Tensor

    def __len__(self):
        return self.logits.shape[1]

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def scores(self) -> np.ndarray:
        """Confidence = max foreground probability per query, (B, N)."""
        return self.probs[..., :-1].max(axis=-1)


@dataclass
class DecodeOutput:
    queries: QuerySet
    detections: list  # one DetectionSet per decoder application
    self_attention: np.ndarray  # (B, N, N + K), head-averaged, last application
    cross_attention: np.ndarray  # (B, N, L), head-averaged, last application

    @property
    def final(self) -> DetectionSet:
        return self.detections[-1]


def sine_embed(cx, cy, d: int) -> np.ndarray:
    """2-D sinusoidal code of normalised coordinates, shape (..., d).

    Layout: [sin(f x), cos(f x), sin(f y), cos(f y)] over d/4 frequencies
    spaced geometrically from pi to 8 pi.
    """
    nf = d // 4
    freqs = np.pi * 8.0 ** (np.arange(nf) / max(nf - 1, 1))
    ax = np.asarray(cx, dtype=np.float64)[..., None] * freqs
    ay = np.asarray(cy, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=-1)


def grid_positions(h: int, w: int, d: int) -> np.ndarray:
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return sine_embed(xs.reshape(-1), ys.reshape(-1), d)


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        chans = (1,) + cfg.backbone_channels
        self.convs = [Conv2d(a, b, 3, rng, stride=s, padding=1, dtype=dtype)
                      for a, b, s in zip(chans[:-1], chans[1:], cfg.backbone_strides)]
        self.proj = Linear(chans[-1], cfg.d_model, rng, dtype=dtype)
        self.image_size = cfg.image_size
        self.d_model = cfg.d_model

    def __call__(self, frames) -> tuple[FeatureMemory, Tensor]:
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.proj.weight.dtype))
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.image_size, self.image_size):
            raise ShapeError(f"backbone: expected (F, {self.image_size}, {self.image_size}) frames, got {x.shape}")
        x = (x - INPUT_MEAN) * (1.0 / INPUT_STD)
        for conv in self.convs:
            x = T.relu(conv(x))
        fmap = x
        f, c, h, w = x.shape
        tokens = self.proj(x.reshape(f, c, h * w).swapaxes(1, 2))
        return FeatureMemory(tokens, grid_positions(h, w, self.d_model).astype(tokens.dtype), (h, w)), fmap


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        d = cfg.d_model
        self.attn = MultiHeadAttention(d, cfg.heads, rng, dtype=dtype)
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.ffn = MLP([d, cfg.ffn_dim, d], rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)

    def __call__(self, x: Tensor, pos: np.ndarray) -> Tensor:
        # pre-norm: the residual stream keeps the backbone signal across repeated applications
        h = self.norm1(x)
        qk = h + Tensor(pos)
        a, _ = self.attn(qk, qk, h)
        x = x + a
        return x + self.ffn(self.norm2(x))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng, dtype=dtype)
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.ffn = MLP([d, cfg.ffn_dim, d], rng, dtype=dtype)
        self.norm3 = LayerNorm(d, dtype=dtype)

    def __call__(self, tgt, qpos, memory, mpos, ctx_k=None, ctx_v=None):
        h = self.norm1(tgt)
        q = h + Tensor(qpos)
        if ctx_k is not None:
            k = T.concat([q, ctx_k], axis=1)
            v = T.concat([h, ctx_v], axis=1)
        else:
            k, v = q, h
        a, w_self = self.self_attn(q, k, v)
        tgt = tgt + a
        a, w_cross = self.cross_attn(self.norm2(tgt) + Tensor(qpos), memory + Tensor(mpos), memory)
        tgt = tgt + a
        tgt = tgt + self.ffn(self.norm3(tgt))
        return tgt, w_self, w_cross


class SVDETR(Module):
    """Detector parameters and the per-frame operations.

    Clip-level propagation lives in :mod:`debus.temporal`.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, n = cfg.d_model, cfg.num_queries
        self.backbone = Backbone(cfg, rng, dtype)
        n_enc = 1 if cfg.tie_encoder else max(cfg.encoder_applications, 1)
        n_dec = 1 if cfg.tie_decoder else cfg.decoder_applications
        self.encoder_layers = [EncoderLayer(cfg, rng, dtype) for _ in range(n_enc)]
        self.decoder_layers = [DecoderLayer(cfg, rng, dtype) for _ in range(n_dec)]
        self.encoder_norm = LayerNorm(d, dtype=dtype)
        self.decoder_norm = LayerNorm(d, dtype=dtype)
        self.class_head = Linear(d, cfg.num_classes + 1, rng, dtype=dtype)
        self.box_head = MLP([d, d, 4], rng, dtype=dtype)
        self.box_head.layers[-1].weight.data *= 0.1
        self.context_box_proj = Linear(4, d, rng, dtype=dtype)
        self.query_embed = Tensor(rng.normal(0, 1, size=(n, d)).astype(dtype), requires_grad=True)
        centres = rng.uniform(0.15, 0.85, size=(n, 2))
        ref = np.concatenate([centres, np.full((n, 2), 0.25)], axis=1)
        self.ref_logits = Tensor(np.log(ref / (1 - ref)).astype(dtype), requires_grad=True)
        self.denoiser = D.Denoiser(d, rng, dtype=dtype)
        self.query_norm = D.QueryNormalizer(d, dtype=dtype)
        self.schedule = D.make_schedule(cfg.schedule, cfg.diffusion_steps)

    # -- parameter groups -------------------------------------------------------
    def detector_parameters(self) -> list[Tensor]:
        skip = {id(p) for p in self.denoiser.parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    def num_parameters(self, with_diffusion: bool = True) -> int:
        n = sum(p.size for p in self.detector_parameters())
        if with_diffusion:
            n += self.denoiser.num_parameters()
        return n

    # -- per-frame operations ------------------------------------------------------
    def backbone_forward(self, frames) -> FeatureMemory:
        return self.backbone(frames)[0]

    def backbone_features(self, frames) -> tuple[FeatureMemory, Tensor]:
        """Memory plus the raw last conv feature map (for feature alignment)."""
        return self.backbone(frames)

    def encode(self, memory: FeatureMemory) -> FeatureMemory:
        x = memory.tokens
        for i in range(self.cfg.encoder_applications):
            layer = self.encoder_layers[0 if self.cfg.tie_encoder else i]
            x = layer(x, memory.pos)
        if self.cfg.encoder_applications > 0:
            x = self.encoder_norm(x)
        return FeatureMemory(x, memory.pos, memory.hw)

    def learned_queries(self, batch: int) -> QuerySet:
        n, d = self.query_embed.shape
        dtype = self.query_embed.dtype
        content = Tensor(np.zeros((batch, 1, 1), dtype=dtype)) + self.query_embed
        logits = Tensor(np.zeros((batch, 1, 1), dtype=dtype)) + self.ref_logits
        return QuerySet(content, T.sigmoid(logits), logits)

    def project_queries(self, content) -> QuerySet:
        """Turn raw (B, N, d) content vectors into a QuerySet via the box head."""
        c = content if isinstance(content, Tensor) else Tensor(np.asarray(content, dtype=self.query_embed.dtype))
        logits = self.ref_logits + self.box_head(c)
        return QuerySet(c, T.sigmoid(logits))

    def generate_queries(self, memory: Tensor, rng: np.random.Generator, steps: int | None = None,
                         stochastic: bool = False) -> QuerySet:
        steps = self.cfg.sampling_steps if steps is None else steps
        with T.no_grad():
            q = D.generate_queries(memory, self.schedule, self.denoiser, steps, self.cfg.num_queries, rng,
                                   project=self.project_queries, normalizer=self.query_norm,
                                   stochastic=stochastic)
        return q.detach()

    def initial_queries(self, memory: Tensor, rng: np.random.Generator | None = None,
                        use_diffusion: bool | None = None, stochastic: bool = False) -> QuerySet:
        """Frame-1 queries: diffusion samples when enabled, else the learned defaults."""
        use = self.cfg.use_diffusion if use_diffusion is None else use_diffusion
        if use and self.cfg.sampling_steps > 0:
            if rng is None:
                rng = np.random.default_rng(0)
            return self.generate_queries(memory, rng, stochastic=stochastic)
        return self.learned_queries(memory.shape[0])

    def context_tokens(self, ctx: QuerySet) -> tuple[Tensor, Tensor]:
        """Keys and values contributed by propagated queries."""
        b = ctx.boxes.data
        key = ctx.content + Tensor(sine_embed(b[..., 0], b[..., 1], self.cfg.d_model).astype(ctx.content.dtype))
        value = ctx.content + self.context_box_proj(Tensor(b))
        return key, value

    def decode(self, memory: FeatureMemory, queries: QuerySet, extra_context: QuerySet | None = None) -> DecodeOutput:
        cfg = self.cfg
        tokens = memory.tokens
        if queries.content.shape[-1] != cfg.d_model:
            raise ShapeError(f"decode: query dim {queries.content.shape[-1]} != d_model {cfg.d_model}")
        ctx_k = ctx_v = None
        if extra_context is not None and len(extra_context) > 0:
            if extra_context.content.shape[-1] != cfg.d_model:
                raise ShapeError(f"decode: context dim {extra_context.content.shape[-1]} != d_model {cfg.d_model}")
            if extra_context.content.shape[0] != queries.content.shape[0]:
                raise ShapeError("decode: context batch size differs from query batch size")
            ctx_k, ctx_v = self.context_tokens(extra_context)
        tgt = queries.content
        ref_logits = queries.logits()
        ref = queries.boxes.data
        detections = []
        w_self = w_cross = None
        boxes = queries.boxes
        for i in range(cfg.decoder_applications):
            layer = self.decoder_layers[0 if cfg.tie_decoder else i]
            qpos = sine_embed(ref[..., 0], ref[..., 1], cfg.d_model).astype(tgt.dtype)
            tgt, w_self, w_cross = layer(tgt, qpos, tokens, memory.pos, ctx_k, ctx_v)
            out = self.decoder_norm(tgt)
            logits = self.class_head(out)
            boxes = T.sigmoid(ref_logits + self.box_head(out))
            detections.append(DetectionSet(logits, boxes))
            ref = boxes.data
            ref_logits = Tensor(np.log(np.clip(ref, BOX_EPS, 1 - BOX_EPS) / np.clip(1 - ref, BOX_EPS, 1)))
        return DecodeOutput(QuerySet(out, boxes), detections,
                            w_self.data.mean(axis=1), w_cross.data.mean(axis=1))

    def forward_frames(self, frames) -> FeatureMemory:
        """Backbone followed by the encoder for a stack of frames."""
        return self.encode(self.backbone_forward(frames))


def flops_estimate(cfg: ModelConfig, context: int = 0, with_diffusion: bool = False) -> dict:
    """Analytic multiply-add counts (x2 for FLOPs) per frame and per clip-start."""
    d, n, ffn, s = cfg.d_model, cfg.num_queries, cfg.ffn_dim, cfg.image_size
    chans = (1,) + cfg.backbone_channels
    backbone = 0
    for a, b, st in zip(chans[:-1], chans[1:], cfg.backbone_strides):
        s = (s + 2 - 3) // st + 1
        backbone += s * s * b * a * 9
    L = s * s
    backbone += L * chans[-1] * d

    def attn(lq, lk):
        return 2 * lq * d * d + 2 * lk * d * d + 2 * lq * lk * d

    enc = cfg.encoder_applications * (attn(L, L) + 2 * L * d * ffn)
    dec = cfg.decoder_applications * (attn(n, n + context) + attn(n, L) + 2 * n * d * ffn
                                      + n * d * (cfg.num_classes + 1) + n * (d * d + 4 * d))
    per_frame = 2 * (backbone + enc + dec)
    diff = 0
    if with_diffusion and cfg.use_diffusion:
        h1 = max(4, (3 * d // 4) // 2 * 2)
        h2 = max(2, (d // 2) // 2 * 2)
        step = n * (d * h1 + h1 * h2 + h2 * h1 + h1 * d + d * d) + L * d * h2 \
            + 2 * n * h2 * h2 + 2 * L * h2 * h2 + 2 * n * L * h2 + 2 * d * d
        diff = 2 * cfg.sampling_steps * step
    return {"per_frame": per_frame, "diffusion": diff, "backbone": 2 * backbone, "encoder": 2 * enc,
            "decoder": 2 * dec}
