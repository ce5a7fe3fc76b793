"""Query diffusion: noise schedules, forward noising, denoiser, reverse sampling.

Timesteps run 1..T. Arrays in :class:`BetaSchedule` are indexed by timestep
with a padding entry at index 0 so ``alpha_bar[0] == 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, MLP, Module, MultiHeadAttention
from .tensor import Tensor

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class BetaSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def respaced(self, steps: int) -> tuple[np.ndarray, "BetaSchedule"]:
        """Evenly strided sub-schedule with ``steps`` timesteps.

        Returns the kept original timesteps (ascending) and a schedule whose
        betas reproduce the original ``alpha_bar`` at those timesteps.
        """
        if steps > self.T:
            raise ValueError(f"steps={steps} exceeds schedule length T={self.T}")
        if steps == self.T:
            return np.arange(1, self.T + 1), self
        kept = np.unique(np.round(np.linspace(1, self.T, steps)).astype(int))
        ab = np.concatenate([[1.0], self.alpha_bar[kept]])
        # same clip as the full schedule, so an alpha_bar of 0 at T stays finite
        beta = np.concatenate([[0.0], np.minimum(1.0 - ab[1:] / ab[:-1], MAX_BETA)])
        alpha = 1.0 - beta
        return kept, BetaSchedule(self.kind, len(kept), beta, alpha, ab)


def make_schedule(kind: str = "linear", T: int = 100) -> BetaSchedule:
    """Linear betas (1e-4 .. 0.02) or the cosine alpha-bar schedule."""
    if T < 1:
        raise ValueError(f"schedule length must be >= 1, got {T}")
    if kind == "linear":
        beta = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T) if T > 1 else np.array([LINEAR_BETA_START])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        beta = np.concatenate([[0.0], beta])
        alpha = np.concatenate([[1.0], alpha])
        alpha_bar = np.concatenate([[1.0], alpha_bar])
    elif kind == "cosine":
        s = COSINE_OFFSET
        t = np.arange(T + 1) / T
        f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        # alpha_bar keeps the direct formula; only beta is clipped (t near T)
        beta = np.concatenate([[0.0], np.minimum(1.0 - ab[1:] / ab[:-1], MAX_BETA)])
        alpha = 1.0 - beta
        alpha_bar = ab
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return BetaSchedule(kind, T, beta, alpha, alpha_bar)


def q_sample(x0, t: int, noise, sched: BetaSchedule):
    """Closed-form forward marginal sqrt(ab_t) x0 + sqrt(1 - ab_t) noise."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def q_step(x_prev, t: int, noise, sched: BetaSchedule):
    """One forward transition x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I)."""
    b = sched.beta[t]
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * noise


def reverse_step(x_t, t: int, eps_hat, sched: BetaSchedule, noise=None):
    """x_{t-1} = (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t) [+ sqrt(beta_t) z]."""
    mean = (x_t - sched.beta[t] / math.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / math.sqrt(sched.alpha[t])
    if noise is not None and t > 1:
        mean = mean + math.sqrt(sched.beta[t]) * noise
    return mean


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class Denoiser(Module):
    """Small U-shaped noise predictor over an (B, N, d) query tensor.

    Two down-projections, a bottleneck that cross-attends to the encoder
    memory, and two up-projections with skip connections. Widths run
    d -> 3d/4 -> d/2 -> 3d/4 -> d.
    """

    def __init__(self, d: int, rng: np.random.Generator, heads: int = 2, dtype=np.float32):
        h1 = max(2 * heads, (3 * d // 4) // heads * heads)
        h2 = max(heads, (d // 2) // heads * heads)
        self.d = d
        self.time_mlp = MLP([d, d, d], rng, dtype=dtype)
        self.down1 = Linear(d, h1, rng, dtype=dtype)
        self.down2 = Linear(h1, h2, rng, dtype=dtype)
        self.mem_proj = Linear(d, h2, rng, dtype=dtype)
        self.attn = MultiHeadAttention(h2, heads, rng, dtype=dtype)
        self.norm = LayerNorm(h2, dtype=dtype)
        self.up2 = Linear(h2, h1, rng, dtype=dtype)
        self.up1 = Linear(h1, d, rng, dtype=dtype)
        self.out = Linear(d, d, rng, dtype=dtype)

    def __call__(self, x_t: Tensor, t, memory: Tensor) -> Tensor:
        b = x_t.shape[0]
        t = np.broadcast_to(np.atleast_1d(t), (b,))
        temb = self.time_mlp(Tensor(timestep_embedding(t, self.d).astype(x_t.dtype))).reshape(b, 1, self.d)
        h0 = x_t + temb
        h1 = T.relu(self.down1(h0))
        h2 = T.relu(self.down2(h1))
        mem = self.mem_proj(memory)
        a, _ = self.attn(h2, mem, mem)
        h2 = self.norm(h2 + a)
        u1 = T.relu(self.up2(h2)) + h1
        u0 = self.up1(u1) + h0
        return self.out(T.relu(u0))


class QueryNormalizer(Module):
    """Per-feature running mean/std used to bring queries to unit scale."""

    buffers = ("mean", "std", "initialised")

    def __init__(self, d: int, momentum: float = 0.01, dtype=np.float32):
        self.mean = Tensor(np.zeros(d, dtype=dtype))
        self.std = Tensor(np.ones(d, dtype=dtype))
        self.initialised = Tensor(np.zeros(1, dtype=dtype))
        self.momentum = momentum

    def update(self, x: np.ndarray) -> None:
        flat = x.reshape(-1, x.shape[-1])
        mu = flat.mean(axis=0)
        sd = flat.std(axis=0) + 1e-3
        if self.initialised.data[0] == 0:
            self.mean.data = mu.astype(self.mean.dtype)
            self.std.data = sd.astype(self.std.dtype)
            self.initialised.data = np.ones(1, dtype=self.mean.dtype)
        else:
            m = self.momentum
            self.mean.data = ((1 - m) * self.mean.data + m * mu).astype(self.mean.dtype)
            self.std.data = ((1 - m) * self.std.data + m * sd).astype(self.std.dtype)

    def normalize(self, x):
        return (x - self.mean.data) / self.std.data

    def denormalize(self, x):
        return x * self.std.data + self.mean.data


def diffusion_train_step(x0, memory, sched: BetaSchedule, denoiser: Denoiser,
                         rng: np.random.Generator, t=None, noise=None) -> Tensor:
    """Noise-prediction loss for one batch of clean (already normalised) queries.

    ``x0`` is (B, N, d) and treated as a constant. ``t`` (per batch item) and
    ``noise`` are drawn from ``rng`` unless supplied.
    """
    x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0)
    b = x0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=b)
    t = np.broadcast_to(np.atleast_1d(t), (b,))
    if noise is None:
        noise = rng.standard_normal(x0.shape).astype(x0.dtype)
    ab = sched.alpha_bar[t].reshape(b, 1, 1)
    x_t = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(x0.dtype)
    eps_hat = denoiser(Tensor(x_t), t, memory)
    return T.mse(eps_hat, Tensor(noise))


def sample(shape, memory, sched: BetaSchedule, predict_noise, steps: int,
           rng: np.random.Generator, stochastic: bool = False, x_T=None, dtype=np.float32) -> np.ndarray:
    """Run ``steps`` strided reverse updates starting from standard normal noise.

    ``predict_noise(x_t, t_original, memory)`` returns the noise estimate as an
    array; ``t_original`` is the timestep on the full schedule. ``steps == 0``
    returns the starting noise unchanged.
    """
    if steps > sched.T:
        raise ValueError(f"steps={steps} exceeds schedule length T={sched.T}")
    x = rng.standard_normal(shape).astype(dtype) if x_T is None else np.array(x_T, dtype=dtype)
    if steps == 0:
        return x
    kept, sub = sched.respaced(steps)
    for i in range(len(kept), 0, -1):
        eps_hat = np.asarray(predict_noise(x, int(kept[i - 1]), memory))
        z = rng.standard_normal(shape).astype(dtype) if stochastic else None
        x = reverse_step(x, i, eps_hat, sub, z).astype(dtype)
    return x


def generate_queries(memory, sched: BetaSchedule, denoiser: Denoiser, steps: int, n_queries: int,
                     rng: np.random.Generator, project=None, normalizer: QueryNormalizer | None = None,
                     stochastic: bool = False):
    """Denoise random queries conditioned on encoder ``memory`` (B, L, d).

    The sampled tensor is denormalised and handed to ``project`` (the model's
    query head) which turns it into a QuerySet; without ``project`` the raw
    (B, N, d) array is returned.
    """
    mem = memory if isinstance(memory, Tensor) else Tensor(memory)
    b, d = mem.shape[0], mem.shape[-1]

    def predict(x, t, m):
        with T.no_grad():
            return denoiser(Tensor(x), np.full(b, t), m).data

    x = sample((b, n_queries, d), mem, sched, predict, steps, rng, stochastic, dtype=mem.dtype)
    if normalizer is not None:
        x = normalizer.denormalize(x).astype(mem.dtype)
    return project(x) if project is not None else x
