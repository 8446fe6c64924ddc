"""Ancestral sampling from the learned reverse process."""
from __future__ import annotations

import numpy as np

from .conditioning import Vocabulary, default_vocabulary, tokenize_batch
from .core import mu_from_eps
from .denoiser import caption_context
from .schedules import NoiseSchedule


def guided_eps(model, xt, t, ctx, guidance_scale: float = 1.0):
    """eps_u + s (eps_c - eps_u); s = 1 and s = 0 skip the unused branch."""
    if guidance_scale == 1.0:
        return model(xt, t, ctx)
    uncond = caption_context(ctx.token_ids, ctx.gate, True)
    eps_u = model(xt, t, uncond)
    if guidance_scale == 0.0:
        return eps_u
    return eps_u + guidance_scale * (model(xt, t, ctx) - eps_u)


def p_sample_step(model, xt, t: int, ctx, sched: NoiseSchedule, noise=None,
                  guidance_scale: float = 1.0):
    """x_{t-1} = mu + sqrt(posterior var) * noise; at t = 1 the mean is returned."""
    if noise is not None and np.shape(noise) != np.shape(xt):
        raise ValueError("noise shape must match x_t")
    eps = guided_eps(model, xt, t, ctx, guidance_scale)
    mu = mu_from_eps(xt, t, eps, sched).mean
    if t == 1:
        return mu
    return mu + np.sqrt(sched.posterior_var(t)) * noise


def chain_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """One independent stream per chain, derived from (seed, chain index)."""
    return [np.random.default_rng([seed, i]) for i in range(n)]


def sample(model, captions, sched: NoiseSchedule, seed: int, n: int | None = None,
           guidance_scale: float = 1.0, vocab: Vocabulary | None = None, L: int = 8,
           gate: float = 1.0, null=False, clip: bool = True,
           shape: tuple | None = None) -> np.ndarray:
    """Draw images for ``captions`` (a string repeated ``n`` times, or a list).

    ``model(xt, t, ctx)`` predicts noise; a ``DenoiserParams`` works directly.
    """
    if isinstance(captions, str):
        if n is None or n < 1:
            raise ValueError("n must be >= 1")
        captions = [captions] * n
    n = len(captions)
    if n < 1:
        raise ValueError("need at least one caption")
    if guidance_scale < 0:
        raise ValueError("guidance scale must be >= 0")
    vocab = vocab or default_vocabulary()
    if shape is None:
        cfg = model.config
        shape = (cfg.channels, cfg.height, cfg.width)
    ctx = caption_context(tokenize_batch(captions, vocab, L), gate, null)
    rngs = chain_rngs(seed, n)
    x = np.stack([r.standard_normal(shape) for r in rngs])
    for t in range(sched.T, 0, -1):
        noise = np.stack([r.standard_normal(shape) for r in rngs]) if t > 1 else None
        x = p_sample_step(model, x, t, ctx, sched, noise, guidance_scale)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("sampler produced non-finite values")
    return np.clip(x, -1.0, 1.0) if clip else x
