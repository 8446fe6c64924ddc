"""Gaussian forward process, forward posterior, KL divergence and the (weighted) ELBO.

The loss assembly in :func:`assemble_loss` is written with plain arithmetic so
it runs unchanged on numpy arrays (evaluation) and on autodiff tensors
(training); that shared path is what makes uniform-weight training
bit-identical to unweighted ELBO training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .schedules import KLWeightConfig, NoiseSchedule, kl_weights


@dataclass
class GaussianParams:
    """Isotropic Gaussian: ``mean`` array and scalar ``var`` (or one per batch entry)."""
    mean: np.ndarray
    var: float | np.ndarray


@dataclass
class LossBreakdown:
    total: float
    per_t: np.ndarray
    weights_applied: np.ndarray
    per_example: np.ndarray = field(default=None, repr=False)


@dataclass
class TrainingBatch:
    """Clean images plus everything needed to make the loss deterministic.

    ``t`` holds one timestep per example (stochastic estimator), or is None
    for the exact full sum over t; in that case ``noise`` has a leading axis
    of length T with one draw per timestep.
    """
    x0: np.ndarray
    token_ids: np.ndarray
    null: np.ndarray
    gate: float
    t: np.ndarray | None
    noise: np.ndarray

    @property
    def exact(self) -> bool:
        return self.t is None

    def __len__(self):
        return self.x0.shape[0]


def make_batch(x0, token_ids, null, gate, sched: NoiseSchedule, rng: np.random.Generator,
               exact: bool = False) -> TrainingBatch:
    """Draw timesteps uniformly from 1..T (unless exact) and standard-normal noise."""
    B = x0.shape[0]
    if exact:
        noise = rng.standard_normal((sched.T,) + x0.shape)
        return TrainingBatch(x0, token_ids, np.asarray(null, bool), gate, None, noise)
    t = rng.integers(1, sched.T + 1, size=B)
    noise = rng.standard_normal(x0.shape)
    return TrainingBatch(x0, token_ids, np.asarray(null, bool), gate, t, noise)


def _per_example(values: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a length-B vector so it broadcasts against ``(B, ...)`` arrays."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (ndim - 1))


def q_sample_step(x_prev, t: int, sched: NoiseSchedule, noise):
    """One forward transition: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise."""
    if np.shape(x_prev) != np.shape(noise):
        raise ValueError("noise shape must match the image")
    b = sched.beta(t)
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * noise


def q_sample_closed(x0, t, sched: NoiseSchedule, eps):
    """x_t in one jump; ``t`` may be an int or one timestep per batch entry."""
    if np.shape(x0) != np.shape(eps):
        raise ValueError("noise shape must match the image")
    ab = _per_example(sched.alpha_bars[np.asarray(t) - 1], np.ndim(x0))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _posterior_coefs(t, sched: NoiseSchedule):
    t = np.asarray(t)
    ab = sched.alpha_bars[t - 1]
    ab_prev = np.where(t > 1, sched.alpha_bars[np.maximum(t - 2, 0)], 1.0)
    beta = sched.betas[t - 1]
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    return c0, ct, sched.posterior_vars[t - 1]


def q_posterior(x0, xt, t, sched: NoiseSchedule) -> GaussianParams:
    """Forward posterior q(x_{t-1} | x_t, x_0); at t = 1 the mean is x_0 and var beta_1."""
    c0, ct, var = _posterior_coefs(t, sched)
    nd = np.ndim(x0)
    mean = _per_example(c0, nd) * x0 + _per_example(ct, nd) * xt
    return GaussianParams(mean, var)


def mu_from_eps(xt, t, eps_hat, sched: NoiseSchedule) -> GaussianParams:
    """Reverse mean from a noise prediction; variance fixed to the posterior variance."""
    t = np.asarray(t)
    nd = np.ndim(xt)
    beta = sched.betas[t - 1]
    inv_sqrt_alpha = _per_example(1.0 / np.sqrt(1.0 - beta), nd)
    coef = _per_example(beta / np.sqrt(1.0 - sched.alpha_bars[t - 1]), nd)
    mean = (xt - eps_hat * coef) * inv_sqrt_alpha
    return GaussianParams(mean, sched.posterior_vars[t - 1])


def gaussian_kl(p: GaussianParams, q: GaussianParams) -> float:
    """KL(p || q) for isotropic Gaussians of equal dimension."""
    mp, mq = np.asarray(p.mean, dtype=np.float64), np.asarray(q.mean, dtype=np.float64)
    if mp.shape != mq.shape:
        raise ValueError("dimension mismatch")
    vp, vq = float(p.var), float(q.var)
    if vp <= 0 or vq <= 0:
        raise ValueError("variances must be positive")
    d = mp.size
    diff = mp - mq
    const = d * (0.5 * np.log(vq / vp) + vp / (2.0 * vq) - 0.5)
    return float(const + np.dot(diff.ravel(), diff.ravel()) / (2.0 * vq))


def batched_kl(mean_p, var_p, mean_q, var_q):
    """Per-example KL(p || q) over all non-batch axes; means may be autodiff tensors."""
    d = int(np.prod(np.shape(mean_p.data if isinstance(mean_p, Tensor) else mean_p)[1:]))
    var_p = np.asarray(var_p, dtype=np.float64)
    var_q = np.asarray(var_q, dtype=np.float64)
    const = d * (0.5 * np.log(var_q / var_p) + var_p / (2.0 * var_q) - 0.5)
    diff = mean_p - mean_q
    sq = diff * diff
    B = np.shape(mean_p.data if isinstance(mean_p, Tensor) else mean_p)[0]
    sq = sq.reshape(B, -1).sum(axis=1)
    return sq * (1.0 / (2.0 * var_q)) + const


def assemble_loss(eps_fn, batch: TrainingBatch, sched: NoiseSchedule,
                  weights: np.ndarray):
    """Weighted sum of per-timestep KL(q posterior || model reverse step).

    ``eps_fn(xt, t, batch)`` returns the noise prediction (array or tensor),
    with ``t`` one timestep per example. Returns ``(total, LossBreakdown)``;
    ``total`` keeps the caller's array type so it can be differentiated.
    """
    T, B = sched.T, len(batch)
    weights = np.asarray(weights, dtype=np.float64)
    per_t = np.zeros(T)
    if batch.exact:
        total = 0.0
        per_example = np.zeros(B)
        for t in range(1, T + 1):
            tv = np.full(B, t)
            xt = q_sample_closed(batch.x0, tv, sched, batch.noise[t - 1])
            kl = _kl_terms(eps_fn, batch, xt, tv, sched)
            vals = kl.data if isinstance(kl, Tensor) else kl
            per_t[t - 1] = vals.sum() / B
            per_example += weights[t - 1] * vals
            total = total + kl.sum() * (weights[t - 1] / B)
    else:
        tv = np.asarray(batch.t)
        xt = q_sample_closed(batch.x0, tv, sched, batch.noise)
        kl = _kl_terms(eps_fn, batch, xt, tv, sched)
        vals = kl.data if isinstance(kl, Tensor) else kl
        np.add.at(per_t, tv - 1, vals * (T / B))
        scale = weights[tv - 1] * (T / B)
        per_example = vals * weights[tv - 1] * T
        total = (kl * scale).sum()
    tot_val = float(total.data) if isinstance(total, Tensor) else float(total)
    return total, LossBreakdown(tot_val, per_t, weights, per_example)


def _kl_terms(eps_fn, batch, xt, tv, sched):
    eps_hat = eps_fn(xt, tv, batch)
    post = q_posterior(batch.x0, xt, tv, sched)
    model = mu_from_eps(xt, tv, eps_hat, sched)
    return batched_kl(post.mean, post.var, model.mean, model.var)


def _as_eps_fn(model):
    if hasattr(model, "eps_for_batch"):
        return model.eps_for_batch
    return model


def weighted_loss(model, batch: TrainingBatch, sched: NoiseSchedule,
                  wcfg: KLWeightConfig) -> LossBreakdown:
    """Weighted ELBO; ``model`` is DenoiserParams or ``f(xt, t, batch) -> eps``."""
    _, lb = assemble_loss(_as_eps_fn(model), batch, sched, kl_weights(wcfg, sched.T))
    return lb


def elbo_loss(model, batch: TrainingBatch, sched: NoiseSchedule) -> LossBreakdown:
    _, lb = assemble_loss(_as_eps_fn(model), batch, sched, np.ones(sched.T))
    return lb
