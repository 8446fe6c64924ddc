"""Patch-transformer noise predictor with gated cross-attention to the caption.

Each block applies, with residual connections: layer-norm -> self-attention,
layer-norm -> gated cross-attention onto the time-modulated caption
embedding, layer-norm -> tanh feed-forward. Gradients come from the in-repo
reverse-mode engine.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, layer_norm, softmax
from .conditioning import (AttentionParams, TextContext, cross_attention,
                           embed_text, sinusoidal, time_modulate)
from .core import TrainingBatch, assemble_loss
from .schedules import KLWeightConfig, NoiseSchedule, kl_weights


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 3
    height: int = 16
    width: int = 16
    patch: int = 4
    d_img: int = 32
    d_txt: int = 16
    d_k: int = 16
    n_blocks: int = 2
    hidden: int = 64
    vocab_size: int = 20
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("image height and width must be divisible by the patch size")
        dims = (self.channels, self.height, self.width, self.patch, self.d_img,
                self.d_txt, self.d_k, self.n_blocks, self.hidden, self.vocab_size)
        if min(dims) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is implemented")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple]:
    d, dk, dt, h = cfg.d_img, cfg.d_k, cfg.d_txt, cfg.hidden
    shapes = {
        "patch.W": (cfg.patch_dim, d), "patch.b": (d,), "pos": (cfg.n_patches, d),
        "embed_table": (cfg.vocab_size, dt),
    }
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "self.W_q": (d, dk), p + "self.W_k": (d, dk), p + "self.W_v": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "cross.W_q": (d, dk), p + "cross.W_k": (dt, dk), p + "cross.W_v": (dt, d),
            p + "ln3.g": (d,), p + "ln3.b": (d,),
            p + "ff.W1": (d, h), p + "ff.b1": (h,), p + "ff.W2": (h, d), p + "ff.b2": (d,),
        })
    shapes.update({"out.ln.g": (d,), "out.ln.b": (d,),
                   "out.W": (d, cfg.patch_dim), "out.b": (cfg.patch_dim,),
                   "out.skip": (d, cfg.patch_dim)})
    return shapes


class DenoiserParams:
    """Named parameter arrays plus the config that fixes their shapes.

    Calling the object predicts noise, so it can be handed straight to the
    loss and sampler functions.
    """

    def __init__(self, config: DenoiserConfig, arrays: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(arrays) != list(expected):
            raise ValueError("parameter names do not match the config")
        for k, shape in expected.items():
            if arrays[k].shape != shape:
                raise ValueError(f"{k}: shape {arrays[k].shape}, expected {shape}")
        self.config = config
        self.arrays = arrays

    def __getitem__(self, key):
        return self.arrays[key]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def count(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def __call__(self, xt, t, ctx: TextContext):
        return predict_eps(self, xt, t, ctx)

    def eps_for_batch(self, xt, t, batch: TrainingBatch):
        return predict_eps(self, xt, t, batch_context(batch))

    def describe(self) -> dict:
        return asdict(self.config)


def init_params(cfg: DenoiserConfig, rng: np.random.Generator | None = None) -> DenoiserParams:
    """Fan-in scaled normal weights, unit norm gains, zero biases and zero output head."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("out.W", "out.b", "out.skip") or leaf in ("b", "b1", "b2"):
            arrays[name] = np.zeros(shape)
        elif leaf == "g":
            arrays[name] = np.ones(shape)
        elif name == "pos":
            arrays[name] = 0.5 * rng.standard_normal(shape)
        elif name == "embed_table":
            arrays[name] = rng.standard_normal(shape)
        else:
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return DenoiserParams(cfg, arrays)


def patchify(x: np.ndarray, P: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*P*P), patches in row-major order."""
    B, C, H, W = x.shape
    x = x.reshape(B, C, H // P, P, W // P, P)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, (H // P) * (W // P), C * P * P)


def unpatchify(p, cfg: DenoiserConfig):
    """Inverse of :func:`patchify`; works on arrays and tensors."""
    P, C = cfg.patch, cfg.channels
    hp, wp = cfg.height // P, cfg.width // P
    B = p.shape[0]
    p = p.reshape(B, hp, wp, C, P, P).transpose(0, 3, 1, 4, 2, 5)
    return p.reshape(B, C, cfg.height, cfg.width)


def caption_context(token_ids, gate: float = 1.0, null=False) -> TextContext:
    """A context whose embedding is filled in by the network at each timestep."""
    return TextContext(token_ids, None, gate, null)


def batch_context(batch: TrainingBatch) -> TextContext:
    return caption_context(batch.token_ids, batch.gate, batch.null)


def _forward(P: dict, cfg: DenoiserConfig, xt: np.ndarray, t, ctx: TextContext):
    B = xt.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    x = patchify(xt, cfg.patch)
    temb = sinusoidal(t, cfg.d_img)
    h = Tensor(x) @ P["patch.W"] + P["patch.b"] + P["pos"] + temb[:, None, :]

    z = time_modulate(embed_text(ctx.token_ids, P["embed_table"]), t, None, ctx.token_ids)
    tctx = TextContext(ctx.token_ids, z, ctx.gate, ctx.null)
    scale = 1.0 / np.sqrt(cfg.d_k)
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        u = layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
        q, k, v = u @ P[p + "self.W_q"], u @ P[p + "self.W_k"], u @ P[p + "self.W_v"]
        h = h + softmax(q @ k.swapaxes(-1, -2) * scale) @ v

        u = layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
        att = AttentionParams(P[p + "cross.W_q"], P[p + "cross.W_k"], P[p + "cross.W_v"])
        h = h + cross_attention(u, tctx, att)

        u = layer_norm(h, P[p + "ln3.g"], P[p + "ln3.b"])
        h = h + (u @ P[p + "ff.W1"] + P[p + "ff.b1"]).tanh() @ P[p + "ff.W2"] + P[p + "ff.b2"]

    u = layer_norm(h, P["out.ln.g"], P["out.ln.b"])
    # time-gated copy of the input pixels: makes eps ~ x_t at high noise easy to express
    skip = (Tensor(temb) @ P["out.skip"]).reshape((B, 1, cfg.patch_dim)) * x
    return unpatchify(u @ P["out.W"] + P["out.b"] + skip, cfg)


def _check_input(params: DenoiserParams, xt):
    cfg = params.config
    shape = (cfg.channels, cfg.height, cfg.width)
    if np.ndim(xt) != 4 or tuple(np.shape(xt)[1:]) != shape:
        raise ValueError(f"expected images of shape (B, {shape}), got {np.shape(xt)}")


def predict_eps(params: DenoiserParams, xt: np.ndarray, t, ctx: TextContext) -> np.ndarray:
    """Noise prediction for a batch ``xt`` of shape (B, C, H, W)."""
    _check_input(params, xt)
    view = {k: Tensor(v) for k, v in params.items()}
    return _forward(view, params.config, np.asarray(xt, dtype=np.float64), t, ctx).data


class NonFiniteError(FloatingPointError):
    pass


def backward(params: DenoiserParams, batch: TrainingBatch, sched: NoiseSchedule,
             wcfg: KLWeightConfig | None = None, weights: np.ndarray | None = None):
    """Weighted loss and its exact gradient for every parameter array.

    Pass either a weight config or an explicit length-T weight vector
    (omitting both gives the plain ELBO).
    """
    _check_input(params, batch.x0)
    if weights is None:
        weights = kl_weights(wcfg, sched.T) if wcfg is not None else np.ones(sched.T)
    view = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    cfg = params.config

    def eps_fn(xt, t, b):
        return _forward(view, cfg, xt, t, batch_context(b))

    total, lb = assemble_loss(eps_fn, batch, sched, weights)
    if not np.isfinite(lb.total):
        bad = next((k for k, v in params.items() if not np.all(np.isfinite(v))), "loss")
        raise NonFiniteError(f"loss is not finite (first non-finite array: {bad})")
    total.backward()
    grads = {}
    for k, tensor in view.items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {k}")
        grads[k] = g
    return lb, grads
