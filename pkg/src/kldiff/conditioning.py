"""Caption tokenization, text embeddings, timestep modulation and gated cross-attention.

The embedding table is a learnable stand-in for a language model's token
features. All array functions accept either numpy arrays or autodiff
:class:`~kldiff.autodiff.Tensor` parameters, so the same code serves the
forward pass during sampling and the recorded graph during training.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, softmax, take_rows
from .dataio import CAPTION_WORDS

PAD, UNK, NULL = "<pad>", "<unk>", "<null>"
RESERVED = (PAD, UNK, NULL)
PAD_ID = 0


class Vocabulary:
    def __init__(self, words):
        tokens = list(RESERVED) + [w for w in words if w not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate words in vocabulary")
        self.tokens = tokens
        self.lookup = {w: i for i, w in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.lookup

    def index(self, word: str) -> int:
        return self.lookup.get(word, self.lookup[UNK])

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens


def default_vocabulary() -> Vocabulary:
    return Vocabulary(CAPTION_WORDS)


_NON_WORD = re.compile(r"[^a-z0-9]+")


def normalize_caption(caption: str) -> list[str]:
    """Lowercase, turn every non-alphanumeric run into a word break, split."""
    return _NON_WORD.sub(" ", caption.lower()).split()


def tokenize(caption: str, vocab: Vocabulary, L: int = 8) -> np.ndarray:
    if L < 1:
        raise ValueError("token length L must be >= 1")
    ids = [vocab.index(w) for w in normalize_caption(caption)][:L]
    out = np.full(L, PAD_ID, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def tokenize_batch(captions, vocab: Vocabulary, L: int = 8) -> np.ndarray:
    return np.stack([tokenize(c, vocab, L) for c in captions])


def embed_text(token_ids: np.ndarray, table):
    """Rows of ``table`` for each id, with PAD rows forced to exact zeros."""
    token_ids = np.asarray(token_ids)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= table.shape[0]):
        raise IndexError("token id outside the embedding table")
    keep = (token_ids != PAD_ID)[..., None].astype(np.float64)
    if isinstance(table, Tensor):
        return take_rows(table, token_ids) * keep
    return np.asarray(table)[token_ids] * keep


def sinusoidal(t, d: int) -> np.ndarray:
    """Interleaved sin/cos encoding with frequencies 10000^(-2i/d); shape ``t.shape + (d,)``."""
    t = np.asarray(t, dtype=np.float64)
    i = np.arange((d + 1) // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * i / d)
    ang = t[..., None] * freqs
    enc = np.empty(t.shape + (2 * len(i),))
    enc[..., 0::2] = np.sin(ang)
    enc[..., 1::2] = np.cos(ang)
    return enc[..., :d]


def time_modulate(embed, t, T: int | None, token_ids: np.ndarray | None = None):
    """Add the timestep encoding to every non-PAD row.

    ``t`` is a scalar or one timestep per leading batch entry. PAD rows are
    taken from ``token_ids`` when given, else detected as all-zero rows.
    """
    t = np.asarray(t)
    if np.any(t < 1) or (T is not None and np.any(t > T)):
        raise ValueError(f"timestep outside 1..{T}")
    data = embed.data if isinstance(embed, Tensor) else np.asarray(embed)
    if token_ids is not None:
        keep = (np.asarray(token_ids) != PAD_ID)[..., None]
    else:
        keep = np.any(data != 0.0, axis=-1, keepdims=True)
    enc = sinusoidal(t, data.shape[-1])
    if enc.ndim == 1:
        enc = enc[None, :]
    else:
        enc = enc[:, None, :]
    return embed + enc * keep


@dataclass
class TextContext:
    """Text conditioning for a batch: ids ``(B, L)``, embeddings ``(B, L, d_txt)``.

    ``null`` marks dropped captions; their cross-attention contribution is zero.
    """
    token_ids: np.ndarray
    embed: object
    gate: float
    null: np.ndarray

    def __post_init__(self):
        self.token_ids = np.atleast_2d(np.asarray(self.token_ids, dtype=np.int64))
        null = np.broadcast_to(np.asarray(self.null, dtype=bool),
                               (self.token_ids.shape[0],)).copy()
        # an all-PAD caption carries no text
        null |= ~np.any(self.token_ids != PAD_ID, axis=1)
        self.null = null
        if not 0.0 <= self.gate <= 1.0:
            raise ValueError("gate must lie in [0, 1]")

    @property
    def mask(self) -> np.ndarray:
        return self.token_ids != PAD_ID

    @property
    def effective_gate(self) -> np.ndarray:
        """Per-example multiplier on the cross-attention residual, shape ``(B,)``."""
        return np.where(self.null, 0.0, self.gate)


def make_context(token_ids, table, t, T: int, gate: float = 1.0, null=False) -> TextContext:
    """Embed, time-modulate and wrap ``token_ids`` (``(B, L)``) for timesteps ``t``."""
    token_ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    z = time_modulate(embed_text(token_ids, table), t, T, token_ids)
    return TextContext(token_ids, z, float(gate), null)


@dataclass
class AttentionParams:
    W_q: object
    W_k: object
    W_v: object

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.W_q.shape[-1])


def attention_weights(img_feats, ctx: TextContext, params: AttentionParams):
    """Row-stochastic ``(B, N, L)`` weights; PAD columns get exactly zero."""
    q = img_feats @ params.W_q
    k = ctx.embed @ params.W_k
    logits = q @ k.swapaxes(-1, -2) * params.scale
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    return softmax(logits, ctx.mask[:, None, :])


def cross_attention(img_feats, ctx: TextContext, params: AttentionParams):
    """Gated cross-attention of image features ``(B, N, d_img)`` onto the caption."""
    A = attention_weights(img_feats, ctx, params)
    v = ctx.embed @ params.W_v
    out = (A @ v) * ctx.effective_gate[:, None, None]
    if not any(isinstance(x, Tensor) and x.requires_grad
               for x in (img_feats, ctx.embed, params.W_q, params.W_k, params.W_v)):
        return out.data if isinstance(out, Tensor) else out
    return out
