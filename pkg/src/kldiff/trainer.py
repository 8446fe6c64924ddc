"""Training loop: Adam/SGD, EMA shadow weights and self-training from high-confidence samples.

Every `finetune.period` epochs the EMA weights (the slow-moving "earlier
version" of the model) draw images for each caption; images that the
attribute oracle scores at or above `finetune.tau` are kept, best first, and
mixed into later minibatches at ratio `finetune.mix`.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .conditioning import Vocabulary, default_vocabulary, tokenize_batch
from .config import TrainConfig
from .core import make_batch
from .dataio import Checkpoint
from .denoiser import DenoiserConfig, DenoiserParams, backward, init_params
from .metrics import AttributeOracle
from .sampler import sample
from .schedules import guidance_gate, kl_weights

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged in epoch {epoch} (loss {loss!r})")
        self.epoch, self.loss = epoch, loss


# -- optimizers --------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def hyper(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "momentum": self.momentum,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def _check_grads(grads):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")


def sgd_step(params: dict, grads: dict, state: OptimizerState):
    """Heavy-ball SGD; ``momentum = 0`` is plain gradient descent. Updates in place."""
    _check_grads(grads)
    for k, g in grads.items():
        if state.momentum:
            buf = state.m.get(k)
            buf = g.copy() if buf is None else state.momentum * buf + g
            state.m[k] = buf
            g = buf
        params[k] -= state.lr * g
    state.step += 1
    return params, state


def adam_step(params: dict, grads: dict, state: OptimizerState):
    _check_grads(grads)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def optimizer_step(params: dict, grads: dict, state: OptimizerState):
    step = adam_step if state.kind == "adam" else sgd_step
    return step(params, grads, state)


# -- EMA ------------------------------------------------------------------------

@dataclass
class EmaParams:
    decay: float
    shadow: dict

    @classmethod
    def of(cls, params: dict, decay: float) -> "EmaParams":
        return cls(decay, {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()})


def ema_update(ema: EmaParams, params: dict) -> EmaParams:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    r = ema.decay
    for k, v in params.items():
        ema.shadow[k] = r * ema.shadow[k] + (1.0 - r) * v
    return ema


# -- self-training buffer ------------------------------------------------------

@dataclass
class ReplayBuffer:
    capacity: int
    tau: float
    images: list = field(default_factory=list)
    captions: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def admit(self, image, caption: str, score: float, epoch: int) -> None:
        if score < self.tau:
            raise ValueError(f"score {score} below admission threshold {self.tau}")
        self.images.append(np.asarray(image, dtype=np.float64))
        self.captions.append(caption)
        self.scores.append(float(score))
        self.epochs.append(int(epoch))
        overflow = len(self.images) - self.capacity
        if overflow > 0:   # oldest entries leave first
            for lst in (self.images, self.captions, self.scores, self.epochs):
                del lst[:overflow]


def select_high_confidence(samples, scorer, tau: float, q: float) -> list[int]:
    """Indices of samples scoring >= tau, then the best ceil(q * count) of those.

    ``scorer(images, captions)`` returns one confidence in [0, 1] per sample.
    Ties keep the lower index; the result is returned in sample order.
    """
    if not samples:
        return []
    images = [s[0] for s in samples]
    captions = [s[1] for s in samples]
    scores = np.asarray(scorer(images, captions), dtype=np.float64)
    passing = [i for i in range(len(samples)) if scores[i] >= tau]
    keep = math.ceil(q * len(passing))
    ranked = sorted(passing, key=lambda i: -scores[i])   # stable
    return sorted(ranked[:keep])


# -- ablations -----------------------------------------------------------------

ABLATION_MODES = ("full", "no_llm", "no_kl", "neither")


def ablation_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    if mode == "full":
        return cfg
    updates = {}
    if mode in ("no_llm", "neither"):
        updates["guidance"] = {"text": False, "g_min": 0.0, "g_max": 0.0}
    if mode in ("no_kl", "neither"):
        updates["weights"] = {"kind": "uniform"}
    return cfg.with_updates(**updates)


# -- the loop ------------------------------------------------------------------

def model_config(cfg: TrainConfig, vocab: Vocabulary, C: int = 3) -> DenoiserConfig:
    m = cfg.model
    return DenoiserConfig(C, cfg.data.height, cfg.data.width, m.patch, m.d_img, m.d_txt,
                          m.d_k, m.n_blocks, m.hidden, len(vocab), "tanh", cfg.train.seed)


class Trainer:
    """Holds the complete mutable training state; :meth:`checkpoint` captures all of it."""

    def __init__(self, cfg: TrainConfig, images: np.ndarray, captions: list[str],
                 vocab: Vocabulary | None = None):
        cfg.validate()
        if len(images) == 0:
            raise ValueError("dataset is empty")
        self.cfg = cfg
        self.images = np.asarray(images, dtype=np.float64)
        self.captions = list(captions)
        self.vocab = vocab or default_vocabulary()
        self.token_ids = tokenize_batch(self.captions, self.vocab, cfg.model.tokens)
        self.sched = cfg.noise_schedule()
        if cfg.train.objective == "elbo":
            self.weights = np.ones(self.sched.T)
        else:
            self.weights = kl_weights(cfg.weight_config(), self.sched.T)
        self.oracle = None

        t = cfg.train
        self.params = init_params(model_config(cfg, self.vocab, self.images.shape[1]))
        self.opt = OptimizerState(t.optimizer, t.lr, t.momentum, t.beta1, t.beta2, t.eps)
        self.ema = EmaParams.of(self.params.arrays, t.ema_decay)
        self.buffer = ReplayBuffer(cfg.finetune.capacity, cfg.finetune.tau)
        self.rng = np.random.default_rng([t.seed, 0])
        self.epoch = 0
        self.history: list[dict] = []

    # -- helpers ---------------------------------------------------------------
    def gate(self, epoch: int) -> float:
        if not self.cfg.guidance.text:
            return 0.0
        return guidance_gate(self.cfg.ramp(), epoch)

    def ema_params(self) -> DenoiserParams:
        return DenoiserParams(self.params.config, {k: v.copy() for k, v in self.ema.shadow.items()})

    def eval_params(self) -> DenoiserParams:
        return self.ema_params() if self.cfg.metrics.use_ema else self.params

    def current_lr(self, epoch: int) -> float:
        t = self.cfg.train
        if t.lr_step_epochs <= 0:
            return t.lr
        return t.lr * t.lr_step_factor ** (epoch // t.lr_step_epochs)

    # -- epochs ----------------------------------------------------------------
    def run(self, epochs: int | None = None) -> "Trainer":
        """Train until ``epochs`` epochs are complete (default: the configured total)."""
        target = self.cfg.train.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch()
        return self

    def run_epoch(self) -> dict:
        cfg, e = self.cfg, self.epoch
        gate = self.gate(e)
        self.opt.lr = self.current_lr(e)
        B, n = cfg.train.batch_size, len(self.images)
        n_rep = int(round(cfg.finetune.mix * B)) if len(self.buffer) else 0
        n_real = max(1, B - n_rep)
        perm = self.rng.permutation(n)
        T = self.sched.T
        kl_sum, kl_cnt = np.zeros(T), np.zeros(T)
        totals = []
        for start in range(0, n, n_real):
            idx = perm[start:start + n_real]
            x0, ids = self.images[idx], self.token_ids[idx]
            if n_rep:
                pick = self.rng.integers(len(self.buffer), size=n_rep)
                x0 = np.concatenate([x0, np.stack([self.buffer.images[i] for i in pick])])
                rep_ids = tokenize_batch([self.buffer.captions[i] for i in pick],
                                         self.vocab, cfg.model.tokens)
                ids = np.concatenate([ids, rep_ids])
            if cfg.guidance.text:
                null = self.rng.random(len(x0)) < cfg.guidance.p_drop
            else:
                null = np.ones(len(x0), dtype=bool)
            batch = make_batch(x0, ids, null, gate, self.sched, self.rng)
            lb, grads = backward(self.params, batch, self.sched, weights=self.weights)
            if not np.isfinite(lb.total) or lb.total > cfg.train.max_loss:
                raise TrainingDiverged(e, lb.total)
            optimizer_step(self.params.arrays, grads, self.opt)
            ema_update(self.ema, self.params.arrays)
            totals.append(lb.total)
            kl_sum += lb.per_t * (len(batch) / T)
            kl_cnt += np.bincount(batch.t - 1, minlength=T)

        admitted = 0
        if cfg.finetune.enabled and (e + 1) % cfg.finetune.period == 0:
            admitted = self.finetune_round(gate)

        per_t = np.divide(kl_sum, kl_cnt, out=np.full(T, np.nan), where=kl_cnt > 0)
        quarters = np.array_split(per_t, 4) if T >= 4 else [per_t] * 4
        row = {"epoch": e + 1, "loss": float(np.mean(totals)),
               **{f"kl_q{i + 1}": float(np.nanmean(q)) if np.any(np.isfinite(q)) else float("nan")
                  for i, q in enumerate(quarters)},
               "gate": gate, "buffer": len(self.buffer), "admitted": admitted}
        self.history.append(row)
        self.epoch += 1
        log.info("epoch %d loss %.4g gate %.2f buffer %d", row["epoch"], row["loss"],
                 gate, row["buffer"])
        return row

    def finetune_round(self, gate: float) -> int:
        """Sample from the EMA weights, score, and admit the confident ones."""
        f = self.cfg.finetune
        if self.oracle is None:
            self.oracle = AttributeOracle(self.cfg.data.height, self.cfg.data.width)
        captions = sorted(set(self.captions)) * f.per_caption
        seed = int(self.rng.integers(2 ** 31))
        text = self.cfg.guidance.text
        imgs = sample(self.ema_params(), captions, self.sched, seed, vocab=self.vocab,
                      L=self.cfg.model.tokens, gate=gate if text else 0.0, null=not text)
        chosen = select_high_confidence(list(zip(imgs, captions)), self.oracle.match_scores,
                                        f.tau, f.q)
        if chosen:
            scores = self.oracle.match_scores(imgs[chosen], [captions[i] for i in chosen])
            for i, s in zip(chosen, scores):
                self.buffer.admit(imgs[i], captions[i], s, self.epoch)
        return len(chosen)

    # -- persistence -----------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        arrays = {f"params.{k}": v for k, v in self.params.items()}
        arrays.update({f"ema.{k}": v for k, v in self.ema.shadow.items()})
        arrays.update({f"opt.m.{k}": v for k, v in self.opt.m.items()})
        arrays.update({f"opt.v.{k}": v for k, v in self.opt.v.items()})
        if len(self.buffer):
            arrays["buffer.images"] = np.stack(self.buffer.images)
        meta = {
            "config": self.cfg.to_dict(),
            "model": self.params.describe(),
            "vocab": self.vocab.tokens,
            "schedule": self.sched.describe(),
            "optimizer": self.opt.hyper(),
            "ema_decay": self.ema.decay,
            "extractor_seed": self.cfg.metrics.extractor_seed,
            "rng_state": self.rng.bit_generator.state,
            "epoch": self.epoch,
            "gate": self.gate(max(self.epoch - 1, 0)),
            "history": self.history,
            "buffer": {"captions": self.buffer.captions, "scores": self.buffer.scores,
                       "epochs": self.buffer.epochs},
        }
        return Checkpoint(meta, arrays)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, images, captions) -> "Trainer":
        meta = ckpt.metadata
        cfg = TrainConfig.from_dict(meta["config"])
        tr = cls(cfg, images, captions, Vocabulary(meta["vocab"][3:]))
        tr.params = params_from_checkpoint(ckpt, "params")
        tr.ema = EmaParams(meta["ema_decay"], params_from_checkpoint(ckpt, "ema").arrays)
        o = meta["optimizer"]
        tr.opt = OptimizerState(o["kind"], o["lr"], o["momentum"], o["beta1"], o["beta2"],
                                o["eps"], step=o["step"])
        for name, arr in ckpt.arrays.items():
            if name.startswith("opt.m."):
                tr.opt.m[name[6:]] = arr.copy()
            elif name.startswith("opt.v."):
                tr.opt.v[name[6:]] = arr.copy()
        b = meta["buffer"]
        if b["captions"]:
            tr.buffer.images = list(ckpt.arrays["buffer.images"].copy())
        tr.buffer.captions, tr.buffer.scores = list(b["captions"]), list(b["scores"])
        tr.buffer.epochs = list(b["epochs"])
        tr.rng.bit_generator.state = meta["rng_state"]
        tr.epoch = meta["epoch"]
        tr.history = list(meta["history"])
        return tr


def params_from_checkpoint(ckpt: Checkpoint, prefix: str = "params") -> DenoiserParams:
    cfg = DenoiserConfig(**ckpt.metadata["model"])
    arrays = {k[len(prefix) + 1:]: v.copy() for k, v in ckpt.arrays.items()
              if k.startswith(prefix + ".")}
    return DenoiserParams(cfg, arrays)


def train(cfg: TrainConfig, images, captions, vocab: Vocabulary | None = None) -> Checkpoint:
    """Run the configured number of epochs from scratch; deterministic in (cfg, data)."""
    return Trainer(cfg, images, captions, vocab).run().checkpoint()


HISTORY_FIELDS = ("epoch", "loss", "kl_q1", "kl_q2", "kl_q3", "kl_q4", "gate", "buffer",
                  "admitted")


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


__all__ = ["OptimizerState", "sgd_step", "adam_step", "EmaParams", "ema_update",
           "ReplayBuffer", "select_high_confidence", "ablation_mode", "Trainer", "train",
           "TrainingDiverged", "params_from_checkpoint", "write_history"]
