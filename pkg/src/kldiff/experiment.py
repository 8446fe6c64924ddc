"""Glue shared by the command line and the acceptance runs: evaluate a checkpoint, run the
four-way ablation grid."""
from __future__ import annotations

import logging

import numpy as np

from .conditioning import Vocabulary
from .config import TrainConfig
from .dataio import Checkpoint, gen_dataset
from .metrics import AttributeOracle, FeatureExtractor, MetricReport, evaluate
from .trainer import ABLATION_MODES, Trainer, ablation_mode, params_from_checkpoint

log = logging.getLogger(__name__)


def make_dataset(cfg: TrainConfig, seed: int | None = None):
    """The shapes dataset described by ``cfg.data``; ``seed`` overrides ``data.seed``."""
    d = cfg.data
    rng = np.random.default_rng(d.seed if seed is None else seed)
    images, captions, _ = gen_dataset(d.n, rng, d.height, d.width)
    return images, captions


def evaluate_checkpoint(ckpt: Checkpoint, images, captions, seed: int,
                        n_gen: int | None = None, run_id: str = "run",
                        mode: str = "full") -> MetricReport:
    """FID / IS / alignment of a trained checkpoint against ``images``."""
    meta = ckpt.metadata
    cfg = TrainConfig.from_dict(meta["config"])
    m = cfg.metrics
    model = params_from_checkpoint(ckpt, "ema" if m.use_ema else "params")
    text = cfg.guidance.text
    extractor = FeatureExtractor(m.extractor_seed, m.d_f, int(np.prod(np.shape(images)[1:])))
    return evaluate(model, images, captions, cfg.noise_schedule(), seed,
                    m.n_gen if n_gen is None else n_gen, Vocabulary(meta["vocab"][3:]),
                    cfg.model.tokens, gate=meta["gate"] if text else 0.0,
                    guidance_scale=cfg.guidance.scale if text else 1.0,
                    extractor=extractor,
                    oracle=AttributeOracle(cfg.data.height, cfg.data.width),
                    run_id=run_id, mode=mode)


def run_ablation(cfg: TrainConfig, images, captions, seed: int,
                 modes=ABLATION_MODES) -> list[tuple[str, Checkpoint, MetricReport]]:
    """Train and evaluate each ablation mode with the same data and seed."""
    out = []
    for mode in modes:
        run_cfg = ablation_mode(cfg, mode).with_updates(train={"seed": seed})
        ckpt = Trainer(run_cfg, images, captions).run().checkpoint()
        report = evaluate_checkpoint(ckpt, images, captions, seed, run_id=f"seed{seed}",
                                     mode=mode)
        log.info("%s: fid %.3f is %.3f alignment %.3f", mode, report.fid, report.inception,
                 report.alignment)
        out.append((mode, ckpt, report))
    return out
