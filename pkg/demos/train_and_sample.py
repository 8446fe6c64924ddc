"""
Train a small captioned model and draw from it
==============================================

About ten seconds of CPU: trains on a slice of the shapes dataset, then samples
each of four captions with and without guidance and reports how often the
attribute oracle agrees with the caption. Images land in ``out_dir/samples``.
Run: ``python demos/train_and_sample.py [out_dir]``
"""
import logging
import sys
from pathlib import Path

import numpy as np

from kldiff.config import TrainConfig
from kldiff.dataio import write_image
from kldiff.experiment import make_dataset
from kldiff.metrics import AttributeOracle
from kldiff.sampler import sample
from kldiff.trainer import Trainer, write_history

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "samples"
out.mkdir(parents=True, exist_ok=True)

cfg = TrainConfig().with_updates(
    weights={"kind": "exp-decay", "gamma": 7.0, "reverse": True},
    train={"epochs": 12, "batch_size": 16},
    finetune={"enabled": False},
    data={"n": 800},
)
images, captions = make_dataset(cfg)
trainer = Trainer(cfg, images, captions).run()
write_history(out / "history.csv", trainer.history)

# the EMA weights are the ones used for evaluation
model = trainer.ema_params()
oracle = AttributeOracle()
prompts = ["a red circle in the top-left", "a blue square in the bottom-right",
           "a green triangle in the top-right", "a yellow cross in the bottom-left"]
for scale in (1.0, 3.0):
    scores = []
    for i, caption in enumerate(prompts):
        imgs = sample(model, caption, trainer.sched, seed=i, n=8, guidance_scale=scale,
                      vocab=trainer.vocab, gate=trainer.gate(cfg.train.epochs - 1))
        scores.append(oracle.match_scores(imgs, [caption] * len(imgs)).mean())
        for j, img in enumerate(imgs[:4]):
            write_image(out / f"s{scale:g}_{i}_{j}.ppm", img)
    print(f"guidance {scale:g}: attribute match per caption",
          " ".join(f"{s:.2f}" for s in scores), f"(mean {np.mean(scores):.3f})")
print(f"images and history in {out}")
