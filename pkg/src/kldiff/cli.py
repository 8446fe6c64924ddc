"""Command line: ``kldiff {gen-data,train,sample,eval,ablate}``.

Failures print one JSON line ``{"error": kind, "code": n, "message": ...}`` to stderr and
exit with the code listed in :data:`EXIT_CODES`.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .conditioning import Vocabulary
from .config import TrainConfig, load_config
from .dataio import (CheckpointError, load_checkpoint, load_dataset, save_checkpoint,
                     save_dataset, write_image)
from .experiment import evaluate_checkpoint, make_dataset, run_ablation
from .metrics import MetricReport
from .sampler import sample
from .schedules import ConfigError
from .trainer import (Trainer, TrainingDiverged, ablation_mode, params_from_checkpoint,
                      write_history)

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "missing-file": 4,
    "bad-input": 5,
    "diverged": 6,
    "checkpoint": CheckpointError.code,    # 10..13, one per checkpoint failure class
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(path) -> TrainConfig:
    return load_config(path) if path else TrainConfig()


def _dataset(args, cfg):
    if args.dataset:
        return load_dataset(args.dataset)
    return make_dataset(cfg)


def cmd_gen_data(args) -> None:
    cfg = _config(args.config)
    images, captions = make_dataset(cfg, args.seed)
    save_dataset(args.out, images, captions)
    print(f"wrote {len(captions)} scenes to {args.out}")


def cmd_train(args) -> None:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg = cfg.with_updates(train={"seed": args.seed})
    cfg = ablation_mode(cfg, args.mode)
    images, captions = _dataset(args, cfg)
    trainer = Trainer(cfg, images, captions).run()
    out = Path(args.out)
    save_checkpoint(out, trainer.checkpoint())
    write_history(out.with_suffix(".history.csv"), trainer.history)
    loss = trainer.history[-1]["loss"] if trainer.history else float("nan")
    print(f"wrote {out} after {trainer.epoch} epochs, final loss {loss:.6g}")


def cmd_sample(args) -> None:
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    meta = ckpt.metadata
    cfg = TrainConfig.from_dict(meta["config"])
    model = params_from_checkpoint(ckpt, "ema" if cfg.metrics.use_ema else "params")
    text = cfg.guidance.text
    images = sample(model, args.caption, cfg.noise_schedule(), args.seed, n=args.n,
                    guidance_scale=cfg.guidance.scale if text else 1.0,
                    vocab=Vocabulary(meta["vocab"][3:]), L=cfg.model.tokens,
                    gate=meta["gate"] if text else 0.0, null=not text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_image(out / f"sample_{i:03d}.ppm", img)
    print(f"wrote {len(images)} images to {out}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(ckpt.metadata["config"])
    images, captions = _dataset(args, cfg)
    report = evaluate_checkpoint(ckpt, images, captions, args.seed, args.n,
                                 run_id=Path(args.checkpoint).stem, mode=args.mode)
    row = report.csv_row()
    if args.out:
        Path(args.out).write_text(",".join(MetricReport.HEADER) + "\n" + row)
    sys.stdout.write(row)


def cmd_ablate(args) -> None:
    cfg = _config(args.config)
    images, captions = _dataset(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["mode,fid,is,alignment"]
    for mode, ckpt, rep in run_ablation(cfg, images, captions, args.seed):
        save_checkpoint(out / f"{mode}.kldf", ckpt)
        write_history(out / f"{mode}.history.csv", ckpt.metadata["history"])
        lines.append(f"{mode},{rep.fid!r},{rep.inception!r},{rep.alignment!r}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kldiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render the shapes dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, help="overrides data.seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model, write checkpoint and history CSV")
    t.add_argument("--config")
    t.add_argument("--dataset", help="npz from gen-data; generated from the config if absent")
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.add_argument("--mode", default="full", choices=["full", "no_llm", "no_kl", "neither"])
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write PPM samples for one caption")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--caption", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="FID, IS and alignment of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.add_argument("--n", type=int, help="generated images (default metrics.n_gen)")
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--mode", default="full", help="label for the report row")
    e.add_argument("--out", help="also write header + row to this CSV file")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score full, no_llm, no_kl, neither")
    a.add_argument("--config")
    a.add_argument("--dataset")
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def _fail(kind: str, exc: BaseException, code: int | None = None) -> int:
    code = EXIT_CODES[kind] if code is None else code
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(json.dumps({"error": kind, "code": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail("config", exc)
    except CheckpointError as exc:
        return _fail("checkpoint", exc, exc.code)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc)
    except TrainingDiverged as exc:
        return _fail("diverged", exc)
    except (ValueError, KeyError, OSError) as exc:
        return _fail("bad-input", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
