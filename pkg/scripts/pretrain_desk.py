"""Pretrain the shipped desk model.

    python scripts/pretrain_desk.py --steps 30000 --out checkpoints/run

Writes periodic checkpoints to --out and the final model to --final.
Pass --resume to continue from a training checkpoint.
"""

import argparse
import logging
import shutil
from dataclasses import replace
from pathlib import Path

from picotab import io
from picotab.model import ModelConfig
from picotab.train import TrainConfig, desk_prior, load_training_checkpoint, pretrain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=30000)
    ap.add_argument("--out", default="checkpoints/run")
    ap.add_argument("--final", default="checkpoints/desk.tpfn")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--resume")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrainConfig(steps=args.steps, seed=args.seed, out_dir=args.out, checkpoint_every=1000,
                      warmup_steps=500, log_every=100)
    resume = None
    if args.resume:
        resume = load_training_checkpoint(args.resume)
        cfg = replace(resume.train, steps=args.steps, out_dir=args.out)
    ckpt = pretrain(desk_prior(), ModelConfig(), cfg, resume=resume)
    Path(args.final).parent.mkdir(parents=True, exist_ok=True)
    # the shipped file keeps weights and configs, not optimizer moments
    ckpt.optimizer_state = None
    io.save_checkpoint(ckpt, args.final)
    logging.info("saved %s", args.final)


if __name__ == "__main__":
    main()
