#!/usr/bin/env python3
"""Train the feature ladder on synthetic clips and print the trend table.

    python3 scripts/run_ablation.py --desk-scale 500 --seeds 0 1 2

The defaults mirror the acceptance recipe: fine-grained textures (so the
enhancer has honest headroom over plain warping), 64 training clips, a
path anchor of 1.0 so both enhancer paths stay usable on their own, and a
hot phase-1 learning rate. Expect ~8 minutes per seed on one CPU core.
Larger --desk-scale means fewer iterations (faster, noisier).
"""
import argparse

from dgvc.ablation import LADDER, run_ablation
from dgvc.core import CodecConfig
from dgvc.synthetic import make_training_clips, moving_clip
from dgvc.training import TrainPlan

import numpy as np


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--desk-scale", type=int, default=500)
    ap.add_argument("--lambda", dest="lmbda", type=float, default=1024.0)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--latent-channels", type=int, default=16)
    ap.add_argument("--crop-size", type=int, default=32)
    ap.add_argument("--train-clips", type=int, default=64)
    ap.add_argument("--eval-clips", type=int, default=4)
    ap.add_argument("--detail", type=int, default=8,
                    help="extra high-frequency gratings per clip texture")
    ap.add_argument("--max-speed", type=float, default=3.0)
    ap.add_argument("--path-anchor", type=float, default=1.0)
    args = ap.parse_args()

    config = CodecConfig(lmbda=args.lmbda, channels=args.channels,
                         latent_channels=args.latent_channels)
    plan = TrainPlan(lmbda=args.lmbda, desk_scale=args.desk_scale,
                     batch_size=2, crop_size=args.crop_size,
                     phase1_lr=1e-3, phase2_lr=1e-4,
                     path_anchor=args.path_anchor)
    train_clips = make_training_clips(args.train_clips, 5, 48, 48, seed=100,
                                      max_speed=args.max_speed,
                                      detail=args.detail)
    rng = np.random.default_rng(300)
    eval_clips = [moving_clip(48, 48, 4, rng, max_speed=args.max_speed,
                              detail=args.detail)[0]
                  for _ in range(args.eval_clips)]

    report = run_ablation(config, plan, args.seeds, train_clips, eval_clips,
                          log=print)
    print("\nseed-averaged Lagrangian cost (lambda*D + bits/frame):")
    for rung in LADDER:
        print(f"  {rung:>9}: {report.mean_costs[rung]:.3f}")
    for prev, nxt, ok in report.strict_improvements():
        print(f"  {prev} -> {nxt}: {'improved' if ok else 'NO IMPROVEMENT'}")
    dp = report.dual_path
    print(f"\ndual-path PSNR (dB): input {dp.psnr_input:.2f}, "
          f"structure {dp.psnr_structure:.2f}, texture {dp.psnr_texture:.2f}, "
          f"fused {dp.psnr_fused:.2f}")
    print(f"fused within 0.05 dB of best path: {dp.fused_beats_paths}; "
          f"both paths improve the input: {dp.both_paths_improve}")


if __name__ == "__main__":
    main()
