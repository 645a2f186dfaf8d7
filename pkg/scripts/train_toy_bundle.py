#!/usr/bin/env python3
"""Train a small bundle on synthetic clips, then encode/decode a demo clip.

    python3 scripts/train_toy_bundle.py --out runs/demo --desk-scale 3000

Afterwards the bundle works with the CLI:

    dgvc encode --in <frames>/ --out demo.dgvc --lambda 1024 --ckpt runs/demo
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from dgvc.core import CodecConfig, Frame
from dgvc.data import save_sequence
from dgvc.metrics import psnr
from dgvc.model import CodecModel, bundle_path
from dgvc.pipeline import decode_sequence, encode_sequence
from dgvc.synthetic import make_training_clips, moving_clip
from dgvc.training import TrainPlan, Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--lambda", dest="lmbda", type=float, default=1024.0)
    ap.add_argument("--metric", choices=("mse", "ms-ssim"), default="mse")
    ap.add_argument("--desk-scale", type=int, default=3000)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--latent-channels", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    plan = TrainPlan(lmbda=args.lmbda, metric=args.metric, batch_size=2,
                     crop_size=32, desk_scale=args.desk_scale, seed=args.seed)
    config = CodecConfig(lmbda=args.lmbda, distortion_metric=args.metric,
                         channels=args.channels,
                         latent_channels=args.latent_channels)
    torch.manual_seed(args.seed)
    model = CodecModel(config)
    clips = make_training_clips(10, 7, 64, 64, seed=args.seed + 1)
    Trainer(model, plan, clips, out_dir=out).train()
    bundle = bundle_path(out, args.metric, config.lambda_id)
    model.save_checkpoint(bundle)
    print(f"bundle saved to {bundle}")

    rng = np.random.default_rng(1234)
    demo, _ = moving_clip(48, 64, 16, rng)
    save_sequence(demo, out / "demo_frames")
    result = encode_sequence(demo, model)
    stream = out / "demo.dgvc"
    result.container.write_file(stream)
    decoded = decode_sequence(result.container, model)
    scores = [psnr(a, b) for a, b in zip(demo, decoded)]
    print(f"demo: {len(demo)} frames -> {stream} "
          f"({float(result.bpp):.4f} bpp, mean PSNR {np.mean(scores):.2f} dB)")


if __name__ == "__main__":
    main()
