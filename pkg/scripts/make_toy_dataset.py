#!/usr/bin/env python3
"""Render a synthetic clip set (PNG directories plus a manifest).

    python3 scripts/make_toy_dataset.py --out toy_data --clips 8 --frames 16
"""
import argparse

from dgvc.synthetic import write_toy_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--clips", type=int, default=8)
    ap.add_argument("--frames", type=int, default=16)
    ap.add_argument("--height", type=int, default=64)
    ap.add_argument("--width", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    manifest = write_toy_dataset(args.out, args.clips, args.frames,
                                 args.height, args.width, args.seed)
    print(f"wrote manifest {manifest}")


if __name__ == "__main__":
    main()
