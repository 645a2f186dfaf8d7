"""Command-line entry points: encode, decode, train, eval, selftest.

Exit codes: 0 success, 1 usage error, 2 corrupt stream, 3 checkpoint or
configuration mismatch, 4 other runtime failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .container import BitstreamContainer
from .core import (CodecConfig, CodecError, ConfigError, CorruptStreamError,
                   CheckpointMismatchError, Frame)
from .data import frame_to_uint8, load_sequence, read_manifest, save_sequence
from .entropy import (LatentCode, ModelId, FactorizedPrior, range_decode,
                      range_encode)
from .metrics import RdCurve, bdbr, ms_ssim, psnr, read_points_csv, rd_report
from .model import CodecModel, bundle_path, load_bundle
from .motion import warp_tensor
from .pipeline import GopPlan, decode_sequence, encode_sequence
from .synthetic import make_training_clips
from .training import TrainPlan, Trainer

CKPT_ROOT_ENV = "DGVC_CKPT_ROOT"


def _ckpt_root(args) -> Path:
    root = getattr(args, "ckpt", None) or os.environ.get(CKPT_ROOT_ENV)
    if not root:
        raise ConfigError(
            f"no checkpoint root: pass --ckpt or set {CKPT_ROOT_ENV}")
    return Path(root)


@dataclass(frozen=True)
class CliConfig:
    """Parsed command surface, normalized across subcommands."""

    subcommand: str
    input_path: Path | None = None
    output_path: Path | None = None
    ckpt_root: Path | None = None
    lambda_id: int | None = None
    metric: str = "mse"
    seed: int = 0
    desk_scale: int | None = None

    @classmethod
    def from_args(cls, args) -> "CliConfig":
        def opt(name):
            return getattr(args, name, None)

        return cls(
            subcommand=args.subcommand,
            input_path=Path(opt("input")) if opt("input") else None,
            output_path=Path(opt("output")) if opt("output") else None,
            ckpt_root=_ckpt_root(args) if args.subcommand in ("encode", "decode") else None,
            lambda_id=int(opt("lmbda")) if opt("lmbda") is not None else None,
            metric=opt("metric") or "mse",
            seed=opt("seed") or 0,
            desk_scale=opt("desk_scale"),
        )


def _quantized(frame: Frame) -> Frame:
    """The frame as it survives an 8-bit image round trip."""
    return Frame(torch.from_numpy(frame_to_uint8(frame).astype(np.float32) / 255.0),
                 frame.display_index)


def _load_input_frames(args):
    return load_sequence(args.input, args.layout, width=args.width,
                         height=args.height, frame_count=args.frames)


def _cmd_encode(args) -> int:
    if args.layout == "raw-planar" and None in (args.width, args.height,
                                                args.frames):
        print("encode: raw-planar input needs --width, --height and --frames",
              file=sys.stderr)
        return 1
    cfg = CliConfig.from_args(args)
    model = load_bundle(cfg.ckpt_root, cfg.metric, cfg.lambda_id)
    frames = _load_input_frames(args)
    result = encode_sequence(frames, model)
    result.container.write_file(args.output)
    qpsnr = [psnr(src, _quantized(rec))
             for src, rec in zip(frames, result.recon_frames)]
    qssim = [ms_ssim(src, _quantized(rec))
             for src, rec in zip(frames, result.recon_frames)]
    print(f"encoded {args.output}: frames={len(frames)} "
          f"bpp={float(result.bpp)!r} "
          f"psnr_db={sum(qpsnr) / len(qpsnr)!r} "
          f"msssim={sum(qssim) / len(qssim)!r}")
    return 0


def _cmd_decode(args) -> int:
    cfg = CliConfig.from_args(args)
    container = BitstreamContainer.read_file(args.input)
    model = load_bundle(cfg.ckpt_root, container.metric, container.lambda_id)
    frames = decode_sequence(container, model)
    written = save_sequence(frames, args.output)
    print(f"decoded {len(written)} frames into {args.output}")
    return 0


def _cmd_train(args) -> int:
    if args.plan:
        plan = TrainPlan.from_file(args.plan)
    else:
        plan = TrainPlan()
    overrides = {}
    for key in ("lmbda", "metric", "desk_scale", "seed", "batch_size",
                "crop_size"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        from dataclasses import replace
        plan = replace(plan, **overrides)
    if args.data:
        clips = []
        for record in read_manifest(args.data):
            frames = record.load()
            clips.append(torch.stack([f.chw().squeeze(0) for f in frames]))
    else:
        clips = make_training_clips(args.toy_clips, args.toy_frames,
                                    max(plan.crop_size, 64),
                                    max(plan.crop_size, 64), plan.seed)
    config = CodecConfig(lmbda=plan.lmbda, distortion_metric=plan.metric,
                         channels=args.channels,
                         latent_channels=args.latent_channels)
    torch.manual_seed(plan.seed)
    model = CodecModel(config)
    out = Path(args.output)
    result = Trainer(model, plan, clips, out_dir=out).train()
    bundle = bundle_path(out, plan.metric, config.lambda_id)
    model.save_checkpoint(bundle)
    print(f"trained {len(result.records)} iterations; "
          f"bundle at {bundle}; log at {result.log_path}")
    return 0


def _cmd_eval(args) -> int:
    anchor_path = Path(args.anchor)
    runs = {anchor_path.stem: read_points_csv(anchor_path)}
    for log in args.logs:
        path = Path(log)
        if path.stem in runs and path != anchor_path:
            raise ConfigError(f"duplicate run label {path.stem!r}")
        runs.setdefault(path.stem, read_points_csv(path))
    paths = rd_report(runs, anchor_path.stem, args.output)
    table = Path(paths["bdbr"]).read_text(encoding="utf-8")
    sys.stdout.write(table)
    print(f"report written to {args.output}")
    return 0


def _selftest_checks():
    torch.manual_seed(7)
    rng = np.random.default_rng(7)

    def warp_identity():
        x = torch.rand(1, 3, 24, 24)
        flow = torch.zeros(1, 2, 24, 24)
        assert torch.equal(warp_tensor(x, flow), x)

    def gop_orders():
        plan = GopPlan.build(16, 15)
        assert plan.coding_order() == [0, 15, 1, 2, 3, 4, 5, 6, 7,
                                       14, 13, 12, 11, 10, 9, 8]
        for n in range(1, 65):
            GopPlan.build(n, 15).check_references()

    def entropy_roundtrip():
        prior = FactorizedPrior(4, support=16)
        tables = prior.tables()
        sym = torch.from_numpy(rng.integers(-30, 30, (6, 6, 4)))
        code = LatentCode(sym, ModelId.RESIDUAL)
        blob = range_encode(code, tables)
        back = range_decode(blob, tables, (6, 6, 4), ModelId.RESIDUAL)
        assert torch.equal(back.symbols, code.symbols)

    def psnr_forms():
        base = Frame(torch.full((8, 8, 3), 0.5))
        assert psnr(base, base) == 99.0
        off = Frame(base.pixels + 16.0 / 255.0)
        expected = 10.0 * np.log10(255.0 ** 2 / 256.0)
        assert abs(psnr(base, off) - expected) < 1e-6

    def bdbr_zero():
        curve = RdCurve("a", "psnr", ((0.1, 30.0), (0.2, 32.0),
                                      (0.4, 34.0), (0.8, 36.0)))
        assert bdbr(curve, curve) == 0.0

    return [("warp zero-flow identity", warp_identity),
            ("gop coding order and references", gop_orders),
            ("entropy round trip", entropy_roundtrip),
            ("psnr closed forms", psnr_forms),
            ("bdbr self comparison", bdbr_zero)]


def _cmd_selftest(_args) -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            check()
        except AssertionError:
            failures += 1
            print(f"selftest FAIL: {name}")
        else:
            print(f"selftest ok: {name}")
    if failures:
        print(f"selftest: {failures} check(s) failed")
        return 4
    print("selftest: all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgvc", description="desk-scale learned video codec")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    enc = sub.add_parser("encode", help="compress a frame sequence")
    enc.add_argument("--in", dest="input", required=True)
    enc.add_argument("--out", dest="output", required=True)
    enc.add_argument("--lambda", dest="lmbda", type=int, required=True,
                     help="rate point id; selects the checkpoint bundle")
    enc.add_argument("--metric", choices=("mse", "ms-ssim"), default="mse")
    enc.add_argument("--ckpt", help=f"checkpoint root (or ${CKPT_ROOT_ENV})")
    enc.add_argument("--layout", choices=("image-directory", "raw-planar"),
                     default="image-directory")
    enc.add_argument("--width", type=int)
    enc.add_argument("--height", type=int)
    enc.add_argument("--frames", type=int)
    enc.set_defaults(handler=_cmd_encode)

    dec = sub.add_parser("decode", help="decompress a container to PNG frames")
    dec.add_argument("--in", dest="input", required=True)
    dec.add_argument("--out", dest="output", required=True)
    dec.add_argument("--ckpt", help=f"checkpoint root (or ${CKPT_ROOT_ENV})")
    dec.set_defaults(handler=_cmd_decode)

    tr = sub.add_parser("train", help="train a checkpoint bundle")
    tr.add_argument("--plan", help="key = value plan file")
    tr.add_argument("--data", help="clip manifest; omit to use synthetic clips")
    tr.add_argument("--out", dest="output", required=True)
    tr.add_argument("--lambda", dest="lmbda", type=float)
    tr.add_argument("--metric", choices=("mse", "ms-ssim"))
    tr.add_argument("--desk-scale", dest="desk_scale", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--crop-size", dest="crop_size", type=int)
    tr.add_argument("--channels", type=int, default=64)
    tr.add_argument("--latent-channels", dest="latent_channels", type=int,
                    default=128)
    tr.add_argument("--toy-clips", dest="toy_clips", type=int, default=12)
    tr.add_argument("--toy-frames", dest="toy_frames", type=int, default=7)
    tr.set_defaults(handler=_cmd_train)

    ev = sub.add_parser("eval", help="turn point logs into an RD/BDBR report")
    ev.add_argument("--logs", nargs="+", required=True)
    ev.add_argument("--anchor", required=True)
    ev.add_argument("--out", dest="output", required=True)
    ev.set_defaults(handler=_cmd_eval)

    st = sub.add_parser("selftest", help="run fast structural invariants")
    st.set_defaults(handler=_cmd_selftest)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.handler(args)
    except CorruptStreamError as exc:
        print(f"corrupt stream: {exc}", file=sys.stderr)
        return 2
    except (CheckpointMismatchError, ConfigError) as exc:
        print(f"checkpoint/config mismatch: {exc}", file=sys.stderr)
        return 3
    except CodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
