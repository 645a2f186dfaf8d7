"""The assembled codec: every network the pipeline and trainer need.

A checkpoint stores the config next to the weights so a bundle is
self-describing. ``prior_hash`` digests the *quantized coding tables* of all
three priors — exactly the state encoder and decoder must share for a
bitstream to be decodable — and is embedded in every container header.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict
from pathlib import Path

import torch
import torch.nn as nn

from .core import CheckpointMismatchError, CodecConfig, ConfigError, require
from .enhancer import Discriminator, DualPathEnhancer, WeightGenerator
from .entropy import FactorizedPrior, ModelId
from .motion import FlowPyramidNet
from .mv_coding import LatentAutoencoder, MvPredictorNet

CHECKPOINT_VERSION = 1


class CodecModel(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.flow = FlowPyramidNet(config.flow_levels)
        self.mv_predictor = MvPredictorNet()
        self.mv_codec = LatentAutoencoder(2, config.latent_channels, config.latent_channels)
        self.res_codec = LatentAutoencoder(3, config.latent_channels, config.latent_channels)
        self.intra_codec = LatentAutoencoder(3, config.latent_channels, config.latent_channels)
        self.prior_mv = FactorizedPrior(config.latent_channels, config.prior_support)
        self.prior_res = FactorizedPrior(config.latent_channels, config.prior_support)
        self.prior_intra = FactorizedPrior(config.latent_channels, config.prior_support)
        self.mc_enhancer = DualPathEnhancer(config.channels)
        self.pqe_comp = DualPathEnhancer(config.channels)
        self.pqe_align = DualPathEnhancer(config.channels)
        self.pqe_weight_comp = WeightGenerator(6, config.channels)
        self.pqe_weight_align = WeightGenerator(6, config.channels)
        self.disc_mc = Discriminator(config.disc_channels)
        self.disc_pqe = Discriminator(config.disc_channels)

    def prior_for(self, model_id: ModelId) -> FactorizedPrior:
        return {ModelId.MV_DIFF: self.prior_mv,
                ModelId.RESIDUAL: self.prior_res,
                ModelId.INTRA: self.prior_intra}[ModelId(model_id)]

    def coding_tables(self) -> dict:
        """Freeze all priors into range-coder tables (one pass per sequence)."""
        return {mid: self.prior_for(mid).tables() for mid in ModelId}

    def prior_hash(self, tables: dict | None = None) -> bytes:
        tables = tables or self.coding_tables()
        h = hashlib.sha256()
        h.update(b"dgvc-priors-v1")
        for mid in sorted(ModelId):
            h.update(tables[mid].digest())
        return h.digest()

    def save_checkpoint(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "state_dict": self.state_dict(),
            "prior_hash": self.prior_hash(),
        }, path)

    @classmethod
    def load_checkpoint(cls, path) -> "CodecModel":
        path = Path(path)
        if not path.exists():
            raise CheckpointMismatchError(f"checkpoint not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=False)
        version = blob.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(
                f"checkpoint format {version!r} not supported (expected {CHECKPOINT_VERSION})")
        try:
            config = CodecConfig(**blob["config"])
        except (TypeError, ConfigError) as exc:
            raise CheckpointMismatchError(f"checkpoint config unusable: {exc}") from exc
        model = cls(config)
        model.load_state_dict(blob["state_dict"])
        model.eval()
        stored = blob.get("prior_hash")
        if stored is not None and stored != model.prior_hash():
            raise CheckpointMismatchError("prior tables do not match checkpoint digest")
        return model


def bundle_dir(root, metric: str, lambda_id: int) -> Path:
    return Path(root) / f"{metric.replace('-', '')}_lambda{lambda_id}"


def bundle_path(root, metric: str, lambda_id: int) -> Path:
    return bundle_dir(root, metric, lambda_id) / "checkpoint.pt"


def load_bundle(root, metric: str, lambda_id: int) -> CodecModel:
    path = bundle_path(root, metric, lambda_id)
    if not path.exists():
        raise CheckpointMismatchError(
            f"no checkpoint bundle for metric={metric} lambda={lambda_id} under {root}")
    model = CodecModel.load_checkpoint(path)
    require(model.config.lambda_id == lambda_id,
            f"bundle {path} trained at lambda {model.config.lambda_id}, not {lambda_id}",
            CheckpointMismatchError)
    require(model.config.distortion_metric == metric,
            f"bundle {path} trained for {model.config.distortion_metric}, not {metric}",
            CheckpointMismatchError)
    return model
