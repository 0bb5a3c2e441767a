"""Full appearance model (encoder + fusion + association head) and checkpoint files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .association import AssociationHead
from .encoder import PatchEncoder
from .fusion import CSCFusion, FusionConfig
from .geometry import Detection, RegionConfig, RegionTriplet, build_region_triplet

CHECKPOINT_FORMAT = "csctrack-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    channels: Tuple[int, ...] = (8, 16, 32)
    patch_size: int = 32
    part_size: int = 16
    grid: Tuple[int, int] = (2, 2)
    pad_fraction: float = 0.1
    use_parts: bool = True
    use_context: bool = True
    fusion_mode: str = "attention"
    heads: int = 1
    layer_norm: bool = True
    readout: str = "object"

    @property
    def region(self) -> RegionConfig:
        return RegionConfig(grid=tuple(self.grid), part_size=self.part_size,
                            patch_size=self.patch_size, pad_fraction=self.pad_fraction)

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(dim=self.dim, use_parts=self.use_parts, use_context=self.use_context,
                            mode=self.fusion_mode, heads=self.heads, layer_norm=self.layer_norm,
                            readout=self.readout, num_parts=self.grid[0] * self.grid[1])

    @property
    def needs_parts(self) -> bool:
        return self.use_parts or self.fusion_mode == "concat"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("channels", "grid"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["grid"] = list(self.grid)
        return d


@dataclass
class PatchBatch:
    """Stacked triplet patches for N detections (channels-first float tensors)."""
    parts: Optional[torch.Tensor]       # (N, N_P, 3, p, p)
    semantic: torch.Tensor              # (N, 3, P, P)
    context: Optional[torch.Tensor]
    context_background: Optional[torch.Tensor]

    def __len__(self):
        return self.semantic.shape[0]


@dataclass
class LevelFeatures:
    parts: Optional[torch.Tensor]       # (N, N_P, D)
    semantic: torch.Tensor              # (N, D)
    context: Optional[torch.Tensor]
    context_background: Optional[torch.Tensor]


def stack_triplets(triplets: Sequence[RegionTriplet], parts=True, context=True,
                   background=True) -> PatchBatch:
    def chw(arrs):
        return torch.from_numpy(np.ascontiguousarray(np.stack(arrs).transpose(0, 3, 1, 2)))

    P = None
    if parts:
        P = chw([p for t in triplets for p in t.parts])
        P = P.view(len(triplets), -1, *P.shape[1:])
    return PatchBatch(
        parts=P,
        semantic=chw([t.semantic for t in triplets]),
        context=chw([t.context for t in triplets]) if context else None,
        context_background=chw([t.context_background for t in triplets]) if background else None,
    )


def to_float_image(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return np.asarray(image, dtype=np.float32)


class CSCModel(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        self.encoder = PatchEncoder(config.dim, config.channels, config.patch_size, config.part_size)
        self.fusion = CSCFusion(config.fusion)
        self.head = AssociationHead(config.dim)

    @property
    def dtype(self):
        return self.head.background_token.dtype

    def encode_levels(self, batch: PatchBatch, with_background: bool = False) -> LevelFeatures:
        """Run the shared encoder over every hierarchy level in one pass."""
        dt = self.dtype
        N = len(batch)
        S = self.config.patch_size
        chunks = [batch.semantic.to(dt)]
        n_parts = 0
        if self.config.needs_parts:
            parts = batch.parts.to(dt)
            n_parts = parts.shape[1]
            flat = parts.reshape(N * n_parts, *parts.shape[2:])
            chunks.append(self.encoder._prepare(flat))
        use_ctx = self.config.use_context
        if use_ctx:
            chunks.append(batch.context.to(dt))
        if with_background:
            chunks.append(batch.context_background.to(dt))
        feats = self.encoder(torch.cat([c.reshape(-1, 3, S, S) for c in chunks]))
        out = LevelFeatures(parts=None, semantic=feats[:N], context=None, context_background=None)
        pos = N
        if n_parts:
            out.parts = feats[pos:pos + N * n_parts].view(N, n_parts, -1)
            pos += N * n_parts
        if use_ctx:
            out.context = feats[pos:pos + N]
            pos += N
        if with_background:
            out.context_background = feats[pos:pos + N]
        return out

    def fuse_levels(self, feats: LevelFeatures) -> torch.Tensor:
        return self.fusion(feats.parts, feats.semantic, feats.context)

    def tokens_from_patches(self, batch: PatchBatch) -> torch.Tensor:
        return self.fuse_levels(self.encode_levels(batch))

    def triplets_for_frame(self, image: np.ndarray, detections: Sequence[Detection]) -> List[RegionTriplet]:
        img = to_float_image(image)
        return [build_region_triplet(img, d, detections, self.config.region) for d in detections]

    def tokens_for_frame(self, image: np.ndarray, detections: Sequence[Detection]) -> torch.Tensor:
        """CSC tokens ``(N, D)`` for all detections of one frame, in input order."""
        if len(detections) == 0:
            return torch.zeros(0, self.config.dim, dtype=self.dtype)
        frames = {d.frame for d in detections}
        if len(frames) != 1:
            raise ValueError(f"detections span several frames: {sorted(frames)}")
        triplets = self.triplets_for_frame(image, detections)
        batch = stack_triplets(triplets, parts=self.config.needs_parts,
                               context=self.config.use_context, background=False)
        return self.tokens_from_patches(batch)


def tokens_for_frame(detections, image, model: CSCModel) -> List[torch.Tensor]:
    return list(model.tokens_for_frame(image, detections))


def save_checkpoint(path, model: CSCModel, extra_config: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "config": extra_config or {},
        "tensors": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> Tuple[CSCModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a csctrack checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = CSCModel(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["tensors"])
    model.eval()
    return model, payload["config"]
