"""Shared patch encoder: small conv stack followed by the two-layer projection f(.)."""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import RegionTriplet


class PatchShapeError(ValueError):
    pass


class PatchEncoder(nn.Module):
    """Maps ``(B, 3, S, S)`` patches to ``(B, dim)`` features.

    Part patches (``part_size``) are bilinearly upsampled to ``patch_size``
    first, so every hierarchy level goes through identical weights.
    """

    def __init__(self, dim: int = 64, channels: Sequence[int] = (8, 16, 32),
                 patch_size: int = 32, part_size: int = 16):
        super().__init__()
        self.dim = dim
        self.patch_size = patch_size
        self.part_size = part_size
        layers = []
        c_in = 3
        for c_out in channels:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()]
            c_in = c_out
        self.conv = nn.Sequential(*layers)
        self.project = nn.Sequential(
            nn.Linear(c_in, dim), nn.ReLU(),
            nn.Linear(dim, dim), nn.ReLU(),
        )

    def _prepare(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.dim() != 4 or patches.shape[1] != 3 or patches.shape[2] != patches.shape[3]:
            raise PatchShapeError(f"expected (B, 3, S, S) patches, got {tuple(patches.shape)}")
        size = patches.shape[-1]
        if size == self.patch_size:
            return patches
        if size == self.part_size:
            return F.interpolate(patches, size=(self.patch_size, self.patch_size),
                                 mode="bilinear", align_corners=True)
        raise PatchShapeError(
            f"patch resolution {size} is neither {self.patch_size} nor {self.part_size}")

    def backbone(self, patches: torch.Tensor) -> torch.Tensor:
        """Pooled CNN features before projection."""
        return self.conv(self._prepare(patches)).mean(dim=(2, 3))

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.project(self.backbone(patches))


def patch_to_tensor(patch: np.ndarray) -> torch.Tensor:
    """``HxWxC`` float array -> ``CxHxW`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.transpose(patch, (2, 0, 1))))


def encode_patch(patch, encoder: PatchEncoder) -> torch.Tensor:
    """Encode one ``HxWx3`` patch (numpy) or ``3xHxW`` tensor to a length-D vector."""
    if isinstance(patch, np.ndarray):
        if patch.ndim != 3 or patch.shape[2] != 3:
            raise PatchShapeError(f"expected HxWx3 patch, got {patch.shape}")
        patch = patch_to_tensor(patch)
    dtype = next(encoder.parameters()).dtype
    return encoder(patch.to(dtype).unsqueeze(0))[0]


def triplet_tensors(triplet: RegionTriplet) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    parts = torch.stack([patch_to_tensor(p) for p in triplet.parts])
    return (parts, patch_to_tensor(triplet.semantic), patch_to_tensor(triplet.context),
            patch_to_tensor(triplet.context_background))


def encode_triplet(triplet: RegionTriplet, encoder: PatchEncoder):
    """Return ``(part_feats [N_P, D], semantic [D], context [D], context_bg [D])``."""
    parts, sem, ctx, bg = triplet_tensors(triplet)
    dtype = next(encoder.parameters()).dtype
    part_feats = encoder(parts.to(dtype))
    rest = encoder(torch.stack([sem, ctx, bg]).to(dtype))
    return part_feats, rest[0], rest[1], rest[2]
