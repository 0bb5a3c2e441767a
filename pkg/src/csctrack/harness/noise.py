"""Detection-noise injection: random per-side shifts and random rescaling."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..geometry import BoundingBox, Detection, clamp_box

# shift directions, in the order used for ``shift_prob``
DIRECTIONS = ("left", "right", "up", "down")


@dataclass(frozen=True)
class NoiseConfig:
    shift_prob: Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    shift_max_fraction: float = 0.2
    shift_max_pixels: float = 20.0
    resize_range: Tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if len(self.shift_prob) != 4 or any(not 0.0 <= p <= 1.0 for p in self.shift_prob):
            raise ValueError(f"shift_prob must be four probabilities, got {self.shift_prob}")
        lo, hi = self.resize_range
        if not lo <= 1.0 <= hi:
            raise ValueError(f"resize_range must contain 1.0, got {self.resize_range}")

    @classmethod
    def identity(cls) -> "NoiseConfig":
        return cls(shift_prob=(0.0, 0.0, 0.0, 0.0), resize_range=(1.0, 1.0))

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown noise keys: {sorted(unknown)}")
        kw = dict(d)
        if "shift_prob" in kw:
            p = kw["shift_prob"]
            kw["shift_prob"] = tuple(p) if isinstance(p, (list, tuple)) else (float(p),) * 4
        if "resize_range" in kw:
            kw["resize_range"] = tuple(kw["resize_range"])
        return cls(**kw)


def max_stride(extent: float, noise: NoiseConfig) -> float:
    return min(noise.shift_max_fraction * extent, noise.shift_max_pixels)


def sample_shifts(box: BoundingBox, noise: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Stride applied towards each of (left, right, up, down); zero when that side did not fire."""
    extents = (box.w, box.w, box.h, box.h)
    fired = rng.random(4) < np.asarray(noise.shift_prob)
    strides = rng.random(4) * np.array([max_stride(e, noise) for e in extents])
    return np.where(fired, strides, 0.0)


def perturb_box(box: BoundingBox, noise: NoiseConfig, rng: np.random.Generator) -> BoundingBox:
    left, right, up, down = sample_shifts(box, noise, rng)
    x = box.x - left + right
    y = box.y - up + down
    lo, hi = noise.resize_range
    rw, rh = rng.uniform(lo, hi, size=2)
    cx, cy = x + box.w / 2.0, y + box.h / 2.0
    w, h = box.w * rw, box.h * rh
    return BoundingBox(cx - w / 2.0, cy - h / 2.0, w, h)


def inject_noise(detections: Sequence[Detection], noise: NoiseConfig, rng,
                 image_size: Optional[Tuple[int, int]] = None) -> List[Detection]:
    """Return noisy copies of ``detections``; ``image_size = (width, height)`` enables clamping."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = []
    for det in detections:
        box = perturb_box(det.box, noise, rng)
        if image_size is not None:
            box = clamp_box(box, *image_size)
        out.append(Detection(det.frame, box, det.confidence, det.identity))
    return out
