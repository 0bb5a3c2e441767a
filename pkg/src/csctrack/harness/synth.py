"""Synthetic multi-target videos with part accents, crossings and occluders."""
from __future__ import annotations

import colorsys
import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..geometry import BoundingBox, Detection, iou
from .motio import SequenceData


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "easy"
    num_targets: int = 5
    frames: int = 100
    image_size: Tuple[int, int] = (160, 120)          # (width, height)
    target_width: Tuple[int, int] = (14, 20)
    target_height: Tuple[int, int] = (28, 38)
    identical_base: bool = False                       # same body color/texture for every target
    accent_fraction: float = 0.5                       # accent side relative to the quadrant
    pixel_noise: float = 0.02
    brightness_jitter: float = 0.03
    speed_range: Tuple[float, float] = (0.3, 1.0)
    jitter: float = 0.5
    crossings: int = 2
    crossing_frames: Optional[Tuple[int, ...]] = None
    occlusion_rate: float = 0.0
    min_visibility: float = 0.3                        # detector misses targets hidden beyond this
    seed: int = 0

    def __post_init__(self):
        if self.num_targets <= 0 or self.frames <= 0:
            raise ValueError("num_targets and frames must be positive")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError(f"occlusion_rate must be in [0, 1], got {self.occlusion_rate}")
        if not 0.0 <= self.min_visibility <= 1.0:
            raise ValueError(f"min_visibility must be in [0, 1], got {self.min_visibility}")
        if 2 * self.crossings > self.num_targets:
            raise ValueError(f"{self.crossings} crossings need {2 * self.crossings} targets")
        if self.crossing_frames is not None and len(self.crossing_frames) != self.crossings:
            raise ValueError("crossing_frames must list one frame per crossing")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names - {"preset"}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        kw = dict(PRESETS.get(d.get("preset", ""), {}))
        kw.update({k: v for k, v in d.items() if k != "preset"})
        for key in ("image_size", "target_width", "target_height", "speed_range", "crossing_frames"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "easy": dict(name="easy", num_targets=5, frames=100, crossings=2),
    "hard": dict(name="hard", num_targets=6, frames=100, crossings=3, identical_base=True,
                 accent_fraction=0.6, pixel_noise=0.03, occlusion_rate=0.03),
}


def scenario_preset(preset: str, **overrides) -> ScenarioConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return ScenarioConfig(**{**PRESETS[preset], **overrides})


@dataclass
class _Target:
    w: int
    h: int
    base: np.ndarray
    stripe: np.ndarray
    accents: List[np.ndarray]
    path: np.ndarray                     # (frames, 2) top-left positions
    hidden: np.ndarray = field(default=None)   # (frames,) occluder spells


def _hsv(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float32)


def _reflect(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.full_like(p, lo)
    q = np.mod(p - lo, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


def _background(rng: np.random.Generator, W: int, H: int) -> np.ndarray:
    coarse = rng.random((H // 20 + 2, W // 20 + 2, 3)).astype(np.float32)
    ys = np.linspace(0, coarse.shape[0] - 1.001, H)
    xs = np.linspace(0, coarse.shape[1] - 1.001, W)
    y0, x0 = ys.astype(int), xs.astype(int)
    wy, wx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c = coarse
    smooth = (c[y0][:, x0] * (1 - wx) + c[y0][:, x0 + 1] * wx) * (1 - wy) + \
             (c[y0 + 1][:, x0] * (1 - wx) + c[y0 + 1][:, x0 + 1] * wx) * wy
    return (0.35 + 0.25 * smooth).astype(np.float32)


def _occlusion_spells(rng, frames: int, rate: float) -> np.ndarray:
    hidden = np.zeros(frames, dtype=bool)
    if rate <= 0:
        return hidden
    mean_len = 4.5
    p_start = rate / (mean_len * (1 - rate) + rate) if rate < 1 else 1.0
    t = 1
    while t < frames:
        if rng.random() < p_start:
            length = int(rng.integers(3, 7))
            hidden[t:t + length] = True
            t += length + 1
        else:
            t += 1
    return hidden


def _make_targets(config: ScenarioConfig, rng: np.random.Generator) -> List[_Target]:
    W, H = config.image_size
    F = config.frames
    n = config.num_targets
    hue0 = rng.random()
    shared_base = _hsv(rng.random(), 0.35, 0.75)
    shared_stripe = _hsv(rng.random(), 0.35, 0.55)
    targets = []
    for k in range(n):
        w = int(rng.integers(config.target_width[0], config.target_width[1] + 1))
        h = int(rng.integers(config.target_height[0], config.target_height[1] + 1))
        if w >= W or h >= H:
            raise ValueError(f"target {w}x{h} does not fit a {W}x{H} image")
        if config.identical_base:
            base, stripe = shared_base, shared_stripe
        else:
            hue = hue0 + k / n
            base = _hsv(hue, 0.8, 0.85)
            stripe = _hsv(hue + 0.04, 0.8, 0.6)
        accents = [_hsv(rng.random(), 0.9, 0.5 + 0.5 * rng.random()) for _ in range(4)]
        targets.append(_Target(w=w, h=h, base=base, stripe=stripe, accents=accents, path=None))

    t = np.arange(F, dtype=np.float64)
    order = rng.permutation(n)
    pairs = [(int(order[2 * c]), int(order[2 * c + 1])) for c in range(config.crossings)]
    if config.crossing_frames is not None:
        cross_frames = list(config.crossing_frames)
    else:
        cross_frames = [int(round((c + 1) * F / (config.crossings + 1))) for c in range(config.crossings)]
    lo_s, hi_s = config.speed_range

    def speed():
        return rng.uniform(lo_s, hi_s)

    assigned = set()
    for (a, b), fc in zip(pairs, cross_frames):
        ta, tb = targets[a], targets[b]
        mw, mh = max(ta.w, tb.w), max(ta.h, tb.h)
        mx = rng.uniform(0.25 * (W - mw), 0.75 * (W - mw))
        my = rng.uniform(0.25 * (H - mh), 0.75 * (H - mh))
        ang = rng.uniform(-0.5, 0.5)
        va = speed() * np.array([np.cos(ang), np.sin(ang)])
        vb = speed() * np.array([-np.cos(-ang), np.sin(-ang)])
        for tgt, v in ((ta, va), (tb, vb)):
            # centers meet at frame fc
            cx = mx + mw / 2 - tgt.w / 2
            cy = my + mh / 2 - tgt.h / 2
            tgt.path = np.stack([cx + v[0] * (t - fc), cy + v[1] * (t - fc)], axis=1)
        assigned.update((a, b))
    for k, tgt in enumerate(targets):
        if k in assigned:
            continue
        start = np.array([rng.uniform(0, W - tgt.w), rng.uniform(0, H - tgt.h)])
        ang = rng.uniform(0, 2 * np.pi)
        v = speed() * np.array([np.cos(ang), np.sin(ang)])
        tgt.path = start[None, :] + v[None, :] * t[:, None]
    for tgt in targets:
        phase = rng.uniform(0, 2 * np.pi, size=2)
        wobble = config.jitter * np.sin(t[:, None] * 0.3 + phase[None, :])
        p = tgt.path + wobble
        tgt.path = np.stack([_reflect(p[:, 0], 0, W - tgt.w), _reflect(p[:, 1], 0, H - tgt.h)], axis=1)
        tgt.hidden = _occlusion_spells(rng, F, config.occlusion_rate)
    return targets


def _render_target(canvas: np.ndarray, label: np.ndarray, idx: int, tgt: _Target,
                   x: int, y: int, accent_fraction: float):
    w, h = tgt.w, tgt.h
    body = np.empty((h, w, 3), dtype=np.float32)
    body[:] = tgt.base
    body[(np.arange(h) // 3) % 2 == 1] = tgt.stripe
    qw, qh = w // 2, h // 2
    s = max(2, int(round(min(qw, qh) * accent_fraction)))
    for q, color in enumerate(tgt.accents):
        r, c = divmod(q, 2)
        span_w = qw if c == 0 else w - qw
        span_h = qh if r == 0 else h - qh
        ax = c * qw + (span_w - s) // 2
        ay = r * qh + (span_h - s) // 2
        body[ay:ay + s, ax:ax + s] = color
    canvas[y:y + h, x:x + w] = body
    label[y:y + h, x:x + w] = idx


def generate_sequence(config: ScenarioConfig) -> SequenceData:
    """Render a sequence and its ground truth; identical configs give identical pixels."""
    rng = np.random.default_rng(config.seed)
    W, H = config.image_size
    targets = _make_targets(config, rng)
    background = _background(rng, W, H)
    frames, gt, dets, visibility = [], [], [], {}
    occluder = np.array([0.2, 0.2, 0.22], dtype=np.float32)
    for f in range(config.frames):
        canvas = background.copy()
        label = np.full((H, W), -1, dtype=np.int32)
        boxes = []
        for k, tgt in enumerate(targets):
            x, y = (int(round(v)) for v in tgt.path[f])
            boxes.append((x, y))
        # painter's order: lower bottom edge is further away
        order = sorted(range(len(targets)), key=lambda k: (boxes[k][1] + targets[k].h, k))
        for k in order:
            _render_target(canvas, label, k, targets[k], *boxes[k], config.accent_fraction)
        for k, tgt in enumerate(targets):
            if tgt.hidden[f]:
                x, y = boxes[k]
                x0, y0 = max(x - 2, 0), max(y - 2, 0)
                x1, y1 = min(x + tgt.w + 2, W), min(y + tgt.h + 2, H)
                canvas[y0:y1, x0:x1] = occluder
                label[y0:y1, x0:x1] = -1
        gain = 1.0 + config.brightness_jitter * rng.standard_normal()
        noisy = canvas * gain + config.pixel_noise * rng.standard_normal(canvas.shape).astype(np.float32)
        frames.append(np.clip(np.round(noisy * 255.0), 0, 255).astype(np.uint8))
        for k, tgt in enumerate(targets):
            if tgt.hidden[f]:
                continue
            x, y = boxes[k]
            box = BoundingBox(float(x), float(y), float(tgt.w), float(tgt.h))
            vis = float((label[y:y + tgt.h, x:x + tgt.w] == k).mean())
            visibility[(f, k + 1)] = vis
            # the gt confidence is the MOTChallenge "consider" flag: hidden targets are ignored
            seen = vis >= config.min_visibility
            gt.append(Detection(f, box, 1.0 if seen else 0.0, k + 1))
            if seen:
                dets.append(Detection(f, box, 1.0))
    return SequenceData(name=f"{config.name}-{config.seed:04d}", frames=frames, gt=gt,
                        detections=dets, visibility=visibility)


def crossing_overlaps(seq: SequenceData, a: int, b: int, frames: Sequence[int]) -> bool:
    """True when identities ``a`` and ``b`` overlap (IoU > 0) on any of ``frames``."""
    boxes = {(d.frame, d.identity): d.box for d in seq.gt}
    return any(iou(boxes[(f, a)], boxes[(f, b)]) > 0
               for f in frames if (f, a) in boxes and (f, b) in boxes)
