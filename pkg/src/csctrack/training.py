"""Association / feature losses, clip sampling and the training loop."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .association import (INVALID_SCORE, AssociationHead, AssociationProbabilities,
                          build_trajectory_token, empty_trajectory_scores, normalize, score_pairs,
                          stack_trajectories)
from .fusion import CSCFusion
from .geometry import BoundingBox, Detection, build_region_triplet, clamp_box
from .harness.motio import SequenceData
from .model import CSCModel, PatchBatch, stack_triplets, to_float_image

log = logging.getLogger(__name__)

ABSENT = -1
IGNORE = -2


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    T: int = 8
    H: int = 8
    alpha: float = 0.3
    lr: float = 1e-3
    weight_decay: float = 1e-4
    steps: int = 1000
    batch_clips: int = 4
    absent_mode: str = "logit"          # "logit" or "skip"
    normalize_features: bool = True
    feat_loss: Optional[bool] = None    # None: on when both parts and context are used
    exclude_current_step: bool = True   # score step q without the trajectory's own step-q token
    color_augment: bool = True          # per-clip channel permutation and gain
    box_jitter: float = 0.0             # max box center shift and size change, as a fraction of the box
    jitter_prob: float = 1.0            # fraction of clips whose boxes are jittered

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def __post_init__(self):
        if not 0.0 <= self.box_jitter < 1.0:
            raise ValueError(f"box_jitter must be in [0, 1), got {self.box_jitter}")
        if not 0.0 <= self.jitter_prob <= 1.0:
            raise ValueError(f"jitter_prob must be in [0, 1], got {self.jitter_prob}")


@dataclass
class LossReport:
    assoc: float
    feat: float
    total: float
    margin: float

    def csv(self, step: int) -> str:
        return f"{step},{self.assoc:.6f},{self.feat:.6f},{self.total:.6f}"


@dataclass
class ClipBatch:
    """T consecutive frames of one sequence with identity supervision.

    ``gt_assignment[j, q]`` indexes ``detections`` (the detection of trajectory
    ``track_ids[j]`` at clip step q) or is ``ABSENT``.
    """
    sequence: int
    start: int
    frames: List[np.ndarray]
    detections: List[Detection]
    det_steps: np.ndarray
    track_ids: List[int]
    gt_assignment: np.ndarray

    @property
    def T(self) -> int:
        return len(self.frames)


class ClipDataset:
    """Training sequences plus a per-frame cache of region patches."""

    def __init__(self, sequences: Sequence[SequenceData]):
        self.sequences = list(sequences)
        self._per_frame = []
        for seq in self.sequences:
            frames = seq.detections_by_frame("gt")
            for dets in frames:
                # gt boxes flagged 0 (targets the detector cannot see) carry no usable appearance
                dets[:] = sorted((d for d in dets if d.confidence > 0), key=lambda d: d.identity)
            self._per_frame.append(frames)
        self._cache: Dict[Tuple[int, int], PatchBatch] = {}

    def frame_detections(self, seq: int, frame: int) -> List[Detection]:
        return self._per_frame[seq][frame]

    def patches(self, seq: int, frame: int, model: CSCModel, jitter: float = 0.0,
                rng: Optional[np.random.Generator] = None) -> PatchBatch:
        """Region patches of one frame; with ``jitter > 0`` the boxes are perturbed and nothing is cached."""
        key = (seq, frame)
        if jitter == 0.0 and key in self._cache:
            return self._cache[key]
        dets = self.frame_detections(seq, frame)
        img = to_float_image(self.sequences[seq].frames[frame])
        if jitter > 0.0:
            size = (img.shape[1], img.shape[0])
            dets = [Detection(d.frame, clamp_box(jitter_box(d.box, jitter, rng), *size),
                              d.confidence, d.identity) for d in dets]
        triplets = [build_region_triplet(img, d, dets, model.config.region) for d in dets]
        batch = stack_triplets(triplets, parts=model.config.needs_parts,
                               context=model.config.use_context,
                               background=model.config.use_context)
        if jitter == 0.0:
            self._cache[key] = batch
        return batch


def jitter_box(box: BoundingBox, jitter: float, rng: np.random.Generator) -> BoundingBox:
    """Shift the center by up to ``jitter`` of the box size and rescale each side by ``1 +- jitter``."""
    dx, dy, sw, sh = rng.uniform(-jitter, jitter, size=4)
    w, h = box.w * (1.0 + sw), box.h * (1.0 + sh)
    cx, cy = box.x + box.w * (0.5 + dx), box.y + box.h * (0.5 + dy)
    return BoundingBox(cx - w / 2.0, cy - h / 2.0, w, h)


def sample_clip(dataset: ClipDataset, T: int, rng: np.random.Generator) -> ClipBatch:
    eligible = [i for i, s in enumerate(dataset.sequences) if s.num_frames >= T]
    if not eligible:
        raise ValueError(f"no sequence has at least T={T} frames")
    seq = eligible[int(rng.integers(len(eligible)))]
    start = int(rng.integers(dataset.sequences[seq].num_frames - T + 1))
    detections, steps = [], []
    for q in range(T):
        for d in dataset.frame_detections(seq, start + q):
            detections.append(d)
            steps.append(q)
    track_ids = sorted({d.identity for d in detections})
    row = {tid: j for j, tid in enumerate(track_ids)}
    gt = np.full((len(track_ids), T), ABSENT, dtype=np.int64)
    for i, (d, q) in enumerate(zip(detections, steps)):
        gt[row[d.identity], q] = i
    frames = dataset.sequences[seq].frames[start:start + T]
    return ClipBatch(seq, start, list(frames), detections, np.asarray(steps), track_ids, gt)


def association_loss(probs: AssociationProbabilities, gt_assignment: np.ndarray,
                     absent_mode: str = "logit") -> torch.Tensor:
    """Negative log-likelihood of the ground-truth assignment, summed over rows and steps.

    ``gt_assignment`` has one row per real trajectory; the empty row carries
    no target. ABSENT entries use the no-detection column (``absent_mode="logit"``)
    or are skipped (``"skip"``); IGNORE entries are always skipped.
    """
    gt = np.asarray(gt_assignment)
    M, T = gt.shape
    N = probs.log_probs.shape[1]
    if M > probs.log_probs.shape[0] - 1:
        raise ValueError(f"{M} trajectories but probabilities only have {probs.log_probs.shape[0] - 1}")
    group_of = {int(f): g for g, f in enumerate(probs.frames.tolist())}
    det_frames = probs.det_frames
    terms = []
    for j in range(M):
        for q in range(T):
            idx = int(gt[j, q])
            if idx == IGNORE:
                continue
            if idx == ABSENT:
                if absent_mode == "skip" or probs.absent_log_probs is None:
                    continue
                if q in group_of:
                    terms.append(probs.absent_log_probs[j, group_of[q]])
                continue
            if not 0 <= idx < N:
                raise IndexError(f"gt index {idx} out of range for {N} detections")
            if int(det_frames[idx]) != q:
                raise ValueError(f"gt index {idx} is on step {int(det_frames[idx])}, not {q}")
            terms.append(probs.log_probs[j, idx])
    if not terms:
        return probs.log_probs.new_zeros(())
    return -torch.stack(terms).sum()


def feature_triplet_loss(part_feats: torch.Tensor, semantic_feat: torch.Tensor,
                         context_bg_feat: torch.Tensor, fusion: CSCFusion, margin: float,
                         normalize_features: bool = True) -> torch.Tensor:
    """Hinge between the best part-attended distance and the background-attended distance.

    Accepts one detection (``(N_P, D), (D,), (D,)``) or a batch; returns a scalar
    or a ``(B,)`` vector accordingly.
    """
    single = semantic_feat.dim() == 1
    if single:
        part_feats, semantic_feat, context_bg_feat = (
            part_feats.unsqueeze(0), semantic_feat.unsqueeze(0), context_bg_feat.unsqueeze(0))
    B, NP, D = part_feats.shape
    obj = semantic_feat.unsqueeze(1).expand(B, NP, D).reshape(B * NP, D)
    attended_parts = fusion.cross(part_feats.reshape(B * NP, D), obj).view(B, NP, D)
    attended_bg = fusion.cross(semantic_feat, context_bg_feat)
    anchor = semantic_feat
    if normalize_features:
        attended_parts = F.normalize(attended_parts, dim=-1)
        attended_bg = F.normalize(attended_bg, dim=-1)
        anchor = F.normalize(anchor, dim=-1)
    pos = ((attended_parts - anchor.unsqueeze(1)) ** 2).sum(-1).min(dim=1).values
    neg = ((attended_bg - anchor) ** 2).sum(-1)
    loss = torch.clamp(pos - neg + margin, min=0.0)
    return loss[0] if single else loss


def _feat_loss_enabled(model: CSCModel, config: TrainConfig) -> bool:
    if config.feat_loss is not None:
        return bool(config.feat_loss) and model.config.use_context
    return model.config.use_parts and model.config.use_context and model.config.fusion_mode == "attention"


def concat_patches(batches: Sequence[PatchBatch]) -> PatchBatch:
    def cat(name):
        parts = [getattr(b, name) for b in batches]
        return None if parts[0] is None else torch.cat(parts)
    return PatchBatch(cat("parts"), cat("semantic"), cat("context"), cat("context_background"))


def leave_step_out_scores(traj_values: torch.Tensor, valid: torch.Tensor, row_steps: torch.Tensor,
                          det_tokens: torch.Tensor, det_steps: torch.Tensor, steps: torch.Tensor,
                          head: AssociationHead):
    """Scores that ignore the trajectory's own token from the step being scored.

    ``row_steps[j, h]`` is the clip step of trajectory row ``(j, h)``. Returns the
    ``(M, N)`` score matrix, the ``(M, len(steps))`` absent logits and the
    ``(M, N)`` count of rows each score averaged over.
    """
    per_step = head.pair_scores(traj_values, det_tokens)                        # (M, H, N)
    keep = valid.unsqueeze(-1) & (row_steps.unsqueeze(-1) != det_steps.view(1, 1, -1))
    w = keep.to(per_step.dtype)
    counts = w.sum(dim=1)
    raw = (per_step * w).sum(dim=1) / counts.clamp(min=1.0)
    raw = torch.where(counts > 0, raw, torch.full_like(raw, INVALID_SCORE))

    bg = head.pair_scores(traj_values, head.background_token.unsqueeze(0))[..., 0]   # (M, H)
    keep_g = valid.unsqueeze(-1) & (row_steps.unsqueeze(-1) != steps.view(1, 1, -1))
    wg = keep_g.to(bg.dtype)
    counts_g = wg.sum(dim=1)
    absent = (bg.unsqueeze(-1) * wg).sum(dim=1) / counts_g.clamp(min=1.0) + head.absent_bias
    absent = torch.where(counts_g > 0, absent, torch.zeros_like(absent))
    return raw, absent, counts


def augment_colors(batch: PatchBatch, rng: np.random.Generator, gain: float = 0.2) -> PatchBatch:
    """Same random channel permutation and per-channel gain for every patch of a clip."""
    perm = torch.as_tensor(rng.permutation(3))
    scale = torch.as_tensor(rng.uniform(1.0 - gain, 1.0 + gain, size=3), dtype=torch.float32)

    def apply(x, channel_dim):
        if x is None:
            return None
        x = x.index_select(channel_dim, perm)
        shape = [1] * x.dim()
        shape[channel_dim] = 3
        return (x * scale.view(shape)).clamp(0.0, 1.0)

    return PatchBatch(apply(batch.parts, 2), apply(batch.semantic, 1), apply(batch.context, 1),
                      apply(batch.context_background, 1))


def clip_losses(model: CSCModel, dataset: ClipDataset, clip: ClipBatch, config: TrainConfig,
                rng: Optional[np.random.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Forward one clip; returns ``(assoc_loss, feat_loss)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    jitter = config.box_jitter if rng.random() < config.jitter_prob else 0.0
    batch = concat_patches([dataset.patches(clip.sequence, clip.start + q, model, jitter, rng)
                            for q in range(clip.T)])
    if config.color_augment:
        batch = augment_colors(batch, rng)
    use_feat = _feat_loss_enabled(model, config)
    feats = model.encode_levels(batch, with_background=use_feat)
    tokens = model.fuse_levels(feats)

    trajs, row_steps = [], []
    for j in range(len(clip.track_ids)):
        idx = [int(i) for i in clip.gt_assignment[j] if i != ABSENT]
        trajs.append(build_trajectory_token([tokens[i] for i in idx], config.H))
        steps = np.full(config.H, -1, dtype=np.int64)
        recent = idx[-config.H:]
        steps[config.H - len(recent):] = clip.det_steps[recent]
        row_steps.append(steps)
    empty = empty_trajectory_scores(tokens, [], rng, model.head)
    gt = clip.gt_assignment
    if config.exclude_current_step:
        values, valid = stack_trajectories(trajs)
        det_steps = torch.as_tensor(clip.det_steps, dtype=torch.long)
        frames = torch.unique(det_steps, sorted=True)
        raw, absent, counts = leave_step_out_scores(
            values, valid, torch.as_tensor(np.stack(row_steps)), tokens, det_steps, frames,
            model.head)
        if config.absent_mode != "logit":
            absent = None
        # a trajectory seen only at step q has nothing to be scored with there
        gt = gt.copy()
        for j, q in zip(*np.nonzero(gt >= 0)):
            if counts[j, gt[j, q]] == 0:
                gt[j, q] = IGNORE
    else:
        raw = score_pairs(trajs, tokens, model.head).raw
        absent = model.head.absent_scores(trajs) if config.absent_mode == "logit" else None
    probs = normalize(raw, clip.det_steps, empty, absent)
    assoc = association_loss(probs, gt, config.absent_mode)

    if use_feat:
        feat = feature_triplet_loss(feats.parts, feats.semantic, feats.context_background,
                                    model.fusion, config.alpha, config.normalize_features).mean()
    else:
        feat = assoc.new_zeros(())
    return assoc, feat


def make_optimizer(model: CSCModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)


def train_step(model: CSCModel, optimizer: torch.optim.Optimizer, dataset: ClipDataset,
               clips: Sequence[ClipBatch], config: TrainConfig,
               rng: Optional[np.random.Generator] = None) -> LossReport:
    model.train()
    optimizer.zero_grad()
    assoc_terms, feat_terms = [], []
    for clip in clips:
        a, f = clip_losses(model, dataset, clip, config, rng)
        assoc_terms.append(a)
        feat_terms.append(f)
    assoc = torch.stack(assoc_terms).mean()
    feat = torch.stack(feat_terms).mean()
    total = assoc + feat
    if not torch.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss (assoc={assoc.item()}, feat={feat.item()}) on clips "
            f"{[(c.sequence, c.start) for c in clips]}")
    total.backward()
    optimizer.step()
    return LossReport(assoc=assoc.item(), feat=feat.item(), total=assoc.item() + feat.item(),
                      margin=config.alpha)


def train(model: CSCModel, dataset: ClipDataset, config: TrainConfig,
          log_file=None, on_step: Optional[Callable[[int, LossReport], None]] = None) -> List[LossReport]:
    """Run ``config.steps`` optimisation steps; one CSV log line per step when ``log_file`` is given."""
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    reports = []
    fh = open(log_file, "w") if log_file is not None else None
    try:
        if fh:
            fh.write("step,assoc_loss,feat_loss,total\n")
        for step in range(config.steps):
            clips = [sample_clip(dataset, config.T, rng) for _ in range(config.batch_clips)]
            report = train_step(model, optimizer, dataset, clips, config, rng)
            reports.append(report)
            if fh:
                fh.write(report.csv(step) + "\n")
            if on_step:
                on_step(step, report)
            if step % 50 == 0:
                log.info("step %d assoc %.4f feat %.4f", step, report.assoc, report.feat)
    finally:
        if fh:
            fh.close()
    model.eval()
    return reports
