"""Trajectory/detection scoring and per-frame softmax normalisation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

INVALID_SCORE = -1e4


@dataclass
class TrajectoryToken:
    values: torch.Tensor        # (H, D)
    valid_mask: torch.Tensor    # (H,) bool

    @property
    def horizon(self) -> int:
        return self.values.shape[0]


@dataclass
class ScoreMatrix:
    raw: torch.Tensor           # (M, N)
    per_step: torch.Tensor      # (M, H, N)


@dataclass
class AssociationProbabilities:
    """Row-wise, frame-grouped association probabilities.

    ``probs`` has M+1 rows, the last one being the empty trajectory.
    ``absent_probs[j, g]`` is the no-detection mass of row j in frame group g
    (column order of ``frames``); None when no absent column was used.
    """
    probs: torch.Tensor
    det_frames: torch.Tensor
    log_probs: torch.Tensor
    frames: torch.Tensor
    absent_probs: Optional[torch.Tensor] = None
    absent_log_probs: Optional[torch.Tensor] = None


class AssociationHead(nn.Module):
    """Bilinear score ``(W_q t) . (W_k d) / sqrt(D)`` plus the learned background token."""

    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        # start from a plain dot product so early training already ranks by similarity
        nn.init.eye_(self.query.weight)
        nn.init.eye_(self.key.weight)
        self.background_token = nn.Parameter(torch.empty(dim).uniform_(-0.1, 0.1))
        self.absent_bias = nn.Parameter(torch.zeros(()))

    def pair_scores(self, rows: torch.Tensor, det_tokens: torch.Tensor) -> torch.Tensor:
        """``(..., D) x (N, D) -> (..., N)`` scaled dot products of projected tokens."""
        return self.query(rows) @ self.key(det_tokens).T / math.sqrt(self.dim)

    def absent_scores(self, traj_tokens: Sequence[TrajectoryToken]) -> torch.Tensor:
        """No-detection logit for each trajectory: its score against the background token."""
        scores = score_pairs(traj_tokens, self.background_token.unsqueeze(0), self).raw[:, 0]
        # a trajectory with no valid step can only be absent
        valid = torch.tensor([bool(t.valid_mask.any()) for t in traj_tokens])
        return torch.where(valid, scores + self.absent_bias, torch.zeros_like(scores))


def build_trajectory_token(history: Sequence[torch.Tensor], H: int) -> TrajectoryToken:
    """Most recent ``min(len, H)`` tokens fill the last rows; earlier rows are zero padding."""
    if len(history) == 0:
        raise ValueError("trajectory history is empty")
    recent = list(history)[-H:]
    D = recent[0].shape[-1]
    ref = recent[0]
    values = torch.zeros(H, D, dtype=ref.dtype, device=ref.device)
    values[H - len(recent):] = torch.stack(recent)
    mask = torch.zeros(H, dtype=torch.bool)
    mask[H - len(recent):] = True
    return TrajectoryToken(values, mask)


def stack_trajectories(traj_tokens: Sequence[TrajectoryToken]):
    H = max(t.horizon for t in traj_tokens)
    D = traj_tokens[0].values.shape[-1]
    ref = traj_tokens[0].values
    values = ref.new_zeros(len(traj_tokens), H, D)
    mask = torch.zeros(len(traj_tokens), H, dtype=torch.bool)
    for j, t in enumerate(traj_tokens):
        values[j, H - t.horizon:] = t.values
        mask[j, H - t.horizon:] = t.valid_mask
    return values, mask


def score_pairs(traj_tokens: Sequence[TrajectoryToken], det_tokens: torch.Tensor,
                head: AssociationHead) -> ScoreMatrix:
    if len(traj_tokens) == 0 or det_tokens.shape[0] == 0:
        raise ValueError("score_pairs needs at least one trajectory and one detection")
    values, mask = stack_trajectories(traj_tokens)
    if values.shape[-1] != det_tokens.shape[-1] or values.shape[-1] != head.dim:
        raise ValueError(f"token dimension mismatch: trajectories {values.shape[-1]}, "
                         f"detections {det_tokens.shape[-1]}, head {head.dim}")
    per_step = head.pair_scores(values, det_tokens)                # (M, H, N)
    weights = mask.to(per_step.dtype)
    counts = weights.sum(dim=1)                                     # (M,)
    summed = (per_step * weights.unsqueeze(-1)).sum(dim=1)
    raw = summed / counts.clamp(min=1.0).unsqueeze(-1)
    raw = torch.where((counts > 0).unsqueeze(-1), raw, torch.full_like(raw, INVALID_SCORE))
    return ScoreMatrix(raw=raw, per_step=per_step)


def normalize(scores: torch.Tensor, det_frames, empty_scores: torch.Tensor,
              absent_scores: Optional[torch.Tensor] = None) -> AssociationProbabilities:
    """Softmax of each row over the detections that share a frame.

    ``scores`` is the ``(M, N)`` raw matrix (a :class:`ScoreMatrix` is accepted);
    ``empty_scores`` becomes row M. With ``absent_scores`` every (row, frame)
    group gets one extra no-detection logit; it is either one value per row or
    a ``(rows, frames)`` matrix, with M or M+1 rows (a missing empty row gets none).
    """
    if isinstance(scores, ScoreMatrix):
        scores = scores.raw
    det_frames = torch.as_tensor(det_frames, dtype=torch.long)
    full = torch.cat([scores, empty_scores.reshape(1, -1).to(scores.dtype)], dim=0)
    frames = torch.unique(det_frames, sorted=True)
    log_probs = torch.empty_like(full)
    absent_log = None
    if absent_scores is not None:
        extra = absent_scores.to(full.dtype)
        if extra.dim() == 1:
            extra = extra.unsqueeze(1).expand(-1, len(frames))
        if extra.shape[0] == full.shape[0] - 1:
            extra = torch.cat([extra, extra.new_full((1, len(frames)), -math.inf)])
        absent_log = full.new_empty(full.shape[0], len(frames))
    for g, f in enumerate(frames.tolist()):
        idx = (det_frames == f).nonzero(as_tuple=True)[0]
        group = full[:, idx]
        if absent_scores is not None:
            group = torch.cat([group, extra[:, g:g + 1]], dim=1)
        lp = torch.log_softmax(group, dim=1)
        log_probs[:, idx] = lp[:, :len(idx)]
        if absent_log is not None:
            absent_log[:, g] = lp[:, -1]
    return AssociationProbabilities(
        probs=log_probs.exp(), det_frames=det_frames, log_probs=log_probs, frames=frames,
        absent_probs=None if absent_log is None else absent_log.exp(),
        absent_log_probs=absent_log)


def empty_trajectory_scores(det_tokens: torch.Tensor, unassociated_pool: Sequence[torch.Tensor],
                            rng, head: AssociationHead) -> torch.Tensor:
    """Score a single-step trajectory made of one pooled token (or the background token).

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if len(unassociated_pool) == 0:
        token = head.background_token
    else:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        token = unassociated_pool[int(rng.integers(len(unassociated_pool)))]
    traj = build_trajectory_token([token.to(det_tokens.dtype)], 1)
    return score_pairs([traj], det_tokens, head).raw[0]
