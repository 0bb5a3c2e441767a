"""Online tracking: per-frame association against trajectory tokens, Hungarian matching."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .association import (build_trajectory_token, empty_trajectory_scores, normalize,
                          score_pairs)
from .geometry import Detection
from .harness.motio import SequenceData, TrackRecord, TrackSet
from .model import CSCModel

ACTIVE, LOST, TERMINATED = "active", "lost", "terminated"


def _solve(cost: np.ndarray) -> Tuple[float, int]:
    if cost.size == 0:
        return 0.0, 0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum()), len(r)


def hungarian(cost) -> List[Tuple[int, int]]:
    """Minimum-cost matching of size ``min(M, N)``.

    Among optimal matchings the lexicographically smallest list of
    ``(row, col)`` pairs is returned, so ties resolve deterministically.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian needs finite costs")
    M, N = cost.shape
    best, _ = _solve(cost)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()) * max(M, N))
    free_cols = list(range(N))
    need = min(M, N)
    acc = 0.0
    pairs = []
    for r in range(M):
        if need == 0:
            break
        rest_rows = list(range(r + 1, M))
        chosen = None
        for c in free_cols:
            cols = [k for k in free_cols if k != c]
            sub_cost, size = _solve(cost[np.ix_(rest_rows, cols)]) if rest_rows and cols else (0.0, 0)
            if size != need - 1:
                continue
            if acc + cost[r, c] + sub_cost <= best + tol:
                chosen = c
                acc += cost[r, c]
                break
        if chosen is not None:
            pairs.append((r, chosen))
            free_cols.remove(chosen)
            need -= 1
    return pairs


@dataclass(frozen=True)
class TrackerConfig:
    beta: float = 0.3
    H: int = 24
    window: int = 24
    max_age: int = 30
    absent_logit: bool = False          # add the learned no-detection column at inference
    pool_size: int = 32
    seed: int = 0

    def __post_init__(self):
        # beta > 1 is allowed and disables association entirely
        if self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.H < 1 or self.window < 1 or self.max_age < 1:
            raise ValueError("H, window and max_age must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown tracker keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Trajectory:
    id: int
    history: List[Tuple[int, Detection, torch.Tensor]] = field(default_factory=list)
    state: str = ACTIVE
    miss_count: int = 0

    @property
    def last_frame(self) -> int:
        return self.history[-1][0]


@dataclass
class TrackerState:
    tracks: List[Trajectory] = field(default_factory=list)
    next_id: int = 1
    last_frame: int = -1
    pool: List[torch.Tensor] = field(default_factory=list)


class Tracker:
    """Stateful online tracker; feed frames in increasing order through :meth:`step`."""

    def __init__(self, model: CSCModel, config: TrackerConfig = TrackerConfig()):
        self.model = model
        self.config = config
        self.state = TrackerState()
        self.rng = np.random.default_rng(config.seed)
        self.last_probs = None

    def live_tracks(self) -> List[Trajectory]:
        return [t for t in self.state.tracks if t.state != TERMINATED]

    def _window_history(self, track: Trajectory, frame: int) -> List[torch.Tensor]:
        return [tok for f, _, tok in track.history if f > frame - self.config.window]

    @torch.no_grad()
    def association_probabilities(self, tokens: torch.Tensor, frame: int):
        """Probabilities of linking each live, in-window trajectory to each detection."""
        cands = [t for t in self.live_tracks() if self._window_history(t, frame)]
        if not cands or tokens.shape[0] == 0:
            return cands, None
        head = self.model.head
        trajs = [build_trajectory_token(self._window_history(t, frame), self.config.H) for t in cands]
        scores = score_pairs(trajs, tokens, head)
        empty = empty_trajectory_scores(tokens, self.state.pool, self.rng, head)
        absent = head.absent_scores(trajs) if self.config.absent_logit else None
        probs = normalize(scores, [frame] * tokens.shape[0], empty, absent)
        return cands, probs

    def step(self, image: np.ndarray, detections: Sequence[Detection], frame: Optional[int] = None
             ) -> List[TrackRecord]:
        if frame is None:
            frame = detections[0].frame if detections else self.state.last_frame + 1
        if frame <= self.state.last_frame:
            raise ValueError(f"frame {frame} arrived after frame {self.state.last_frame}")
        if any(d.frame != frame for d in detections):
            raise ValueError(f"detections do not all belong to frame {frame}")
        self.state.last_frame = frame
        with torch.no_grad():
            tokens = self.model.tokens_for_frame(image, list(detections))

        cands, probs = self.association_probabilities(tokens, frame)
        self.last_probs = probs
        det_track = {}
        if probs is not None:
            P = probs.probs[:len(cands)].double().numpy()
            for r, c in hungarian(-P):
                if P[r, c] > self.config.beta:
                    det_track[c] = cands[r]

        outputs = []
        matched = set()
        for i, det in enumerate(detections):
            track = det_track.get(i)
            if track is None:
                track = Trajectory(id=self.state.next_id)
                self.state.next_id += 1
                self.state.tracks.append(track)
                self.state.pool.append(tokens[i])
            track.history.append((frame, det, tokens[i]))
            track.history = track.history[-max(self.config.H, 1):]
            track.state = ACTIVE
            track.miss_count = 0
            matched.add(track.id)
            b = det.box
            outputs.append(TrackRecord(frame, track.id, b.x, b.y, b.w, b.h, det.confidence))
        del self.state.pool[:-self.config.pool_size]
        for track in self.live_tracks():
            if track.id in matched:
                continue
            track.miss_count += 1
            track.state = LOST
            if track.miss_count > self.config.max_age:
                track.state = TERMINATED
                track.history = []
        return outputs


def track_sequence(sequence: SequenceData, model: CSCModel, config: TrackerConfig = TrackerConfig(),
                   detections: Optional[Sequence[Detection]] = None) -> TrackSet:
    """Run the tracker over every frame; ``detections`` defaults to the sequence's own."""
    dets = sequence.detections if detections is None else detections
    per_frame: List[List[Detection]] = [[] for _ in range(sequence.num_frames)]
    for d in dets:
        per_frame[d.frame].append(d)
    tracker = Tracker(model, config)
    records: List[TrackRecord] = []
    model.eval()
    for f, frame_dets in enumerate(per_frame):
        records.extend(tracker.step(sequence.frames[f], frame_dets, frame=f))
    return TrackSet(records)
