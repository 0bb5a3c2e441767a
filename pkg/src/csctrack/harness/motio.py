"""MOTChallenge text files and on-disk sequence directories."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List

import numpy as np
from PIL import Image

from ..geometry import BoundingBox, Detection


class MOTParseError(ValueError):
    pass


@dataclass(frozen=True)
class TrackRecord:
    """One ``(frame, id, box)`` row; ``frame`` is 0-based, ids as written in the file."""
    frame: int
    id: int
    x: float
    y: float
    w: float
    h: float
    conf: float = 1.0

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.x, self.y, self.w, self.h)


@dataclass
class TrackSet:
    records: List[TrackRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, TrackSet) and self.records == other.records

    def sorted(self) -> "TrackSet":
        return TrackSet(sorted(self.records, key=lambda r: (r.frame, r.id)))

    def by_frame(self) -> Dict[int, List[TrackRecord]]:
        out: Dict[int, List[TrackRecord]] = {}
        for r in self.records:
            out.setdefault(r.frame, []).append(r)
        return out

    def ids(self) -> List[int]:
        return sorted({r.id for r in self.records})

    @classmethod
    def from_detections(cls, detections: Iterable[Detection]) -> "TrackSet":
        return cls([TrackRecord(d.frame, -1 if d.identity is None else d.identity,
                                d.box.x, d.box.y, d.box.w, d.box.h, d.confidence)
                    for d in detections])


def format_number(v: float) -> str:
    """Integral values without a decimal point, everything else as the shortest round-trip repr."""
    v = float(v)
    if v.is_integer():
        return str(int(v))
    return repr(v)


def read_mot(path, kind: str = "detections") -> TrackSet:
    """Parse ``frame,id,x,y,w,h,conf,...`` lines; frames become 0-based.

    ``kind`` is ``"detections"`` (ids forced to -1), ``"gt"`` or ``"results"``.
    """
    if kind not in ("detections", "gt", "results"):
        raise ValueError(f"unknown MOT file kind {kind!r}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            cols = line.split(",")
            if len(cols) < 6:
                raise MOTParseError(f"{path}:{lineno}: expected at least 6 columns, got {len(cols)}")
            try:
                frame = int(float(cols[0]))
                tid = int(float(cols[1]))
                x, y, w, h = (float(c) for c in cols[2:6])
                conf = float(cols[6]) if len(cols) > 6 else 1.0
            except ValueError as exc:
                raise MOTParseError(f"{path}:{lineno}: {exc}") from None
            if frame < 1:
                raise MOTParseError(f"{path}:{lineno}: frame numbers are 1-based, got {frame}")
            if kind == "detections":
                tid = -1
            records.append(TrackRecord(frame - 1, tid, x, y, w, h, conf))
    return TrackSet(records)


def write_mot(path, tracks: TrackSet) -> None:
    """Write results layout ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,-1,-1,-1``."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in tracks.records:
            fh.write(",".join([str(r.frame + 1), str(r.id), format_number(r.x), format_number(r.y),
                               format_number(r.w), format_number(r.h), format_number(r.conf),
                               "-1", "-1", "-1"]) + "\n")


def records_to_detections(tracks: TrackSet, with_identity: bool = True) -> List[Detection]:
    return [Detection(r.frame, r.box, min(max(r.conf, 0.0), 1.0),
                      r.id if (with_identity and r.id >= 0) else None) for r in tracks]


@dataclass
class SequenceData:
    """Frames plus ground-truth and detection lists for one video."""
    name: str
    frames: List[np.ndarray]
    gt: List[Detection]
    detections: List[Detection]
    visibility: Dict[tuple, float] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def image_size(self):
        h, w = self.frames[0].shape[:2]
        return w, h

    def detections_by_frame(self, source: str = "detections") -> List[List[Detection]]:
        dets = self.detections if source == "detections" else self.gt
        out: List[List[Detection]] = [[] for _ in range(self.num_frames)]
        for d in dets:
            out[d.frame].append(d)
        return out


def write_sequence(directory, seq: SequenceData) -> Path:
    root = Path(directory)
    (root / "img1").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(exist_ok=True)
    (root / "det").mkdir(exist_ok=True)
    for i, frame in enumerate(seq.frames):
        Image.fromarray(frame).save(root / "img1" / f"{i + 1:06d}.ppm")
    with open(root / "gt" / "gt.txt", "w") as fh:
        for d in seq.gt:
            vis = seq.visibility.get((d.frame, d.identity), 1.0)
            b = d.box
            fh.write(",".join([str(d.frame + 1), str(d.identity), format_number(b.x), format_number(b.y),
                               format_number(b.w), format_number(b.h),
                               format_number(d.confidence), "1",
                               format_number(round(vis, 4))]) + "\n")
    with open(root / "det" / "det.txt", "w") as fh:
        for d in seq.detections:
            b = d.box
            fh.write(",".join([str(d.frame + 1), "-1", format_number(b.x), format_number(b.y),
                               format_number(b.w), format_number(b.h), format_number(d.confidence),
                               "-1", "-1", "-1"]) + "\n")
    w, h = seq.image_size
    info = configparser.ConfigParser()
    info.optionxform = str
    info["Sequence"] = {"name": seq.name, "imDir": "img1", "frameRate": "30",
                        "seqLength": str(seq.num_frames), "imWidth": str(w), "imHeight": str(h),
                        "imExt": ".ppm"}
    with open(root / "seqinfo.ini", "w") as fh:
        info.write(fh)
    return root


def load_sequence(directory) -> SequenceData:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"sequence directory {root} does not exist")
    info = configparser.ConfigParser()
    info.optionxform = str
    info.read(root / "seqinfo.ini")
    sect = info["Sequence"] if info.has_section("Sequence") else {}
    name = sect.get("name", root.name)
    im_dir = root / sect.get("imDir", "img1")
    ext = sect.get("imExt", ".ppm")
    paths = sorted(im_dir.glob(f"*{ext}"))
    frames = [np.asarray(Image.open(p).convert("RGB")) for p in paths]
    gt: List[Detection] = []
    visibility = {}
    gt_path = root / "gt" / "gt.txt"
    if gt_path.exists():
        gt = records_to_detections(read_mot(gt_path, "gt"))
        for line in gt_path.read_text().splitlines():
            fields = line.strip().split(",")
            if len(fields) >= 9:
                visibility[(int(float(fields[0])) - 1, int(float(fields[1])))] = float(fields[8])
    det_path = root / "det" / "det.txt"
    dets = records_to_detections(read_mot(det_path, "detections"), False) if det_path.exists() else \
        [Detection(d.frame, d.box, d.confidence) for d in gt]
    return SequenceData(name=name, frames=frames, gt=gt, detections=dets, visibility=visibility)
