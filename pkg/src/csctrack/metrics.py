"""CLEAR-MOT (MOTA, ID switches) and IDF1 evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import iou_matrix
from .harness.motio import TrackSet


class DuplicateIdError(ValueError):
    pass


@dataclass
class EvalReport:
    mota: float
    idf1: float
    id_switches: int
    fp: int
    fn: int
    num_gt: int = 0
    num_pred: int = 0
    idtp: int = 0
    matches: int = 0
    per_sequence: Dict[str, "EvalReport"] = field(default_factory=dict)

    def row(self) -> Dict[str, float]:
        return {"MOTA": self.mota, "IDF1": self.idf1, "IDSW": self.id_switches, "FP": self.fp,
                "FN": self.fn, "GT": self.num_gt}


def _check_unique(records, what: str, frame: int):
    ids = [r.id for r in records]
    if len(ids) != len(set(ids)):
        raise DuplicateIdError(f"duplicate {what} ids in frame {frame + 1}: {sorted(ids)}")


def _drop_ignored(G, P, iou_threshold: float):
    """Remove predictions that cover a gt box flagged as not to be considered (conf 0).

    Predictions are first matched to the considered boxes, so a prediction is
    only dropped when it does not match a real target.
    """
    ignored = [g for g in G if g.conf == 0]
    if not ignored or not P:
        return P
    kept = [g for g in G if g.conf != 0]
    used = set()
    if kept:
        ious = iou_matrix([g.box for g in kept], [p.box for p in P])
        cost = np.where(ious >= iou_threshold, 1.0 - ious, 1e6)
        for r, c in zip(*linear_sum_assignment(cost)):
            if ious[r, c] >= iou_threshold:
                used.add(c)
    rest = [k for k in range(len(P)) if k not in used]
    if not rest:
        return P
    ious = iou_matrix([g.box for g in ignored], [P[k].box for k in rest])
    drop = set()
    cost = np.where(ious >= iou_threshold, 1.0 - ious, 1e6)
    for r, c in zip(*linear_sum_assignment(cost)):
        if ious[r, c] >= iou_threshold:
            drop.add(rest[c])
    return [p for k, p in enumerate(P) if k not in drop]


def evaluate(predictions: TrackSet, gt: TrackSet, iou_threshold: float = 0.5,
             name: Optional[str] = None) -> EvalReport:
    """CLEAR and identity metrics; gt records with ``conf == 0`` are ignore regions."""
    pred_by = predictions.by_frame()
    gt_by = gt.by_frame()
    frames = sorted(set(pred_by) | set(gt_by))

    last_match: Dict[int, int] = {}    # gt id -> pred id of its latest match
    fp = fn = idsw = tp = 0
    pair_counts: Dict[Tuple[int, int], int] = {}
    n_gt = n_pred = 0
    for f in frames:
        G = gt_by.get(f, [])
        P = pred_by.get(f, [])
        _check_unique(G, "ground-truth", f)
        _check_unique(P, "predicted", f)
        P = _drop_ignored(G, P, iou_threshold)
        G = [g for g in G if g.conf != 0]
        n_gt += len(G)
        n_pred += len(P)
        if not G or not P:
            fp += len(P)
            fn += len(G)
            continue
        ious = iou_matrix([r.box for r in G], [r.box for r in P])
        valid = ious >= iou_threshold
        for gi, pi in zip(*np.nonzero(valid)):
            key = (G[gi].id, P[pi].id)
            pair_counts[key] = pair_counts.get(key, 0) + 1

        matched: Dict[int, int] = {}
        pred_index = {r.id: k for k, r in enumerate(P)}
        # keep last correspondences that are still valid
        for gi, g in enumerate(G):
            pid = last_match.get(g.id)
            pi = pred_index.get(pid)
            if pi is not None and valid[gi, pi] and pi not in matched.values():
                matched[gi] = pi
        rest_g = [i for i in range(len(G)) if i not in matched]
        rest_p = [i for i in range(len(P)) if i not in matched.values()]
        if rest_g and rest_p:
            sub = ious[np.ix_(rest_g, rest_p)]
            cost = np.where(sub >= iou_threshold, 1.0 - sub, 1e6)
            for r, c in zip(*linear_sum_assignment(cost)):
                if sub[r, c] >= iou_threshold:
                    matched[rest_g[r]] = rest_p[c]
        for gi, pi in matched.items():
            gid, pid = G[gi].id, P[pi].id
            if gid in last_match and last_match[gid] != pid:
                idsw += 1
            last_match[gid] = pid
        tp += len(matched)
        fp += len(P) - len(matched)
        fn += len(G) - len(matched)

    mota = 1.0 - (fp + fn + idsw) / n_gt if n_gt else (1.0 if fp == 0 else -float(fp))
    idtp = identity_true_positives(pair_counts)
    denom = n_gt + n_pred
    idf1 = 2.0 * idtp / denom if denom else 1.0
    report = EvalReport(mota=mota, idf1=idf1, id_switches=idsw, fp=fp, fn=fn, num_gt=n_gt,
                        num_pred=n_pred, idtp=idtp, matches=tp)
    if name is not None:
        report.per_sequence[name] = report
    return report


def identity_true_positives(pair_counts: Dict[Tuple[int, int], int]) -> int:
    """Best one-to-one identity matching over per-pair overlap counts."""
    if not pair_counts:
        return 0
    gids = sorted({g for g, _ in pair_counts})
    pids = sorted({p for _, p in pair_counts})
    gi = {g: k for k, g in enumerate(gids)}
    pj = {p: k for k, p in enumerate(pids)}
    w = np.zeros((len(gids), len(pids)))
    for (g, p), n in pair_counts.items():
        w[gi[g], pj[p]] = n
    r, c = linear_sum_assignment(w, maximize=True)
    return int(w[r, c].sum())


def combine(reports: Dict[str, EvalReport]) -> EvalReport:
    """Pool counts over sequences (CLEAR/ID metrics are micro-averaged)."""
    fp = sum(r.fp for r in reports.values())
    fn = sum(r.fn for r in reports.values())
    idsw = sum(r.id_switches for r in reports.values())
    n_gt = sum(r.num_gt for r in reports.values())
    n_pred = sum(r.num_pred for r in reports.values())
    idtp = sum(r.idtp for r in reports.values())
    mota = 1.0 - (fp + fn + idsw) / n_gt if n_gt else 1.0
    idf1 = 2.0 * idtp / (n_gt + n_pred) if n_gt + n_pred else 1.0
    return EvalReport(mota=mota, idf1=idf1, id_switches=idsw, fp=fp, fn=fn, num_gt=n_gt,
                      num_pred=n_pred, idtp=idtp, matches=sum(r.matches for r in reports.values()),
                      per_sequence={k: v for k, v in reports.items()})


def format_table(rows: Iterable[Tuple[str, EvalReport]]) -> str:
    rows = list(rows)
    header = f"{'name':<28}{'MOTA':>8}{'IDF1':>8}{'IDSW':>6}{'FP':>6}{'FN':>6}{'GT':>7}"
    lines = [header, "-" * len(header)]
    for name, r in rows:
        lines.append(f"{name:<28}{100 * r.mota:>8.1f}{100 * r.idf1:>8.1f}{r.id_switches:>6d}"
                     f"{r.fp:>6d}{r.fn:>6d}{r.num_gt:>7d}")
    return "\n".join(lines)


def format_csv(rows: Iterable[Tuple[str, EvalReport]]) -> str:
    lines = ["name,mota,idf1,id_switches,fp,fn,num_gt"]
    for name, r in rows:
        lines.append(f"{name},{r.mota:.6f},{r.idf1:.6f},{r.id_switches},{r.fp},{r.fn},{r.num_gt}")
    return "\n".join(lines)
