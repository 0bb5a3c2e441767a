"""Independent reference computations used as test oracles.

Plain Python / numpy loops, deliberately sharing no code with the package.
"""
from __future__ import annotations

import itertools
import math
from typing import Dict, List, Sequence, Tuple


def iou_xywh(a, b) -> float:
    ax2, ay2, bx2, by2 = a[0] + a[2], a[1] + a[3], b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax2, bx2) - max(a[0], b[0]))
    ih = max(0.0, min(ay2, by2) - max(a[1], b[1]))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def bilinear_pixel(img, y: float, x: float):
    """Value at real coordinate (y, x) from the four neighbours, coordinates clipped to the image."""
    H, W = len(img), len(img[0])
    y = min(max(y, 0.0), H - 1.0)
    x = min(max(x, 0.0), W - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    dy, dx = y - y0, x - x0
    return ((1 - dy) * ((1 - dx) * img[y0][x0] + dx * img[y0][x1])
            + dy * ((1 - dx) * img[y1][x0] + dx * img[y1][x1]))


def bilinear_resize(img, box, out_h: int, out_w: int):
    """Corner-aligned resample: sample k of n sits at ``start + k (extent - 1) / (n - 1)``."""
    x, y, w, h = box

    def coord(start, extent, n, k):
        return start + (extent - 1) / 2.0 if n == 1 else start + k * (extent - 1) / (n - 1)

    return [[bilinear_pixel(img, coord(y, h, out_h, i), coord(x, w, out_w, j))
             for j in range(out_w)] for i in range(out_h)]


def softmax(values: Sequence[float]) -> List[float]:
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = sum(e)
    return [v / s for v in e]


def grouped_softmax(scores: Sequence[Sequence[float]], frames: Sequence[int]) -> List[List[float]]:
    """Each row normalised separately over the columns that share a frame."""
    out = []
    for row in scores:
        probs = [0.0] * len(row)
        for f in sorted(set(frames)):
            cols = [i for i, g in enumerate(frames) if g == f]
            for i, p in zip(cols, softmax([row[i] for i in cols])):
                probs[i] = p
        out.append(probs)
    return out


def nll(probs: Sequence[Sequence[float]], gt: Sequence[Sequence[int]]) -> float:
    """-sum log probs[j][gt[j][q]] over entries that are not -1."""
    return -sum(math.log(probs[j][i]) for j, row in enumerate(gt) for i in row if i >= 0)


def attention(q: Sequence[Sequence[float]], k: Sequence[Sequence[float]],
              v: Sequence[Sequence[float]]) -> List[List[float]]:
    d = len(q[0])
    out = []
    for qi in q:
        logits = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(d) for kj in k]
        w = softmax(logits)
        out.append([sum(w[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return out


def scalar_attention_block(x: float, kv: float, wq: float, wk: float, wv: float, wo: float) -> float:
    """One-dimensional residual attention block without normalisation and a single key."""
    # a single key gets softmax weight 1, whatever the query
    return x + wo * (wv * kv)


def scalar_triplet_hinge(parts: Sequence[float], obj: float, bg: float, w: Tuple[float, ...],
                         margin: float) -> float:
    pos = min((scalar_attention_block(p, obj, *w) - obj) ** 2 for p in parts)
    neg = (scalar_attention_block(obj, bg, *w) - obj) ** 2
    return max(0.0, pos - neg + margin)


def brute_force_assignment(cost: Sequence[Sequence[float]]) -> float:
    """Minimum total cost over all matchings of size min(M, N)."""
    M, N = len(cost), len(cost[0])
    if M <= N:
        return min(sum(cost[r][c] for r, c in zip(range(M), cols))
                   for cols in itertools.permutations(range(N), M))
    return min(sum(cost[r][c] for c, r in zip(range(N), rows))
               for rows in itertools.permutations(range(M), N))


def brute_force_idtp(pair_counts: Dict[Tuple[int, int], int]) -> int:
    """Best one-to-one identity matching by enumerating every injective map."""
    gids = sorted({g for g, _ in pair_counts})
    pids = sorted({p for _, p in pair_counts})
    best = 0
    if len(gids) <= len(pids):
        for perm in itertools.permutations(pids, len(gids)):
            best = max(best, sum(pair_counts.get((g, p), 0) for g, p in zip(gids, perm)))
    else:
        for perm in itertools.permutations(gids, len(pids)):
            best = max(best, sum(pair_counts.get((g, p), 0) for g, p in zip(perm, pids)))
    return best


def idf1_from_frames(gt_frames, pred_frames, thr: float = 0.5) -> float:
    """IDF1 from per-frame ``{id: (x, y, w, h)}`` dicts via brute-force identity matching."""
    counts: Dict[Tuple[int, int], int] = {}
    n_gt = n_pred = 0
    for g, p in zip(gt_frames, pred_frames):
        n_gt += len(g)
        n_pred += len(p)
        for gid, gb in g.items():
            for pid, pb in p.items():
                if iou_xywh(gb, pb) >= thr:
                    counts[(gid, pid)] = counts.get((gid, pid), 0) + 1
    idtp = brute_force_idtp(counts) if counts else 0
    return 2.0 * idtp / (n_gt + n_pred)
