import numpy as np
import pytest
from hypothesis import given, strategies as st

from csctrack.harness.motio import TrackRecord, TrackSet
from csctrack.metrics import DuplicateIdError, combine, evaluate, format_csv, format_table

import oracles


def _ts(rows):
    return TrackSet([TrackRecord(f, i, x, y, w, h, c) for f, i, x, y, w, h, c in rows])


def _two_targets(frames=4, swap_at=None):
    gt, pred = [], []
    for f in range(frames):
        gt += [(f, 1, 0.0, 0.0, 10.0, 10.0, 1.0), (f, 2, 50.0, 0.0, 10.0, 10.0, 1.0)]
        a, b = (20, 10) if swap_at is not None and f >= swap_at else (10, 20)
        pred += [(f, a, 1.0, 0.0, 10.0, 10.0, 1.0), (f, b, 51.0, 0.0, 10.0, 10.0, 1.0)]
    return _ts(gt), _ts(pred)


def _frames(ts):
    out = {}
    for r in ts:
        out.setdefault(r.frame, {})[r.id] = (r.x, r.y, r.w, r.h)
    return out


def _random_set(r, n_ids, frames):
    rows = []
    for i in range(1, n_ids + 1):
        x, y = r.uniform(0, 200, 2)
        for f in range(frames):
            if r.random() < 0.85:
                rows.append((f, i, float(x + 3 * f), float(y), 20.0, 30.0, 1.0))
    return _ts(rows)


def _perturb(r, gt, n_ids):
    rows = []
    for rec in gt:
        if r.random() < 0.1:
            continue
        pid = int(r.integers(1, n_ids + 2)) if r.random() < 0.15 else rec.id
        rows.append((rec.frame, pid, rec.x + float(r.normal(0, 3)), rec.y, rec.w, rec.h, 1.0))
    # keep ids unique per frame
    seen, out = set(), []
    for row in rows:
        if (row[0], row[1]) not in seen:
            seen.add((row[0], row[1]))
            out.append(row)
    return _ts(out)


def test_perfect():
    gt, _ = _two_targets()
    rep = evaluate(gt, gt)
    assert (rep.mota, rep.idf1, rep.id_switches, rep.fp, rep.fn) == (1.0, 1.0, 0, 0, 0)


def test_empty_predictions():
    gt, _ = _two_targets()
    rep = evaluate(TrackSet(), gt)
    assert rep.mota == 0.0 and rep.idf1 == 0.0 and rep.fn == 8


def test_swap_example():
    gt, pred = _two_targets(swap_at=2)
    rep = evaluate(pred, gt)
    assert rep.id_switches == 2
    assert rep.idf1 == pytest.approx(0.5)
    assert rep.idf1 == pytest.approx(oracles.idf1_from_frames(
        [_frames(gt)[f] for f in range(4)], [_frames(pred)[f] for f in range(4)]))
    assert rep.mota == pytest.approx(1 - 2 / 8)


def test_persistence_keeps_previous_match():
    # two predictions both cover gt 1 in frame 1; the one matched before keeps it
    gt = _ts([(0, 1, 0.0, 0.0, 10.0, 10.0, 1.0), (1, 1, 0.0, 0.0, 10.0, 10.0, 1.0)])
    pred = _ts([(0, 5, 2.0, 0.0, 10.0, 10.0, 1.0),
                (1, 5, 2.0, 0.0, 10.0, 10.0, 1.0), (1, 6, 0.0, 0.0, 10.0, 10.0, 1.0)])
    rep = evaluate(pred, gt)
    assert rep.id_switches == 0 and rep.fp == 1


def test_duplicate_ids():
    bad = _ts([(0, 1, 0.0, 0.0, 5.0, 5.0, 1.0), (0, 1, 9.0, 0.0, 5.0, 5.0, 1.0)])
    gt, _ = _two_targets(1)
    with pytest.raises(DuplicateIdError):
        evaluate(bad, gt)
    with pytest.raises(DuplicateIdError):
        evaluate(gt, bad)


def test_ignored_gt_boxes():
    gt = _ts([(0, 1, 0.0, 0.0, 10.0, 10.0, 1.0), (0, 2, 50.0, 0.0, 10.0, 10.0, 0.0)])
    pred = _ts([(0, 7, 0.0, 0.0, 10.0, 10.0, 1.0), (0, 8, 50.0, 0.0, 10.0, 10.0, 1.0)])
    rep = evaluate(pred, gt)
    assert (rep.fp, rep.fn, rep.num_gt, rep.num_pred, rep.idf1) == (0, 0, 1, 1, 1.0)
    rep = evaluate(TrackSet(pred.records[:1]), gt)
    assert rep.fn == 0


@given(seed=st.integers(0, 10_000))
def test_idf1_brute_force_and_self(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 5))
    gt = _random_set(r, n, 6)
    pred = _perturb(r, gt, n)
    rep = evaluate(pred, gt)
    F = range(6)
    gf, pf = _frames(gt), _frames(pred)
    want = oracles.idf1_from_frames([gf.get(f, {}) for f in F], [pf.get(f, {}) for f in F])
    assert rep.idf1 == pytest.approx(want)
    assert 0 <= rep.idf1 <= 1 and rep.mota <= 1
    me = evaluate(gt, gt)
    assert (me.mota, me.idf1, me.id_switches) == (1.0, 1.0, 0)


@given(seed=st.integers(0, 10_000))
def test_deleting_correct_prediction_never_helps(seed):
    r = np.random.default_rng(seed)
    gt = _random_set(r, 3, 5)
    base = evaluate(gt, gt)
    k = int(r.integers(len(gt)))
    fewer = TrackSet(gt.records[:k] + gt.records[k + 1:])
    rep = evaluate(fewer, gt)
    assert rep.mota <= base.mota and rep.idf1 <= base.idf1


def test_combine_and_formats():
    gt, pred = _two_targets(swap_at=2)
    a, b = evaluate(pred, gt), evaluate(gt, gt)
    pooled = combine({"a": a, "b": b})
    assert pooled.id_switches == 2 and pooled.num_gt == 16
    assert pooled.idf1 == pytest.approx((a.idtp + b.idtp) * 2 / 32)
    table = format_table([("a", a), ("b", b)])
    assert "IDF1" in table and len(table.splitlines()) == 4
    assert format_csv([("a", a)]).splitlines()[1].startswith("a,0.750000,0.500000,2,")
