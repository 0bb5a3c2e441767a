import numpy as np
import pytest
from hypothesis import given, strategies as st

from csctrack.geometry import BoundingBox, Detection
from csctrack.harness.motio import (MOTParseError, TrackRecord, TrackSet, format_number,
                                    load_sequence, read_mot, write_mot, write_sequence)
from csctrack.harness.noise import NoiseConfig, inject_noise, max_stride, perturb_box, sample_shifts
from csctrack.harness.synth import (PRESETS, ScenarioConfig, crossing_overlaps, generate_sequence,
                                    scenario_preset)

import oracles

SMALL = ScenarioConfig(num_targets=3, crossings=1, frames=12, seed=4)


# synthetic scenes

def test_single_target_every_frame():
    seq = generate_sequence(ScenarioConfig(num_targets=1, crossings=0, frames=15))
    counts = [len(f) for f in seq.detections_by_frame("gt")]
    assert counts == [1] * 15


def test_same_seed_same_pixels():
    a, b = generate_sequence(SMALL), generate_sequence(SMALL)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    assert a.gt == b.gt and a.detections == b.detections
    c = generate_sequence(SMALL.replace(seed=5))
    assert not np.array_equal(a.frames[0], c.frames[0])


@pytest.mark.parametrize("seed", range(5))
def test_scheduled_crossing_overlaps(seed):
    cfg = ScenarioConfig(num_targets=2, crossings=1, crossing_frames=(50,), frames=100, seed=seed)
    seq = generate_sequence(cfg)
    boxes = {(d.frame, d.identity): d.box.as_tuple() for d in seq.gt}
    overlaps = [oracles.iou_xywh(boxes[(f, 1)], boxes[(f, 2)]) for f in range(45, 56)
                if (f, 1) in boxes and (f, 2) in boxes]
    assert max(overlaps) > 0
    assert crossing_overlaps(seq, 1, 2, range(45, 56))


def test_hard_preset_has_crossings_and_shared_base():
    cfg = scenario_preset("hard", seed=1)
    assert cfg.identical_base
    seq = generate_sequence(cfg)
    frames = range(seq.num_frames)
    ids = sorted({d.identity for d in seq.gt})
    hits = sum(crossing_overlaps(seq, a, b, frames) for i, a in enumerate(ids) for b in ids[i + 1:])
    assert hits >= cfg.crossings


@pytest.mark.parametrize("seed", range(4))
def test_gt_inside_image_and_identities_stable(seed):
    seq = generate_sequence(scenario_preset("hard", seed=seed, frames=40))
    W, H = seq.image_size
    for d in seq.gt:
        assert d.box.x >= 0 and d.box.y >= 0 and d.box.x2 <= W and d.box.y2 <= H
    sizes = {}
    for d in seq.gt:
        assert sizes.setdefault(d.identity, (d.box.w, d.box.h)) == (d.box.w, d.box.h)
    assert set(sizes) <= set(range(1, 7))


def test_detector_misses_hidden_targets():
    seq = generate_sequence(scenario_preset("hard", seed=2))
    considered = [(d.frame, d.box) for d in seq.gt if d.confidence > 0]
    assert sorted((d.frame, d.box.as_tuple()) for d in seq.detections) == \
        sorted((f, b.as_tuple()) for f, b in considered)
    for d in seq.gt:
        assert (d.confidence > 0) == (seq.visibility[(d.frame, d.identity)] >= 0.3)


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(num_targets=0)
    with pytest.raises(ValueError):
        ScenarioConfig(occlusion_rate=1.5)
    with pytest.raises(ValueError):
        ScenarioConfig(num_targets=3, crossings=2)
    with pytest.raises(ValueError):
        generate_sequence(ScenarioConfig(num_targets=1, crossings=0, image_size=(20, 20)))
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"targets": 3})
    with pytest.raises(ValueError):
        scenario_preset("medium")
    assert set(PRESETS) == {"easy", "hard"}


def test_occlusion_spells_hide_targets():
    seq = generate_sequence(ScenarioConfig(num_targets=2, crossings=0, frames=60, occlusion_rate=0.2))
    assert len(seq.gt) < 120


# noise

def _dets(n, size=50.0):
    return [Detection(0, BoundingBox(100.0, 100.0, size, size), 1.0) for _ in range(n)]


def test_identity_noise():
    dets = _dets(20)
    assert inject_noise(dets, NoiseConfig.identity(), 0) == dets


def test_noise_seeded():
    dets = _dets(50)
    assert inject_noise(dets, NoiseConfig(), 3) == inject_noise(dets, NoiseConfig(), 3)
    assert inject_noise(dets, NoiseConfig(), 3) != inject_noise(dets, NoiseConfig(), 4)


def test_monte_carlo_mean_shift():
    rng = np.random.default_rng(0)
    box = BoundingBox(100.0, 100.0, 50.0, 50.0)
    shifts = np.array([sample_shifts(box, NoiseConfig(), rng) for _ in range(10_000)])
    means = np.abs(shifts).mean(axis=0)
    # each direction: probability 0.25 times the mean of U[0, min(0.2 * 50, 20)]
    np.testing.assert_allclose(means, 1.25, rtol=0.05)
    assert np.mean(shifts > 0, axis=0) == pytest.approx([0.25] * 4, abs=0.015)


@given(w=st.floats(2, 300), h=st.floats(2, 300), seed=st.integers(0, 10_000))
def test_noise_bounds(w, h, seed):
    rng = np.random.default_rng(seed)
    box = BoundingBox(10.0, 20.0, w, h)
    moved = perturb_box(box, NoiseConfig(resize_range=(1.0, 1.0)), rng)
    assert abs(moved.x - box.x) <= max_stride(w, NoiseConfig()) + 1e-9
    assert abs(moved.y - box.y) <= max_stride(h, NoiseConfig()) + 1e-9
    scaled = perturb_box(box, NoiseConfig(shift_prob=(0, 0, 0, 0)), rng)
    assert 0.9 - 1e-12 <= scaled.w / w <= 1.1 + 1e-12
    assert 0.9 - 1e-12 <= scaled.h / h <= 1.1 + 1e-12
    assert scaled.center == pytest.approx(box.center)


def test_noise_clamped_to_image():
    dets = [Detection(0, BoundingBox(0.0, 0.0, 30.0, 30.0), 1.0)] * 200
    for d in inject_noise(dets, NoiseConfig(shift_prob=(1, 1, 1, 1)), 1, image_size=(40, 40)):
        assert d.box.x >= 0 and d.box.y >= 0 and d.box.x2 <= 40 and d.box.y2 <= 40


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(shift_prob=(0.5, 1.5, 0, 0))
    with pytest.raises(ValueError):
        NoiseConfig(resize_range=(1.05, 1.2))
    with pytest.raises(ValueError):
        NoiseConfig.from_dict({"prob": 0.3})
    assert NoiseConfig.from_dict({"shift_prob": 0.1}).shift_prob == (0.1,) * 4


# MOTChallenge files

def test_empty_file(tmp_path):
    (tmp_path / "a.txt").write_text("")
    assert len(read_mot(tmp_path / "a.txt")) == 0


def test_single_line(tmp_path):
    (tmp_path / "gt.txt").write_text("3,7,10.5,20,30,40,1,1,0.8\n")
    (r,) = read_mot(tmp_path / "gt.txt", "gt")
    assert r == TrackRecord(2, 7, 10.5, 20.0, 30.0, 40.0, 1.0)
    (d,) = read_mot(tmp_path / "gt.txt", "detections")
    assert d.id == -1


@pytest.mark.parametrize("line,lineno", [("1,2,3\n", 1), ("1,1,1,1,1,1\n1,x,1,1,1,1\n", 2),
                                         ("0,1,1,1,1,1\n", 1)])
def test_parse_errors(tmp_path, line, lineno):
    (tmp_path / "bad.txt").write_text(line)
    with pytest.raises(MOTParseError, match=f":{lineno}:"):
        read_mot(tmp_path / "bad.txt", "gt")


@given(seed=st.integers(0, 10_000))
def test_round_trip_bit_exact(tmp_path_factory, seed):
    r = np.random.default_rng(seed)
    recs = [TrackRecord(int(r.integers(0, 50)), int(r.integers(1, 20)),
                        *(float(v) for v in r.normal(50, 30, 2)),
                        *(float(v) for v in r.uniform(1, 80, 2)), float(r.random()))
            for _ in range(int(r.integers(0, 30)))]
    recs += [TrackRecord(1, 1, 3.0, 4.0, 5.0, 6.0, 1.0)]
    path = tmp_path_factory.mktemp("rt") / "res.txt"
    write_mot(path, TrackSet(recs))
    back = read_mot(path, "results")
    assert back == TrackSet(recs)
    write_mot(path.with_name("again.txt"), back)
    assert path.read_bytes() == path.with_name("again.txt").read_bytes()


def test_results_layout(tmp_path):
    write_mot(tmp_path / "r.txt", TrackSet([TrackRecord(0, 3, 1.0, 2.5, 10.0, 20.0, 1.0)]))
    assert (tmp_path / "r.txt").read_text() == "1,3,1,2.5,10,20,1,-1,-1,-1\n"
    assert format_number(0.1) == "0.1" and format_number(-2.0) == "-2"


def test_sequence_directory_round_trip(tmp_path):
    seq = generate_sequence(SMALL.replace(occlusion_rate=0.1))
    root = write_sequence(tmp_path / "s", seq)
    assert (root / "img1" / "000001.ppm").exists() and (root / "seqinfo.ini").exists()
    back = load_sequence(root)
    assert back.name == seq.name
    assert all(np.array_equal(a, b) for a, b in zip(back.frames, seq.frames))
    assert back.gt == seq.gt
    assert [(d.frame, d.box) for d in back.detections] == [(d.frame, d.box) for d in seq.detections]
    with pytest.raises(FileNotFoundError):
        load_sequence(tmp_path / "missing")
