"""Seeded train/evaluate runs and the ablation axes built on top of them."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .fusion import VARIANTS
from .harness.motio import SequenceData, TrackSet
from .harness.noise import NoiseConfig, inject_noise
from .harness.synth import ScenarioConfig, generate_sequence
from .metrics import EvalReport, combine, evaluate, format_table
from .model import CSCModel, ModelConfig
from .tracker import TrackerConfig, track_sequence
from .training import ClipDataset, LossReport, TrainConfig, train

log = logging.getLogger(__name__)

AXES = ("levels", "fusion", "train_len", "infer_len", "noise")
LEVEL_VARIANTS = ("semantic", "semantic+compositional", "semantic+contextual", "full")
FUSION_VARIANTS = ("multi_region", "full")
NOISE_VARIANTS = ("semantic", "full")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    train_sequences: int = 20
    eval_sequences: int = 3
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    tracker: TrackerConfig = TrackerConfig()
    noise: NoiseConfig = NoiseConfig()
    seeds: Tuple[int, ...] = (0,)
    train_lengths: Tuple[int, ...] = (4, 8)
    windows: Tuple[int, ...] = (8, 16, 24)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def variant_model_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    kw = dict(VARIANTS[variant])
    kw["fusion_mode"] = kw.pop("mode", "attention")
    return dataclasses.replace(base, **kw)


def sequence_seeds(seed: int, count: int, offset: int) -> List[int]:
    # training and evaluation draw from disjoint seed ranges
    return [1000 * seed + offset + i for i in range(count)]


def training_sequences(config: ExperimentConfig, seed: int) -> List[SequenceData]:
    return [generate_sequence(config.scenario.replace(seed=s))
            for s in sequence_seeds(seed, config.train_sequences, 100)]


def evaluation_sequences(config: ExperimentConfig, seed: int) -> List[SequenceData]:
    return [generate_sequence(config.scenario.replace(seed=s))
            for s in sequence_seeds(seed, config.eval_sequences, 900)]


def train_model(model_config: ModelConfig, train_config: TrainConfig,
                sequences: Sequence[SequenceData], seed: int,
                log_file=None) -> Tuple[CSCModel, List[LossReport]]:
    """Fresh model (initialised from ``seed``) trained on ``sequences``."""
    torch.manual_seed(seed)
    model = CSCModel(model_config)
    reports = train(model, ClipDataset(sequences), dataclasses.replace(train_config, seed=seed),
                    log_file=log_file)
    return model, reports


def noisy_detections(sequence: SequenceData, noise: NoiseConfig, seed: int):
    rng = np.random.default_rng(seed)
    return inject_noise(sequence.detections, noise, rng, image_size=sequence.image_size)


def evaluate_model(model: CSCModel, sequences: Sequence[SequenceData], tracker: TrackerConfig,
                   noise: Optional[NoiseConfig] = None, noise_seed: int = 0) -> EvalReport:
    """Track every sequence (optionally with noisy detections) and pool the metrics."""
    reports: Dict[str, EvalReport] = {}
    for k, seq in enumerate(sequences):
        dets = None if noise is None else noisy_detections(seq, noise, noise_seed + k)
        pred = track_sequence(seq, model, tracker, detections=dets)
        reports[seq.name] = evaluate(pred, TrackSet.from_detections(seq.gt))
    return combine(reports)


@dataclass
class AblationRow:
    name: str
    reports: List[EvalReport] = field(default_factory=list)     # one per seed

    @property
    def idf1(self) -> float:
        return float(np.mean([r.idf1 for r in self.reports]))

    @property
    def mota(self) -> float:
        return float(np.mean([r.mota for r in self.reports]))

    @property
    def id_switches(self) -> float:
        return float(np.mean([r.id_switches for r in self.reports]))


@dataclass
class AblationResult:
    axis: str
    rows: List[AblationRow]
    seconds: float = 0.0

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def table(self) -> str:
        header = f"{'variant':<32}{'IDF1':>8}{'MOTA':>8}{'IDSW':>8}  per-seed IDF1"
        lines = [f"ablation: {self.axis}", header, "-" * len(header)]
        for r in self.rows:
            per = " ".join(f"{100 * x.idf1:.1f}" for x in r.reports)
            lines.append(f"{r.name:<32}{100 * r.idf1:>8.1f}{100 * r.mota:>8.1f}"
                         f"{r.id_switches:>8.1f}  {per}")
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["axis,variant,seed_index,idf1,mota,id_switches"]
        for r in self.rows:
            for k, rep in enumerate(r.reports):
                lines.append(f"{self.axis},{r.name},{k},{rep.idf1:.6f},{rep.mota:.6f},{rep.id_switches}")
        return "\n".join(lines)


class RunCache:
    """Per-seed sequences and trained models, so axes can share work."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.train_seqs: Dict[int, List[SequenceData]] = {}
        self.eval_seqs: Dict[int, List[SequenceData]] = {}
        self.models: Dict[tuple, CSCModel] = {}

    def sequences(self, seed):
        if seed not in self.train_seqs:
            self.train_seqs[seed] = training_sequences(self.config, seed)
            self.eval_seqs[seed] = evaluation_sequences(self.config, seed)
        return self.train_seqs[seed], self.eval_seqs[seed]

    def model(self, seed: int, variant: str, T: Optional[int] = None) -> CSCModel:
        T = self.config.train.T if T is None else T
        key = (seed, variant, T)
        if key not in self.models:
            train_seqs, _ = self.sequences(seed)
            t0 = time.time()
            mc = variant_model_config(self.config.model, variant)
            tc = dataclasses.replace(self.config.train, T=T, H=max(self.config.train.H, T))
            self.models[key], _ = train_model(mc, tc, train_seqs, seed)
            log.info("trained %s (seed %d, T=%d) in %.0fs", variant, seed, T, time.time() - t0)
        return self.models[key]


def run_ablation(axis: str, config: ExperimentConfig, cache: Optional[RunCache] = None) -> AblationResult:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    cache = cache or RunCache(config)
    t0 = time.time()
    rows: List[AblationRow] = []

    def add(name, seed, model, tracker=config.tracker, noise=None):
        _, evals = cache.sequences(seed)
        rep = evaluate_model(model, evals, tracker, noise=noise, noise_seed=1000 * seed)
        for r in rows:
            if r.name == name:
                r.reports.append(rep)
                return
        rows.append(AblationRow(name, [rep]))

    for seed in config.seeds:
        if axis in ("levels", "fusion"):
            for v in (LEVEL_VARIANTS if axis == "levels" else FUSION_VARIANTS):
                add(v, seed, cache.model(seed, v))
        elif axis == "train_len":
            for T in config.train_lengths:
                add(f"T={T}", seed, cache.model(seed, "full", T))
        elif axis == "infer_len":
            model = cache.model(seed, "full")
            for w in config.windows:
                add(f"window={w}", seed, model, dataclasses.replace(config.tracker, window=w))
        else:
            for v in NOISE_VARIANTS:
                model = cache.model(seed, v)
                add(f"{v}", seed, model)
                add(f"{v}*", seed, model, noise=config.noise)
    if axis == "noise":
        rows = _with_noise_deltas(rows)
    return AblationResult(axis, rows, time.time() - t0)


def _with_noise_deltas(rows: List[AblationRow]) -> List[AblationRow]:
    out = []
    by_name = {r.name: r for r in rows}
    for v in NOISE_VARIANTS:
        clean, noisy = by_name[v], by_name[f"{v}*"]
        delta = [dataclasses.replace(c, idf1=c.idf1 - n.idf1, mota=c.mota - n.mota,
                                     id_switches=n.id_switches - c.id_switches, per_sequence={})
                 for c, n in zip(clean.reports, noisy.reports)]
        out += [clean, noisy, AblationRow(f"{v} drop", delta)]
    return out


def format_rows(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    return format_table(rows)


SECTIONS = ("scenario", "data", "model", "train", "tracker", "noise", "ablation")


def experiment_from_dict(d: dict) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from the nested config-file layout."""
    d = dict(d or {})
    unknown = set(d) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    data = dict(d.get("data") or {})
    bad = set(data) - {"train_sequences", "eval_sequences"}
    if bad:
        raise ValueError(f"unknown data keys: {sorted(bad)}")
    abl = dict(d.get("ablation") or {})
    bad = set(abl) - {"seeds", "train_lengths", "windows"}
    if bad:
        raise ValueError(f"unknown ablation keys: {sorted(bad)}")
    scenario = dict(d.get("scenario") or {})
    if "preset" not in scenario and "name" not in scenario:
        scenario["preset"] = "easy"
    cfg = ExperimentConfig(
        scenario=ScenarioConfig.from_dict(scenario),
        model=ModelConfig.from_dict(d.get("model") or {}),
        train=TrainConfig.from_dict(d.get("train") or {}),
        tracker=TrackerConfig.from_dict(d.get("tracker") or {}),
        noise=NoiseConfig.from_dict(d.get("noise") or {}),
        **{k: int(v) for k, v in data.items()},
        **{k: tuple(int(x) for x in v) for k, v in abl.items()},
    )
    if "seed" in d:
        cfg = with_seed(cfg, int(d["seed"]))
    return cfg


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """A single top-level seed drives training, tracking and (for one-seed runs) the data."""
    return config.replace(seeds=(seed,), train=dataclasses.replace(config.train, seed=seed),
                          tracker=dataclasses.replace(config.tracker, seed=seed))


def experiment_to_dict(config: ExperimentConfig) -> dict:
    def plain(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out
    return {
        "scenario": plain(config.scenario),
        "data": {"train_sequences": config.train_sequences, "eval_sequences": config.eval_sequences},
        "model": config.model.to_dict(),
        "train": plain(config.train),
        "tracker": plain(config.tracker),
        "noise": plain(config.noise),
        "ablation": {"seeds": list(config.seeds), "train_lengths": list(config.train_lengths),
                     "windows": list(config.windows)},
    }
