"""Command-line entry point: synth, train, track, eval, ablate."""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from . import __version__
from .experiments import (AXES, ExperimentConfig, RunCache, experiment_from_dict, experiment_to_dict,
                          noisy_detections, run_ablation, train_model, training_sequences, with_seed)
from .harness.motio import (MOTParseError, SequenceData, load_sequence, read_mot, write_mot,
                            write_sequence)
from .harness.noise import NoiseConfig
from .harness.synth import ScenarioConfig, generate_sequence
from .metrics import DuplicateIdError, evaluate, format_csv, format_table
from .model import load_checkpoint, save_checkpoint
from .tracker import TrackerConfig, track_sequence
from .training import TrainingDivergedError

log = logging.getLogger("csctrack")

EXIT_CODES = {"internal": 1, "usage": 2, "config": 3, "input": 4, "diverged": 5}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: dict
    seed: Optional[int]
    output_dir: str
    checkpoint: Optional[str] = None
    inputs: dict = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def write(self, directory: Path) -> Path:
        path = directory / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message)


def load_config_file(path: Optional[str]) -> dict:
    """YAML config, or a run manifest whose resolved config is reused."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CLIError("config", f"config file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise CLIError("config", f"{path}: invalid YAML ({str(exc).splitlines()[0]})")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CLIError("config", f"{path}: top level must be a mapping")
    if "command" in data and "config" in data and "argv" in data:
        data = data["config"]
    return data


def resolve_config(raw: dict, seed: Optional[int]) -> ExperimentConfig:
    raw = {k: v for k, v in raw.items() if k != "synth"}
    try:
        cfg = experiment_from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CLIError("config", str(exc))
    if seed is not None:
        cfg = with_seed(cfg, seed)
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError("input", f"cannot create output directory {out}: {exc.strerror}")
    return out


def _manifest(args, command, config: dict, seed, out: Path, **kw) -> RunManifest:
    return RunManifest(command=command, argv=list(args.argv), config=config, seed=seed,
                       output_dir=str(out), started=_now(), **kw)


def _finish(manifest: RunManifest, out: Path) -> None:
    manifest.finished = _now()
    manifest.write(out)


# -- synth -----------------------------------------------------------------

def synth_scenarios(raw: dict, cfg: ExperimentConfig, count: Optional[int]) -> List[ScenarioConfig]:
    spec = (raw.get("synth") or {}).get("scenarios")
    if spec:
        try:
            return [ScenarioConfig.from_dict(s) for s in spec]
        except (TypeError, ValueError) as exc:
            raise CLIError("config", str(exc))
    n = count if count is not None else (raw.get("synth") or {}).get("count", 1)
    base = cfg.seeds[0] if cfg.seeds else 0
    return [cfg.scenario.replace(seed=cfg.scenario.seed + base + k) for k in range(int(n))]


def cmd_synth(args) -> int:
    raw = load_config_file(args.config)
    if args.preset:
        raw.setdefault("scenario", {})
        raw["scenario"] = {"preset": args.preset, **{k: v for k, v in raw["scenario"].items()
                                                     if k != "preset"}}
    cfg = resolve_config(raw, args.seed)
    out = _out_dir(args, "runs/synth")
    scenarios = synth_scenarios(raw, cfg, args.count)
    manifest = _manifest(args, "synth", {**experiment_to_dict(cfg), "synth": {
        "scenarios": [dataclasses.asdict(s) for s in scenarios]}}, args.seed, out)
    names = set()
    for sc in scenarios:
        seq = generate_sequence(sc)
        if seq.name in names:
            raise CLIError("config", f"two scenarios produce the sequence name {seq.name}")
        names.add(seq.name)
        try:
            path = write_sequence(out / seq.name, seq)
        except OSError as exc:
            raise CLIError("input", f"cannot write {out / seq.name}: {exc.strerror}")
        manifest.outputs.append(str(path))
        print(f"wrote {path} ({seq.num_frames} frames, {len(seq.gt)} gt boxes)")
    _finish(manifest, out)
    return 0


# -- train -----------------------------------------------------------------

def _load_dataset(path: str) -> List[SequenceData]:
    root = Path(path)
    if not root.exists():
        raise CLIError("input", f"dataset not found: {path}")
    dirs = [root] if (root / "gt").is_dir() else sorted(p for p in root.iterdir()
                                                          if (p / "gt" / "gt.txt").is_file())
    if not dirs:
        raise CLIError("input", f"no sequences with gt/gt.txt under {path}")
    try:
        return [load_sequence(d) for d in dirs]
    except MOTParseError as exc:
        raise CLIError("input", str(exc))


def cmd_train(args) -> int:
    raw = load_config_file(args.config)
    cfg = resolve_config(raw, args.seed)
    if args.steps is not None:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, steps=args.steps))
    seed = cfg.train.seed
    out = _out_dir(args, "runs/train")
    sequences = _load_dataset(args.data) if args.data else training_sequences(cfg, seed)
    ckpt = out / "model.pt"
    manifest = _manifest(args, "train", experiment_to_dict(cfg), seed, out, checkpoint=str(ckpt),
                         inputs={"data": args.data or "synthetic"})
    log_path = out / "train_log.csv"
    model, reports = train_model(cfg.model, cfg.train, sequences, seed, log_file=log_path)
    save_checkpoint(ckpt, model, experiment_to_dict(cfg))
    manifest.outputs += [str(ckpt), str(log_path)]
    if reports:
        print(f"steps {len(reports)}: assoc loss {reports[0].assoc:.4f} -> {reports[-1].assoc:.4f}, "
              f"feat loss {reports[-1].feat:.4f}")
    print(f"checkpoint {ckpt}")
    _finish(manifest, out)
    return 0


# -- track -----------------------------------------------------------------

def cmd_track(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise CLIError("input", f"checkpoint not found: {args.checkpoint}")
    try:
        model, stored = load_checkpoint(args.checkpoint)
    except (ValueError, RuntimeError, KeyError) as exc:
        raise CLIError("input", f"{args.checkpoint}: {exc}")
    tracker_kw = dict(stored.get("tracker") or {})
    raw = load_config_file(args.config)
    tracker_kw.update(raw.get("tracker") or {})
    for key in ("beta", "window"):
        if getattr(args, key) is not None:
            tracker_kw[key] = getattr(args, key)
    if args.seed is not None:
        tracker_kw["seed"] = args.seed
    try:
        tracker_cfg = TrackerConfig.from_dict(tracker_kw)
    except (TypeError, ValueError) as exc:
        raise CLIError("config", str(exc))
    noise = None
    if args.noise_config:
        noise_raw = load_config_file(args.noise_config)
        try:
            noise = NoiseConfig.from_dict(noise_raw.get("noise", noise_raw))
        except (TypeError, ValueError) as exc:
            raise CLIError("config", str(exc))
    elif raw.get("noise") is not None and args.noise_from_config:
        noise = NoiseConfig.from_dict(raw["noise"])
    if not Path(args.sequence).is_dir():
        raise CLIError("input", f"sequence directory not found: {args.sequence}")
    try:
        seq = load_sequence(args.sequence)
    except MOTParseError as exc:
        raise CLIError("input", str(exc))
    out = _out_dir(args, "runs/track")
    seed = tracker_cfg.seed
    dets = noisy_detections(seq, noise, seed) if noise is not None else None
    result = out / f"{seq.name}.txt"
    config = {"tracker": dataclasses.asdict(tracker_cfg),
              "noise": None if noise is None else dataclasses.asdict(noise)}
    manifest = _manifest(args, "track", config, seed, out, checkpoint=str(args.checkpoint),
                         inputs={"sequence": str(args.sequence)})
    tracks = track_sequence(seq, model, tracker_cfg, detections=dets)
    write_mot(result, tracks)
    manifest.outputs.append(str(result))
    print(f"wrote {result} ({len(tracks.records)} records, {len(tracks.ids())} ids)")
    _finish(manifest, out)
    return 0


# -- eval ------------------------------------------------------------------

def _gt_file(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "gt" / "gt.txt"
    if not p.is_file():
        raise CLIError("input", f"ground truth not found: {path}")
    return p


def cmd_eval(args) -> int:
    results = Path(args.results)
    if not results.is_file():
        raise CLIError("input", f"result file not found: {args.results}")
    gt_path = _gt_file(args.gt)
    try:
        pred = read_mot(results, "results")
        gt = read_mot(gt_path, "gt")
    except MOTParseError as exc:
        raise CLIError("input", str(exc))
    out = _out_dir(args, "runs/eval")
    manifest = _manifest(args, "eval", {"iou_threshold": args.iou}, args.seed, out,
                         inputs={"results": str(results), "gt": str(gt_path)})
    try:
        report = evaluate(pred, gt, iou_threshold=args.iou, name=results.stem)
    except DuplicateIdError as exc:
        raise CLIError("input", str(exc))
    rows = [(results.stem, report)]
    print(format_table(rows))
    csv_path = out / "report.csv"
    csv_path.write_text(format_csv(rows) + "\n")
    manifest.outputs.append(str(csv_path))
    _finish(manifest, out)
    return 0


# -- ablate ----------------------------------------------------------------

def cmd_ablate(args) -> int:
    raw = load_config_file(args.config)
    cfg = resolve_config(raw, None)
    if args.seed is not None:
        cfg = cfg.replace(seeds=(args.seed,))
    if args.seeds:
        cfg = cfg.replace(seeds=tuple(args.seeds))
    if args.steps is not None:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, steps=args.steps))
    out = _out_dir(args, "runs/ablate")
    manifest = _manifest(args, "ablate", experiment_to_dict(cfg), args.seed, out,
                         inputs={"axis": args.axis})
    result = run_ablation(args.axis, cfg, RunCache(cfg))
    print(result.table())
    for name, text in (("txt", result.table()), ("csv", result.csv())):
        path = out / f"ablation_{args.axis}.{name}"
        path.write_text(text + "\n")
        manifest.outputs.append(str(path))
    _finish(manifest, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file (or a manifest.json to rerun)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="csctrack", description=__doc__)
    parser.add_argument("--version", action="version", version=f"csctrack {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render synthetic sequences")
    p.add_argument("--preset", help="scenario preset (easy, hard)")
    p.add_argument("--count", type=int, help="number of sequences of the configured scenario")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="sequence directory or a directory of sequences")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common], help="track one sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--noise-config", help="YAML with noise settings applied to the detections")
    p.add_argument("--noise-from-config", action="store_true",
                   help="apply the noise section of --config")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", parents=[common], help="evaluate a result file")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True, help="sequence directory or gt file")
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run one ablation axis")
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CLIError as exc:
        category, message = exc.category, str(exc)
    except TrainingDivergedError as exc:
        category, message = "diverged", str(exc)
    except Exception as exc:  # noqa: BLE001 - reported as one line
        category, message = "internal", f"{type(exc).__name__}: {exc}"
    print(f"csctrack: error: {category}: {message.splitlines()[0] if message else ''}",
          file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
