"""Command-line driver: one config file, six subcommands.

Every command writes into ``--out`` only, guarded by a lock file, and leaves a
``run_manifest.json`` with the resolved config, its hash, the seed and a
digest of every produced artifact. Exit codes: 0 success, 1 runtime failure,
2 usage error (nothing written).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from .augment import AugmentConfig, Perturbation
from .datagen import DEFAULT_FAMILIES, FingerprintSpec, SceneDistribution, build_corpus, load_manifest
from .evaluation import build_report, robustness_sweep, score_dataset, sweep_cell_dict, write_report
from .netarch import (CLASSIFIER, PROJECTION, DetectorConfig, build_detector, load_checkpoint,
                      save_checkpoint, swap_head)
from .tensorcore import RngStream
from .training import ContrastiveConfig, OptimizerConfig, finetune, pretrain, write_history_csv

log = logging.getLogger(__name__)

COMMANDS = ("gen-data", "pretrain", "finetune", "evaluate", "sweep", "report")
MANIFEST_NAME = "run_manifest.json"
LOCK_NAME = ".lock"
CHECKPOINT_NAME = "checkpoint.gdck"


class UsageError(Exception):
    pass


class RunError(Exception):
    pass


@dataclass
class CorpusConfig:
    families: list[FingerprintSpec] = field(default_factory=lambda: list(DEFAULT_FAMILIES))
    training_families: list[str] = field(default_factory=lambda: ["A"])
    counts: dict[str, int] = field(default_factory=lambda: {"train": 256, "val": 32, "test": 240})
    scenes: SceneDistribution = field(default_factory=SceneDistribution)
    image_format: str = "ppm"

    def to_dict(self) -> dict:
        return {"families": [f.to_dict() for f in self.families], "training_families": list(self.training_families),
                "counts": dict(self.counts), "scenes": self.scenes.to_dict(), "image_format": self.image_format}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        if "families" in d:
            d["families"] = [FingerprintSpec.from_dict(f) for f in d["families"]]
        if "scenes" in d:
            d["scenes"] = SceneDistribution.from_dict(d["scenes"])
        return cls(**d)


@dataclass
class MetricGrid:
    jpeg_qualities: list[int] = field(default_factory=lambda: [90, 70, 50, 30])
    rescale_factors: list[float] = field(default_factory=lambda: [1.5, 0.7, 0.5])
    threshold: float = 0.5
    bins: int = 20

    def perturbations(self) -> list[Perturbation]:
        return ([Perturbation()] + [Perturbation("jpeg", q) for q in self.jpeg_qualities]
                + [Perturbation("rescale", s) for s in self.rescale_factors])


@dataclass
class RunConfig:
    seed: int
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    metrics: MetricGrid = field(default_factory=MetricGrid)
    data_dir: str = "data"

    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        self.detector.validate()
        self.augment.validate()
        self.contrastive.validate()
        self.optimizer.validate()
        if self.augment.crop_size != self.detector.crop_size:
            raise ValueError("augment.crop_size and detector.crop_size must agree")
        if self.metrics.bins < 2:
            raise ValueError("metrics.bins must be >= 2")
        self.metrics.perturbations()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "detector": self.detector.to_dict(),
            "augment": self.augment.to_dict(),
            "contrastive": asdict(self.contrastive),
            "optimizer": self.optimizer.to_dict(),
            "corpus": self.corpus.to_dict(),
            "metrics": asdict(self.metrics),
            "data_dir": self.data_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"seed", "detector", "augment", "contrastive", "optimizer", "corpus", "metrics", "data_dir"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        if d.get("seed") is None:
            raise ValueError("seed is mandatory (config key 'seed' or --seed)")
        return cls(
            seed=d["seed"],
            detector=DetectorConfig.from_dict(d.get("detector", {})),
            augment=AugmentConfig.from_dict(d.get("augment", {})),
            contrastive=ContrastiveConfig(**d.get("contrastive", {})),
            optimizer=OptimizerConfig(**d.get("optimizer", {})),
            corpus=CorpusConfig.from_dict(d.get("corpus", {})),
            metrics=MetricGrid(**d.get("metrics", {})),
            data_dir=d.get("data_dir", "data"),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path: str | Path, seed: int | None = None) -> RunConfig:
    """Read a YAML (or JSON) run config; ``seed`` overrides the file's seed."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError("config must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    cfg = RunConfig.from_dict(raw)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# Output directory handling
# --------------------------------------------------------------------------

class OutputDir:
    """Lock-guarded output directory that records produced artifacts."""

    def __init__(self, path: Path):
        self.path = path
        self.artifacts: list[Path] = []
        self._lock = path / LOCK_NAME

    def __enter__(self) -> "OutputDir":
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunError(f"output directory {self.path} is locked by another run ({self._lock})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc) -> None:
        self._lock.unlink(missing_ok=True)

    def add(self, *paths: Path) -> None:
        self.artifacts.extend(Path(p) for p in paths)

    def write_manifest(self, command: str, cfg: RunConfig, status: str, inputs: dict, error: str | None) -> None:
        arts = []
        for p in sorted(set(self.artifacts)):
            if p.is_file():
                arts.append({"path": p.relative_to(self.path).as_posix(),
                             "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        doc = {"command": command, "seed": cfg.seed, "config_sha256": cfg.digest(), "config": cfg.to_dict(),
               "inputs": inputs, "artifacts": arts, "status": status, "error": error}
        (self.path / MANIFEST_NAME).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_model(path: Path, cfg: RunConfig):
    """Load a checkpoint and insist its architecture matches the run config."""
    if not path.is_file():
        raise RunError(f"checkpoint not found: {path}")
    net = load_checkpoint(path)
    want, have = cfg.detector.to_dict(), net.config.to_dict()
    for key in sorted(want):
        if want[key] != have.get(key):
            raise RunError(f"checkpoint detector config mismatch in field '{key}': "
                           f"checkpoint has {have.get(key)!r}, run config has {want[key]!r}")
    return net


def _corpus(cfg: RunConfig, data_dir: Path):
    return load_manifest(data_dir / "manifest.jsonl", training_families=cfg.corpus.training_families)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: OutputDir, args) -> None:
    c = cfg.corpus
    build_corpus(c.families, c.counts, c.scenes, out.path, RngStream(cfg.seed).child("corpus"),
                 training_families=c.training_families, crop_size=cfg.detector.crop_size,
                 image_format=c.image_format)
    out.add(out.path / "manifest.jsonl", *sorted((out.path / "images").iterdir()))


def cmd_pretrain(cfg: RunConfig, out: OutputDir, args) -> None:
    corpus = _corpus(cfg, args.data)
    root = RngStream(cfg.seed)
    net = build_detector(cfg.detector, root.child("init"), PROJECTION)
    net, history = pretrain(net, corpus, cfg.contrastive, cfg.optimizer, cfg.augment, root.child("pretrain"))
    save_checkpoint(net, out.path / CHECKPOINT_NAME)
    write_history_csv(history, out.path / "history.csv")
    out.add(out.path / CHECKPOINT_NAME, out.path / "history.csv")


def cmd_finetune(cfg: RunConfig, out: OutputDir, args) -> None:
    """Without ``--checkpoint`` the backbone starts from scratch (no contrastive phase)."""
    corpus = _corpus(cfg, args.data)
    root = RngStream(cfg.seed)
    if args.checkpoint is not None:
        net = _load_model(args.checkpoint, cfg)
    else:
        net = build_detector(cfg.detector, root.child("init"), PROJECTION)
    if net.head_kind != CLASSIFIER:
        net = swap_head(net, CLASSIFIER, root.child("head"))
    net, history = finetune(net, corpus, cfg.contrastive, cfg.optimizer, cfg.augment, root.child("finetune"))
    save_checkpoint(net, out.path / CHECKPOINT_NAME)
    write_history_csv(history, out.path / "history.csv")
    out.add(out.path / CHECKPOINT_NAME, out.path / "history.csv")


def _classifier(cfg: RunConfig, args):
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required for this command")
    net = _load_model(args.checkpoint, cfg)
    if net.head_kind != CLASSIFIER:
        raise RunError(f"checkpoint {args.checkpoint} has a {net.head_kind} head; a fine-tuned classifier is needed")
    return net


def _scores_json(scores) -> str:
    return json.dumps({"entries": scores.to_dicts(), "errors": scores.errors}, sort_keys=True, indent=2) + "\n"


def cmd_evaluate(cfg: RunConfig, out: OutputDir, args) -> None:
    net = _classifier(cfg, args)
    corpus = _corpus(cfg, args.data)
    scores = score_dataset(net, corpus, "test")
    (out.path / "scores.json").write_text(_scores_json(scores), encoding="utf-8")
    report = build_report(scores, None, cfg.to_dict(), cfg.seed, cfg.metrics.bins, cfg.metrics.threshold)
    out.add(out.path / "scores.json", *write_report(report, out.path))


def cmd_sweep(cfg: RunConfig, out: OutputDir, args) -> None:
    net = _classifier(cfg, args)
    corpus = _corpus(cfg, args.data)
    cells = robustness_sweep(net, corpus, cfg.metrics.perturbations(), threshold=cfg.metrics.threshold)
    path = out.path / "sweep.json"
    path.write_text(json.dumps([sweep_cell_dict(c) for c in cells], sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    out.add(path)
    failed = [c.perturbation for c in cells if c.error]
    if failed:
        raise RunError(f"sweep cells failed: {failed}")


def cmd_report(cfg: RunConfig, out: OutputDir, args) -> None:
    """Evaluation plus the robustness sweep in one report."""
    net = _classifier(cfg, args)
    corpus = _corpus(cfg, args.data)
    scores = score_dataset(net, corpus, "test")
    cells = robustness_sweep(net, corpus, cfg.metrics.perturbations(), threshold=cfg.metrics.threshold)
    report = build_report(scores, cells, cfg.to_dict(), cfg.seed, cfg.metrics.bins, cfg.metrics.threshold)
    (out.path / "scores.json").write_text(_scores_json(scores), encoding="utf-8")
    out.add(out.path / "scores.json", *write_report(report, out.path))


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gandetect", description="Synthetic-image detector toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name).splitlines()[0])
        p.add_argument("--config", required=True, type=Path, help="YAML or JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--checkpoint", type=Path, default=None, help="input checkpoint")
        p.add_argument("--data", type=Path, default=None,
                       help="corpus directory (default: data_dir from the config, relative to it)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config, args.seed)
        if args.data is None:
            args.data = (args.config.parent / cfg.data_dir)
        if args.command in ("evaluate", "sweep", "report") and args.checkpoint is None:
            raise UsageError("--checkpoint is required for this command")
    except (UsageError, ValueError, TypeError, yaml.YAMLError) as exc:
        print(f"gandetect {args.command}: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2

    inputs = {}
    if args.checkpoint is not None and args.checkpoint.is_file():
        inputs["checkpoint_sha256"] = _file_digest(args.checkpoint)
    manifest = Path(args.data) / "manifest.jsonl"
    if args.command != "gen-data" and manifest.is_file():
        inputs["data_manifest_sha256"] = _file_digest(manifest)
    try:
        with OutputDir(args.out) as out:
            try:
                HANDLERS[args.command](cfg, out, args)
            except Exception as exc:
                status = "partial" if out.artifacts else "failed"
                out.write_manifest(args.command, cfg, status, inputs, f"{type(exc).__name__}: {exc}")
                raise
            out.write_manifest(args.command, cfg, "complete", inputs, None)
    except UsageError as exc:
        print(f"gandetect {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"gandetect {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
