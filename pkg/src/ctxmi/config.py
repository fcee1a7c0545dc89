"""Run configuration: one YAML file with nested sections and a schema version.

Every command takes `--config`; scalar flags (`--seed`, `--out`, `--threads`)
override the file. The canonical JSON dump of a config is hashed and embedded
in every output artifact so results are traceable to their settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .corpus import FeatureKind
from .conditional import DistFamily
from .predictor import TrainConfig
from .synthetic import SyntheticProcess

CONFIG_SCHEMA_VERSION = 1

ALL_FEATURES = [k.value for k in FeatureKind]


class ConfigError(Exception):
    """Bad configuration file or values."""


@dataclass(frozen=True)
class KdeConfig:
    grid_size: int = 24
    grid_lo: float = 1e-3
    grid_hi: float = 1.0
    max_centers: int | None = 50_000


@dataclass(frozen=True)
class SweepConfig:
    past_max: int = 10
    future_max: int = 10
    plateau_tolerance: float = 0.02


@dataclass(frozen=True)
class IngestConfig:
    zscore: tuple[FeatureKind, ...] = ()
    syllable_fallback: bool = False
    min_words: int = 3


@dataclass(frozen=True)
class ReportConfig:
    histogram_bins: int = 60
    plots: bool = False


@dataclass(frozen=True)
class SynthConfig:
    process: SyntheticProcess = None  # type: ignore[assignment]
    counts: dict = field(default_factory=lambda: {"train": 200, "validation": 40, "test": 60})


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: Path = Path("out")
    threads: int = 1
    corpus_dir: Path | None = None          # directory with manifest.json
    raw_splits: dict | None = None          # split name -> raw file, for ingest
    synth: SynthConfig | None = None
    features: tuple[FeatureKind, ...] = (FeatureKind.PITCH,)
    families: tuple[DistFamily, ...] = (DistFamily.GAUSSIAN, DistFamily.LAPLACE, DistFamily.GAMMA)
    train: TrainConfig = field(default_factory=TrainConfig)
    kde: KdeConfig = field(default_factory=KdeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    remote_endpoint: str | None = None      # "host:port" to use an external predictor

    def canonical(self) -> dict:
        d = {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "seed": self.seed,
            "threads": self.threads,
            "corpus_dir": str(self.corpus_dir) if self.corpus_dir else None,
            "raw_splits": {k: str(v) for k, v in self.raw_splits.items()} if self.raw_splits else None,
            "synth": None,
            "features": [k.value for k in self.features],
            "families": [f.value for f in self.families],
            "train": asdict(self.train),
            "kde": asdict(self.kde),
            "sweep": asdict(self.sweep),
            "ingest": {
                "zscore": [k.value for k in self.ingest.zscore],
                "syllable_fallback": self.ingest.syllable_fallback,
                "min_words": self.ingest.min_words,
            },
            "report": asdict(self.report),
            "remote_endpoint": self.remote_endpoint,
        }
        if self.synth is not None:
            d["synth"] = {"process": self.synth.process.to_dict(), "counts": dict(self.synth.counts)}
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _parse_features(values) -> tuple[FeatureKind, ...]:
    out = []
    for v in values:
        try:
            out.append(FeatureKind(v))
        except ValueError:
            raise ConfigError(f"unknown feature {v!r}; expected one of {ALL_FEATURES}") from None
    return tuple(out)


def _parse_families(values) -> tuple[DistFamily, ...]:
    out = []
    for v in values:
        try:
            out.append(DistFamily(v))
        except ValueError:
            raise ConfigError(f"unknown family {v!r}") from None
    return tuple(out)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return config_from_dict(doc, base_dir=path.parent)


def config_from_dict(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Relative input paths resolve against the config file's directory;
    output_dir is a product of the run and resolves against the working
    directory."""
    base_dir = base_dir or Path(".")
    _expect(doc.get("schema_version") == CONFIG_SCHEMA_VERSION,
            f"schema_version must be {CONFIG_SCHEMA_VERSION}")

    def _path(v):
        p = Path(v)
        return p if p.is_absolute() else base_dir / p

    synth = None
    if "synth" in doc and doc["synth"] is not None:
        s = doc["synth"]
        _expect(isinstance(s, dict) and "process" in s, "synth section needs a process mapping")
        try:
            process = SyntheticProcess.from_dict(s["process"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad synth.process: {exc}") from exc
        counts = s.get("counts", {"train": 200, "validation": 40, "test": 60})
        _expect(
            isinstance(counts, dict) and all(k in ("train", "validation", "test") for k in counts),
            "synth.counts keys must be train/validation/test",
        )
        synth = SynthConfig(process=process, counts=counts)

    corpus_dir = _path(doc["corpus_dir"]) if doc.get("corpus_dir") else None
    raw_splits = None
    if doc.get("raw_splits"):
        raw_splits = {k: _path(v) for k, v in doc["raw_splits"].items()}
        _expect(all(k in ("train", "validation", "test") for k in raw_splits),
                "raw_splits keys must be train/validation/test")

    train_doc = doc.get("train", {})
    try:
        span = train_doc.get("span_range", [1, 10])
        train_cfg = TrainConfig(
            span_lo=int(span[0]),
            span_hi=int(span[1]),
            batch_size=int(train_doc.get("batch_size", 64)),
            learning_rate=float(train_doc.get("learning_rate", 1e-3)),
            max_epochs=int(train_doc.get("max_epochs", 80)),
            patience=int(train_doc.get("patience", 3)),
            seed=int(doc.get("seed", 0)),
            embed_dim=int(train_doc.get("embed_dim", 64)),
            clip_norm=float(train_doc.get("clip_norm", 5.0)),
        )
    except (ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"bad train section: {exc}") from exc

    kde_doc = doc.get("kde", {})
    kde_cfg = KdeConfig(
        grid_size=int(kde_doc.get("grid_size", 24)),
        grid_lo=float(kde_doc.get("grid_lo", 1e-3)),
        grid_hi=float(kde_doc.get("grid_hi", 1.0)),
        max_centers=(None if kde_doc.get("max_centers") in (None, "none") else int(kde_doc["max_centers"])),
    )
    _expect(kde_cfg.grid_size >= 1 and 0 < kde_cfg.grid_lo <= kde_cfg.grid_hi, "bad kde grid")

    sweep_doc = doc.get("sweep", {})
    sweep_cfg = SweepConfig(
        past_max=int(sweep_doc.get("past_max", 10)),
        future_max=int(sweep_doc.get("future_max", 10)),
        plateau_tolerance=float(sweep_doc.get("plateau_tolerance", 0.02)),
    )
    _expect(0 <= sweep_cfg.past_max <= 10 and 0 <= sweep_cfg.future_max <= 10, "sweep bounds must be in [0, 10]")

    ingest_doc = doc.get("ingest", {})
    ingest_cfg = IngestConfig(
        zscore=_parse_features(ingest_doc.get("zscore", [])),
        syllable_fallback=bool(ingest_doc.get("syllable_fallback", False)),
        min_words=int(ingest_doc.get("min_words", 3)),
    )

    report_doc = doc.get("report", {})
    report_cfg = ReportConfig(
        histogram_bins=int(report_doc.get("histogram_bins", 60)),
        plots=bool(report_doc.get("plots", False)),
    )

    cfg = RunConfig(
        seed=int(doc.get("seed", 0)),
        output_dir=Path(doc.get("output_dir", "out")),
        threads=int(doc.get("threads", 1)),
        corpus_dir=corpus_dir,
        raw_splits=raw_splits,
        synth=synth,
        features=_parse_features(doc.get("features", ["pitch"])),
        families=_parse_families(doc.get("families", ["gaussian", "laplace", "gamma"])),
        train=train_cfg,
        kde=kde_cfg,
        sweep=sweep_cfg,
        ingest=ingest_cfg,
        report=report_cfg,
        remote_endpoint=doc.get("remote_endpoint"),
    )
    _expect(cfg.threads >= 1, "threads must be >= 1")
    _expect(len(cfg.features) >= 1, "at least one feature required")
    _expect(len(cfg.families) >= 1, "at least one family required")
    if cfg.corpus_dir is not None:
        _expect(cfg.corpus_dir.exists(), f"corpus_dir does not exist: {cfg.corpus_dir}")
    if cfg.raw_splits:
        for name, path in cfg.raw_splits.items():
            _expect(Path(path).exists(), f"raw_splits.{name} does not exist: {path}")
    return cfg
