"""End-to-end stages behind the CLI: ingest, synth, fit-prior, train, sweep, report.

Stages read and write a fixed layout under the run's output directory:

    corpus/   normalized split files, manifest, per-speaker stats, summary
    models/   fitted KDE priors and trained predictors, one set per feature
    sweep/    grid CSVs, plateau reports, histograms, unconditional table
    report/   optional SVG plots rebuilt from the CSVs

Later stages run their prerequisites in-line when artifacts are missing, so
`sweep` works on a fresh output directory.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import conditional, corpus as corpus_mod, density, mi_sweep, predictor as predictor_mod
from .config import RunConfig
from .conditional import DistFamily
from .corpus import (
    Corpus,
    CorpusError,
    FeatureKind,
    Split,
    Utterance,
    WordRecord,
    derive_features,
    feature_values,
    filter_short_utterances,
    group_utterances,
    heuristic_syllables,
    load_manifest,
    load_split,
    read_records,
    save_corpus,
    save_manifest,
    speaker_stats,
    strip_punctuation,
    zscore_per_speaker,
)
from .mi_sweep import MiGrid, average_grids, plateau_report, sweep_feature
from .remote import RemotePredictor
from .synthetic import generate_splits

log = logging.getLogger(__name__)

SPLITS = (Split.TRAIN, Split.VALIDATION, Split.TEST)


def _corpus_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "corpus"


def _models_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "models"


def _sweep_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "sweep"


# ---------------------------------------------------------------------------
# ingest


def _normalize_utterance(u: Utterance, *, syllable_fallback: bool) -> Utterance | None:
    """Clean tokens, drop emptied words, renumber positions."""
    kept: list[WordRecord] = []
    for w in u.words:
        token = strip_punctuation(w.token)
        if not token:
            continue
        syllables = w.syllables
        if syllables < 1:
            if not syllable_fallback:
                raise CorpusError(
                    f"utterance {u.utterance_id!r}: word {w.token!r} lacks a syllable count "
                    "(enable ingest.syllable_fallback to fill heuristically)"
                )
            syllables = heuristic_syllables(token)
        kept.append(replace(w, token=token, position=len(kept), syllables=syllables))
    if not kept:
        return None
    return Utterance(utterance_id=u.utterance_id, speaker_id=u.speaker_id, words=tuple(kept))


def run_ingest(cfg: RunConfig) -> dict:
    """Normalize raw split files into the corpus layout, writing nothing
    until every split has validated."""
    if not cfg.raw_splits:
        raise CorpusError("ingest requires raw_splits in the configuration")
    normalized: dict[Split, Corpus] = {}
    for split in SPLITS:
        name = split.value
        if name not in cfg.raw_splits:
            raise CorpusError(f"raw_splits is missing the {name!r} split")
        path = cfg.raw_splits[name]
        records = read_records(path, allow_null_syllables=cfg.ingest.syllable_fallback)
        if not records:
            raise CorpusError(f"{path}: no records")
        utts = group_utterances(records, source=str(path))
        cleaned = []
        for u in utts:
            nu = _normalize_utterance(u, syllable_fallback=cfg.ingest.syllable_fallback)
            if nu is not None:
                cleaned.append(nu)
        cleaned = filter_short_utterances(cleaned, cfg.ingest.min_words)
        if not cleaned:
            raise CorpusError(f"{path}: no utterances remain after normalization")
        normalized[split] = Corpus(utterances=tuple(cleaned), split=split)

    # derived features and statistics, computed before anything is written
    derived = {s: derive_features(c) for s, c in normalized.items()}
    stats = {}
    for kind in cfg.ingest.zscore:
        stats[kind.value] = {
            spk: list(ms) for spk, ms in speaker_stats(derived[Split.TRAIN], kind).items()
        }
        for split in SPLITS:  # fail now if any split lacks training statistics
            zscore_per_speaker(derived[split], kind, {k: tuple(v) for k, v in stats[kind.value].items()})

    pauses = np.concatenate(
        [feature_values(derived[s], FeatureKind.PAUSE) for s in SPLITS]
    )
    summary = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "splits": {
            s.value: {"utterances": len(normalized[s]), "words": normalized[s].word_count}
            for s in SPLITS
        },
        "zero_pause_fraction": float(np.mean(pauses == 0.0)) if pauses.size else None,
        "zscored_features": [k.value for k in cfg.ingest.zscore],
    }

    out = _corpus_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split in SPLITS:
        name = f"{split.value}.jsonl"
        save_corpus(normalized[split], out / name)
        files[split] = name
    save_manifest(out, files, metadata={"config_hash": cfg.config_hash(), "seed": cfg.seed})
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump({"config_hash": cfg.config_hash(), "seed": cfg.seed, "zscore": stats}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# synth


def run_synth(cfg: RunConfig) -> dict:
    if cfg.synth is None:
        raise CorpusError("synth command requires a synth section in the configuration")
    proc = cfg.synth.process
    counts = {Split(k): int(v) for k, v in cfg.synth.counts.items()}
    corpora = generate_splits(proc, counts, cfg.seed)
    out = _corpus_dir(cfg)
    files = {}
    for split, c in corpora.items():
        name = f"{split.value}.jsonl"
        save_corpus(c, out / name)
        files[split] = name
    save_manifest(
        out,
        files,
        metadata={
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "synthetic_process": proc.to_dict(),
            "effects": [float(x) for x in proc.effects],
        },
    )
    return {"words": {s.value: c.word_count for s, c in corpora.items()}}


# ---------------------------------------------------------------------------
# shared loading


def _ensure_corpus(cfg: RunConfig) -> Path:
    """Locate the corpus directory, generating synthetic data if configured."""
    if cfg.corpus_dir is not None:
        return Path(cfg.corpus_dir)
    out = _corpus_dir(cfg)
    if not (out / "manifest.json").exists():
        if cfg.synth is not None:
            run_synth(cfg)
        elif cfg.raw_splits is not None:
            run_ingest(cfg)
        else:
            raise CorpusError("no corpus_dir, synth or raw_splits configured")
    return out


def load_materialized(cfg: RunConfig, split: Split) -> Corpus:
    """Load one split with derived features attached and configured
    z-scoring applied (training statistics)."""
    directory = _ensure_corpus(cfg)
    c = derive_features(load_split(directory, split, min_words=cfg.ingest.min_words))
    if cfg.ingest.zscore:
        stats_path = directory / "stats.json"
        stats_doc = None
        if stats_path.exists():
            with open(stats_path, encoding="utf-8") as fh:
                stats_doc = json.load(fh).get("zscore", {})
        train = None
        for kind in cfg.ingest.zscore:
            if stats_doc and kind.value in stats_doc:
                stats = {spk: (v[0], v[1]) for spk, v in stats_doc[kind.value].items()}
            else:
                if train is None:
                    train = derive_features(
                        load_split(directory, Split.TRAIN, min_words=cfg.ingest.min_words)
                    )
                stats = speaker_stats(train, kind)
            c = zscore_per_speaker(c, kind, stats)
    return c


# ---------------------------------------------------------------------------
# priors


def _kde_path(cfg: RunConfig, kind: FeatureKind) -> Path:
    return _models_dir(cfg) / f"kde_{kind.value}.npz"


def fit_prior_feature(cfg: RunConfig, kind: FeatureKind, train: Corpus, val: Corpus) -> density.KdeModel:
    train_vals = feature_values(train, kind)
    val_vals = feature_values(val, kind)
    if train_vals.size == 0 or val_vals.size == 0:
        raise CorpusError(f"no {kind.value} values available for prior fitting")
    grid = density.default_bandwidth_grid(train_vals, cfg.kde.grid_size, cfg.kde.grid_lo, cfg.kde.grid_hi)
    model = density.fit_kde(
        train_vals, val_vals, grid, max_centers=cfg.kde.max_centers, subsample_seed=cfg.seed
    )
    density.save_kde(model, _kde_path(cfg, kind))
    meta_path = _models_dir(cfg) / f"kde_meta_{kind.value}.json"
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "config_hash": cfg.config_hash(),
                "seed": cfg.seed,
                "feature": kind.value,
                "bandwidth": model.bandwidth,
                "val_loglik": model.val_loglik,
                "centers": int(model.centers.size),
                "subsample_size": model.subsample_size,
                "subsample_seed": model.subsample_seed,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return model


def run_fit_prior(cfg: RunConfig) -> dict[FeatureKind, density.KdeModel]:
    train = load_materialized(cfg, Split.TRAIN)
    val = load_materialized(cfg, Split.VALIDATION)
    models = {}
    for kind in cfg.features:
        models[kind] = fit_prior_feature(cfg, kind, train, val)
        log.info("prior %s: bandwidth=%.6g", kind.value, models[kind].bandwidth)
    return models


# ---------------------------------------------------------------------------
# training


def _predictor_path(cfg: RunConfig, kind: FeatureKind) -> Path:
    return _models_dir(cfg) / f"predictor_{kind.value}.npz"


def train_feature(
    cfg: RunConfig, kind: FeatureKind, train: Corpus, val: Corpus, test: Corpus | None
) -> predictor_mod.PredictorModel:
    """Train one model per eligible family and keep the one with the best
    validation cross-entropy."""
    vals = [feature_values(train, kind), feature_values(val, kind)]
    if test is not None:
        vals.append(feature_values(test, kind))
    observed = np.concatenate([v for v in vals if v.size])
    candidates = conditional.candidate_families(observed, cfg.families)
    if not candidates:
        raise CorpusError(f"no family candidate is compatible with {kind.value} values")
    trained = {}
    scores = {}
    for family in candidates:
        model = predictor_mod.train(train, val, kind, family, cfg.train)
        trained[family] = model
        scores[family] = model.train_log["best_val_ce"]
        log.info("trained %s/%s: val_ce=%.4f after %d epoch(s)",
                 kind.value, family.value, scores[family], model.train_log["epochs_run"])
    best = conditional.select_family(scores)
    model = trained[best]
    model.save(_predictor_path(cfg, kind))
    log_path = _models_dir(cfg) / f"train_log_{kind.value}.json"
    with open(log_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "config_hash": cfg.config_hash(),
                "seed": cfg.seed,
                "feature": kind.value,
                "selected_family": best.value,
                "family_val_ce": {f.value: scores[f] for f in scores},
                "trajectory": model.train_log["trajectory"],
                "best_epoch": model.train_log["best_epoch"],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return model


def run_train(cfg: RunConfig) -> dict[FeatureKind, predictor_mod.PredictorModel]:
    train = load_materialized(cfg, Split.TRAIN)
    val = load_materialized(cfg, Split.VALIDATION)
    test = load_materialized(cfg, Split.TEST)
    return {kind: train_feature(cfg, kind, train, val, test) for kind in cfg.features}


# ---------------------------------------------------------------------------
# sweep


def _get_predictor(cfg: RunConfig, kind: FeatureKind, train: Corpus, val: Corpus, test: Corpus):
    if cfg.remote_endpoint:
        host, _, port = cfg.remote_endpoint.rpartition(":")
        return RemotePredictor(host or "127.0.0.1", int(port), kind.value, cfg.families[0])
    path = _predictor_path(cfg, kind)
    if path.exists():
        return predictor_mod.PredictorModel.load(path)
    return train_feature(cfg, kind, train, val, test)


def run_sweep(cfg: RunConfig) -> dict[str, MiGrid]:
    """Grids, plateau reports and histograms for every configured feature,
    plus the cross-feature average. Prerequisites are built when missing."""
    train = load_materialized(cfg, Split.TRAIN)
    val = load_materialized(cfg, Split.VALIDATION)
    test = load_materialized(cfg, Split.TEST)
    chash = cfg.config_hash()
    out = _sweep_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)

    grids: dict[str, MiGrid] = {}
    uncond_entries = []
    for kind in cfg.features:
        kde_path = _kde_path(cfg, kind)
        kde = density.load_kde(kde_path) if kde_path.exists() else fit_prior_feature(cfg, kind, train, val)
        pred = _get_predictor(cfg, kind, train, val, test)
        grid = sweep_feature(
            test,
            kind,
            kde,
            pred,
            past_max=cfg.sweep.past_max,
            future_max=cfg.sweep.future_max,
            threads=cfg.threads,
        )
        grids[kind.value] = grid
        mi_sweep.write_grid_csv(grid, out / f"grid_{kind.value}.csv", config_hash=chash, seed=cfg.seed)
        report = plateau_report(grid, cfg.sweep.plateau_tolerance)
        mi_sweep.write_plateau_text(report, grid, out / f"plateau_{kind.value}.txt",
                                    config_hash=chash, seed=cfg.seed)
        mi_sweep.write_histogram_csv(
            feature_values(test, kind), kind.value, out / f"hist_{kind.value}.csv",
            bins=cfg.report.histogram_bins, config_hash=chash, seed=cfg.seed,
        )
        uncond_entries.append((kind.value, grid.h_uncond))
        if hasattr(pred, "close"):
            pred.close()

    mi_sweep.write_unconditional_csv(uncond_entries, out / "table_unconditional.csv",
                                     config_hash=chash, seed=cfg.seed)
    if len(cfg.features) > 1:
        avg = average_grids([grids[k.value] for k in cfg.features])
        grids[avg.feature] = avg
        mi_sweep.write_grid_csv(avg, out / "grid_average.csv", config_hash=chash, seed=cfg.seed)
        mi_sweep.write_plateau_text(
            plateau_report(avg, cfg.sweep.plateau_tolerance), avg,
            out / "plateau_average.txt", config_hash=chash, seed=cfg.seed,
        )
    return grids


# ---------------------------------------------------------------------------
# report


def run_report(cfg: RunConfig) -> list[Path]:
    """Rebuild plateau reports (and optional SVG plots) from the sweep CSVs
    alone, proving the persisted artifacts are self-sufficient."""
    sweep_dir = _sweep_dir(cfg)
    grid_files = sorted(sweep_dir.glob("grid_*.csv"))
    if not grid_files:
        raise CorpusError(f"no grid CSVs under {sweep_dir}; run sweep first")
    written = []
    report_dir = Path(cfg.output_dir) / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    for path in grid_files:
        grid = mi_sweep.read_grid_csv(path)
        report = plateau_report(grid, cfg.sweep.plateau_tolerance)
        target = report_dir / f"plateau_{grid.feature}.txt"
        mi_sweep.write_plateau_text(report, grid, target, config_hash=chash, seed=cfg.seed)
        written.append(target)
        if cfg.report.plots:
            written.extend(_plot_grid(grid, report_dir, cfg))
    return written


def _plot_grid(grid: MiGrid, report_dir: Path, cfg: RunConfig) -> list[Path]:
    try:
        import matplotlib
    except ImportError as exc:
        raise CorpusError("plots requested but matplotlib is not installed") from exc
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = str(cfg.seed)
    import matplotlib.pyplot as plt

    written = []
    pmax, fmax = grid.past_max, grid.future_max
    mat = np.full((pmax + 1, fmax + 1), np.nan)
    for (n, m), cell in grid.cells.items():
        mat[n, m] = cell.mi
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(mat, origin="upper", aspect="auto", cmap="viridis")
    ax.set_xlabel("future words (m)")
    ax.set_ylabel("past words (n)")
    ax.set_title(f"{grid.feature}: information vs context window")
    fig.colorbar(im, ax=ax, label="nats")
    heat = report_dir / f"heatmap_{grid.feature}.svg"
    fig.savefig(heat, metadata={"Date": None})
    plt.close(fig)
    written.append(heat)

    fig, ax = plt.subplots(figsize=(5, 4))
    for axis, color in (("past", "tab:red"), ("future", "tab:blue")):
        cells = grid.axis(axis)
        ks = list(range(len(cells)))
        ax.errorbar(ks, [c.mi for c in cells], yerr=[c.sem for c in cells],
                    label=axis, color=color, capsize=2)
        ax.axhline(cells[-1].mi, color=color, linestyle="--", linewidth=0.8)
    ax.set_xlabel("context words")
    ax.set_ylabel("information (nats)")
    ax.set_title(f"{grid.feature}: single-direction context")
    ax.legend()
    curves = report_dir / f"curves_{grid.feature}.svg"
    fig.savefig(curves, metadata={"Date": None})
    plt.close(fig)
    written.append(curves)
    return written
