"""The (past, future) grid of conditional entropies and information values.

Each cell (n, m) evaluates the conditional model on every test position
whose utterance supplies the full window of n predecessors and m successors
(no padding), subtracts from the unconditional entropy, and records sample
counts and standard errors. Plateau detection finds the smallest context
length whose information is within tolerance of the longest available one.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .conditional import constrain_arrays, logpdf_arrays
from .corpus import Corpus, FeatureKind, UtteranceSeries, utterance_series
from .density import EntropyEstimate, KdeModel, kde_logpdf_many
from .predictor import MAX_WINDOW, ContextWindow, ParamPredictor

log = logging.getLogger(__name__)

GRID_CSV_HEADER = "feature,n,m,h_uncond,h_cond,mi,sem,samples"
AVERAGE_FEATURE = "average"


class SweepError(Exception):
    """Grid evaluation failed (for example no eligible positions)."""


@dataclass(frozen=True)
class GridCell:
    past: int
    future: int
    h_cond: EntropyEstimate
    mi: float
    sem: float
    samples: int

    @property
    def negative(self) -> bool:
        return self.mi < 0


@dataclass
class MiGrid:
    feature: str
    h_uncond: EntropyEstimate
    cells: dict[tuple[int, int], GridCell]

    @property
    def past_max(self) -> int:
        return max(n for n, _ in self.cells)

    @property
    def future_max(self) -> int:
        return max(m for _, m in self.cells)

    def axis(self, which: str) -> list[GridCell]:
        """Cells along one context direction, the other held at zero."""
        if which == "past":
            ks = sorted(n for n, m in self.cells if m == 0)
            return [self.cells[(k, 0)] for k in ks]
        if which == "future":
            ks = sorted(m for n, m in self.cells if n == 0)
            return [self.cells[(0, k)] for k in ks]
        raise ValueError(f"axis must be 'past' or 'future', got {which!r}")

    def negative_cells(self) -> list[GridCell]:
        return [c for c in self.cells.values() if c.negative]


@dataclass(frozen=True)
class AxisPlateau:
    scale: int
    reference_mi: float
    reference_sem: float
    threshold: float


@dataclass(frozen=True)
class PlateauReport:
    feature: str
    past_scale: int
    future_scale: int
    tolerance: float
    past_reference: float
    future_reference: float


# ---------------------------------------------------------------------------
# cell evaluation


def eligible_positions(series: Sequence[UtteranceSeries], past: int, future: int):
    """Windows, target values and (utterance, position) keys for one cell."""
    windows: list[ContextWindow] = []
    values: list[float] = []
    keys: list[tuple[int, int]] = []
    for ui, s in enumerate(series):
        length = len(s.tokens)
        for t in range(past, length - future):
            if not np.isfinite(s.values[t]):
                continue
            windows.append(ContextWindow(tokens=s.tokens[t - past:t + future + 1], target_index=past))
            values.append(float(s.values[t]))
            keys.append((ui, t))
    return windows, np.asarray(values, dtype=np.float64), keys


def _cell_nll(predictor: ParamPredictor, series, past: int, future: int):
    windows, values, keys = eligible_positions(series, past, future)
    if not windows:
        raise SweepError(f"zero eligible positions for window ({past}, {future})")
    raw = predictor.predict_raw(windows)
    p1, p2 = constrain_arrays(raw, predictor.family)
    nll = -logpdf_arrays(predictor.family, p1, p2, values)
    return nll, keys


def _entropy_of(nll: np.ndarray) -> EntropyEstimate:
    sem = float(np.std(nll, ddof=1) / math.sqrt(nll.size)) if nll.size > 1 else 0.0
    return EntropyEstimate(value=float(np.mean(nll)), sem=sem, n=int(nll.size))


def conditional_entropy(
    predictor: ParamPredictor,
    test: Corpus,
    feature: FeatureKind,
    past: int,
    future: int,
) -> EntropyEstimate:
    """Mean negative log-density of the model over eligible test positions."""
    if not (0 <= past and 0 <= future and past + 1 + future <= MAX_WINDOW):
        raise ValueError(f"window ({past}, {future}) outside supported sizes")
    series = utterance_series(test, feature)
    nll, _ = _cell_nll(predictor, series, past, future)
    return _entropy_of(nll)


def mi_grid(
    h_uncond: EntropyEstimate,
    cell_nlls: Mapping[tuple[int, int], tuple[np.ndarray, list]],
    *,
    feature: str,
    uncond_nll: np.ndarray | None = None,
    uncond_keys: list | None = None,
) -> MiGrid:
    """Assemble cells into a grid: mi = h_uncond - h_cond per cell.

    Where a cell's sample set coincides with the unconditional one, the SEM
    comes from the per-sample paired differences; elsewhere the two SEMs are
    combined in quadrature (conservative). Negative cells are kept and
    flagged, never clamped.
    """
    cells = {}
    for (past, future), (nll, keys) in cell_nlls.items():
        h_cond = _entropy_of(nll)
        mi = h_uncond.value - h_cond.value
        if uncond_nll is not None and uncond_keys is not None and keys == uncond_keys:
            diffs = uncond_nll - nll
            sem = float(np.std(diffs, ddof=1) / math.sqrt(diffs.size)) if diffs.size > 1 else 0.0
        else:
            sem = math.hypot(h_uncond.sem, h_cond.sem)
        cells[(past, future)] = GridCell(
            past=past, future=future, h_cond=h_cond, mi=mi, sem=sem, samples=h_cond.n
        )
    grid = MiGrid(feature=feature, h_uncond=h_uncond, cells=cells)
    negative = grid.negative_cells()
    if negative:
        log.warning(
            "%s: %d grid cell(s) have negative information (weak model), e.g. (%d,%d)=%.4f",
            feature, len(negative), negative[0].past, negative[0].future, negative[0].mi,
        )
    return grid


def sweep_feature(
    test: Corpus,
    feature: FeatureKind,
    kde: KdeModel,
    predictor: ParamPredictor,
    *,
    past_max: int = 10,
    future_max: int = 10,
    threads: int = 1,
) -> MiGrid:
    """Evaluate every representable cell with n <= past_max, m <= future_max.

    Cells whose full window exceeds the model's span (n + 1 + m > 11) are
    outside the sweep; cells with no eligible test positions are skipped
    with a warning so short-utterance corpora still produce a grid.
    """
    series = utterance_series(test, feature)
    _, values, keys0 = eligible_positions(series, 0, 0)
    if values.size == 0:
        raise SweepError(f"no {feature.value} values in the test split")
    uncond_nll = -kde_logpdf_many(kde, values)
    srt = np.sort(uncond_nll)  # permutation-invariant reduction
    h_uncond = EntropyEstimate(
        value=float(np.mean(srt)),
        sem=float(np.std(srt, ddof=1) / math.sqrt(srt.size)) if srt.size > 1 else 0.0,
        n=int(srt.size),
    )

    wanted = [
        (n, m)
        for n in range(past_max + 1)
        for m in range(future_max + 1)
        if n + 1 + m <= MAX_WINDOW
    ]

    def run_cell(nm):
        try:
            return nm, _cell_nll(predictor, series, nm[0], nm[1])
        except SweepError:
            return nm, None

    results = {}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for nm, res in pool.map(run_cell, wanted):
                results[nm] = res
    else:
        for nm in wanted:
            results[nm] = run_cell(nm)[1]

    skipped = [nm for nm, res in results.items() if res is None]
    if skipped:
        log.warning("%s: skipped %d cell(s) with zero eligible positions", feature.value, len(skipped))
    cell_nlls = {nm: res for nm, res in results.items() if res is not None}
    if not cell_nlls:
        raise SweepError(f"no cell of the ({past_max}, {future_max}) sweep had eligible positions")
    return mi_grid(
        h_uncond, cell_nlls, feature=feature.value, uncond_nll=uncond_nll, uncond_keys=keys0
    )


def average_grids(grids: Sequence[MiGrid]) -> MiGrid:
    """Unweighted cell-wise mean across features; SEM = sqrt(sum sem^2) / k."""
    if not grids:
        raise ValueError("no grids to average")
    support = set(grids[0].cells)
    for g in grids[1:]:
        if set(g.cells) != support:
            raise ValueError("grids have mismatched (n, m) support")
    k = len(grids)
    h_uncond = EntropyEstimate(
        value=sum(g.h_uncond.value for g in grids) / k,
        sem=math.sqrt(sum(g.h_uncond.sem**2 for g in grids)) / k,
        n=min(g.h_uncond.n for g in grids),
    )
    cells = {}
    for nm in support:
        members = [g.cells[nm] for g in grids]
        h_cond = EntropyEstimate(
            value=sum(c.h_cond.value for c in members) / k,
            sem=math.sqrt(sum(c.h_cond.sem**2 for c in members)) / k,
            n=min(c.h_cond.n for c in members),
        )
        cells[nm] = GridCell(
            past=nm[0],
            future=nm[1],
            h_cond=h_cond,
            mi=h_uncond.value - h_cond.value,
            sem=math.sqrt(sum(c.sem**2 for c in members)) / k,
            samples=min(c.samples for c in members),
        )
    return MiGrid(feature=AVERAGE_FEATURE, h_uncond=h_uncond, cells=cells)


# ---------------------------------------------------------------------------
# plateau


def detect_plateau(grid: MiGrid, axis: str, tolerance: float = 0.02) -> AxisPlateau:
    """Smallest k whose information reaches the longest-context value minus
    max(tolerance, that value's SEM), along one axis of the grid."""
    cells = grid.axis(axis)
    ks = [c.past if axis == "past" else c.future for c in cells]
    if not cells or ks != list(range(len(cells))):
        raise SweepError(f"{axis} axis of the grid is not fully populated")
    ref = cells[-1]
    threshold = ref.mi - max(tolerance, ref.sem)
    for k, cell in enumerate(cells):
        if cell.mi >= threshold:
            return AxisPlateau(scale=k, reference_mi=ref.mi, reference_sem=ref.sem, threshold=threshold)
    return AxisPlateau(scale=len(cells) - 1, reference_mi=ref.mi, reference_sem=ref.sem, threshold=threshold)


def plateau_report(grid: MiGrid, tolerance: float = 0.02) -> PlateauReport:
    past = detect_plateau(grid, "past", tolerance)
    future = detect_plateau(grid, "future", tolerance)
    return PlateauReport(
        feature=grid.feature,
        past_scale=past.scale,
        future_scale=future.scale,
        tolerance=tolerance,
        past_reference=past.reference_mi,
        future_reference=future.reference_mi,
    )


# ---------------------------------------------------------------------------
# persistence


def _artifact_header(kind: str, config_hash: str, seed: int) -> str:
    return f"# ctxmi-{kind} schema=1 config_hash={config_hash} seed={seed}\n"


def write_grid_csv(grid: MiGrid, path, *, config_hash: str = "none", seed: int = 0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_artifact_header("grid", config_hash, seed))
        fh.write(GRID_CSV_HEADER + "\n")
        for nm in sorted(grid.cells):
            c = grid.cells[nm]
            fh.write(
                f"{grid.feature},{c.past},{c.future},{grid.h_uncond.value!r},"
                f"{c.h_cond.value!r},{c.mi!r},{c.sem!r},{c.samples}\n"
            )


def read_grid_csv(path) -> MiGrid:
    """Rebuild a grid from its CSV. Per-sample entropy SEMs are not stored
    in the schema, so the entropy estimates come back with sem 0."""
    path = Path(path)
    feature = None
    h_uncond_value = None
    cells = {}
    samples_total = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line == GRID_CSV_HEADER:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise SweepError(f"{path}: bad grid row: {line!r}")
            feat, n, m, h_u, h_c, mi, sem, samples = parts
            feature = feat
            h_uncond_value = float(h_u)
            n, m, samples = int(n), int(m), int(samples)
            samples_total = max(samples_total, samples)
            cells[(n, m)] = GridCell(
                past=n,
                future=m,
                h_cond=EntropyEstimate(value=float(h_c), sem=0.0, n=samples),
                mi=float(mi),
                sem=float(sem),
                samples=samples,
            )
    if feature is None:
        raise SweepError(f"{path}: no grid rows found")
    return MiGrid(
        feature=feature,
        h_uncond=EntropyEstimate(value=h_uncond_value, sem=0.0, n=max(samples_total, 1)),
        cells=cells,
    )


def write_plateau_text(report: PlateauReport, grid: MiGrid, path, *, config_hash: str = "none", seed: int = 0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    negative = grid.negative_cells()
    lines = [
        _artifact_header("plateau", config_hash, seed).rstrip("\n"),
        f"feature: {report.feature}",
        f"tolerance_nats: {report.tolerance!r}",
        f"past_scale: {report.past_scale}",
        f"past_reference_mi: {report.past_reference!r}",
        f"future_scale: {report.future_scale}",
        f"future_reference_mi: {report.future_reference!r}",
        "negative_cells: "
        + ("none" if not negative else "; ".join(f"({c.past},{c.future})={c.mi!r}" for c in negative)),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_histogram_csv(values, feature: str, path, *, bins: int = 60, config_hash: str = "none", seed: int = 0) -> None:
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_artifact_header("histogram", config_hash, seed))
        fh.write("feature,bin_lo,bin_hi,count\n")
        for i, c in enumerate(counts):
            fh.write(f"{feature},{edges[i]!r},{edges[i + 1]!r},{int(c)}\n")


def write_unconditional_csv(entries: Sequence[tuple[str, EntropyEstimate]], path, *, config_hash: str = "none", seed: int = 0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_artifact_header("unconditional", config_hash, seed))
        fh.write("feature,entropy\n")
        for name, est in entries:
            fh.write(f"{name},{est.value!r}\n")
