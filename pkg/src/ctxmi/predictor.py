"""Context-conditioned parameter prediction.

A window of up to 11 tokens around a target word is mapped to the two raw
parameters of the output family, for every requested position at once. The
built-in model is a small numpy network: token + position embeddings, two
window-internal mixing layers, and a linear head. Training samples variable
length spans from utterances and stops early on validation cross-entropy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .conditional import (
    SCALE_FLOOR,
    DistFamily,
    DistParams,
    constrain,
    constrain_arrays,
    inv_softplus,
    logpdf_arrays,
    nll_param_grads,
)
from .corpus import Corpus, FeatureKind, UtteranceSeries, utterance_series

log = logging.getLogger(__name__)

MAX_WINDOW = 11  # n + 1 + m
UNK_ID = 0
PAD_ID = 1


class TrainingDivergedError(Exception):
    """Non-finite training loss; carries the epoch and batch index."""

    def __init__(self, epoch: int, batch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class Vocabulary:
    """Token to dense id map built from the training split only.

    Ids 0 and 1 are reserved for unknown and padding; real tokens follow in
    sorted order so the mapping is stable across runs.
    """

    def __init__(self, tokens: Iterable[str]):
        uniq = sorted(set(tokens))
        self._ids = {tok: i + 2 for i, tok in enumerate(uniq)}
        self._tokens = uniq

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "Vocabulary":
        return cls(w.token for w in corpus.iter_words())

    def __len__(self) -> int:
        return len(self._tokens) + 2

    def encode(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        return np.asarray([self.encode(t) for t in tokens], dtype=np.int64)

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)


@dataclass(frozen=True)
class ContextWindow:
    """The target word with its `past_len` predecessors and the rest as
    successors; tokens are plain strings, id mapping happens in the model."""

    tokens: tuple[str, ...]
    target_index: int

    def __post_init__(self):
        if not (1 <= len(self.tokens) <= MAX_WINDOW):
            raise ValueError(f"window length must be in [1, {MAX_WINDOW}], got {len(self.tokens)}")
        if not (0 <= self.target_index < len(self.tokens)):
            raise ValueError(f"target_index {self.target_index} outside window of {len(self.tokens)}")

    @property
    def past_len(self) -> int:
        return self.target_index

    @property
    def future_len(self) -> int:
        return len(self.tokens) - 1 - self.target_index


@dataclass(frozen=True)
class SpanSample:
    """A contiguous utterance slice where every position is a prediction
    target: position i sees i past and len-1-i future words."""

    tokens: tuple[str, ...]
    start: int

    def __len__(self) -> int:
        return len(self.tokens)

    def context_counts(self, i: int) -> tuple[int, int]:
        return i, len(self.tokens) - 1 - i


def sample_span(u, rng: np.random.Generator, lo: int = 1, hi: int = 10) -> SpanSample:
    """Draw a span length uniformly in [lo, min(hi, len)], then a start
    offset uniformly among valid positions."""
    tokens = u.tokens if hasattr(u, "tokens") else tuple(u)
    n = len(tokens)
    if n < 1:
        raise ValueError("cannot sample a span from an empty utterance")
    length = int(rng.integers(lo, min(hi, n) + 1))
    start = int(rng.integers(0, n - length + 1))
    return SpanSample(tokens=tuple(tokens[start:start + length]), start=start)


@dataclass(frozen=True)
class TrainConfig:
    span_lo: int = 1
    span_hi: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    max_epochs: int = 80
    patience: int = 3
    seed: int = 0
    embed_dim: int = 64
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not (1 <= self.span_lo <= self.span_hi <= MAX_WINDOW):
            raise ValueError(f"span range must lie within [1, {MAX_WINDOW}]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


class EarlyStopping:
    """Stop when the monitored loss has not improved for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, loss: float, epoch: int) -> bool:
        """Record an epoch loss; returns True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# ---------------------------------------------------------------------------
# model


_PARAM_KEYS = (
    "tok_emb", "pos_emb", "mix0", "mix1",
    "dense0_w", "dense0_b", "dense1_w", "dense1_b",
    "head_w", "head_b",
)


def _init_params(vocab_size: int, dim: int, rng: np.random.Generator, raw_scale_init: float) -> dict:
    p = {
        "tok_emb": rng.normal(0.0, 0.1, (vocab_size, dim)),
        "pos_emb": rng.normal(0.0, 0.1, (MAX_WINDOW, dim)),
        "mix0": np.eye(MAX_WINDOW) + rng.normal(0.0, 0.02, (MAX_WINDOW, MAX_WINDOW)),
        "mix1": np.eye(MAX_WINDOW) + rng.normal(0.0, 0.02, (MAX_WINDOW, MAX_WINDOW)),
        "dense0_w": rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, dim)),
        "dense0_b": np.zeros(dim),
        "dense1_w": rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, dim)),
        "dense1_b": np.zeros(dim),
        "head_w": rng.normal(0.0, 0.01, (dim, 2)),
        "head_b": np.array([0.0, raw_scale_init]),
    }
    return p


def _forward(p: dict, ids: np.ndarray, mask: np.ndarray):
    """Raw (B, L, 2) outputs plus the cache needed for the backward pass."""
    L = ids.shape[1]
    mcol = mask[..., None]
    x0 = (p["tok_emb"][ids] + p["pos_emb"][:L][None, :, :]) * mcol
    h1 = np.einsum("ij,bjc->bic", p["mix0"][:L, :L], x0)
    a1 = np.tanh(h1 @ p["dense0_w"] + p["dense0_b"])
    x1 = (x0 + a1) * mcol
    h2 = np.einsum("ij,bjc->bic", p["mix1"][:L, :L], x1)
    a2 = np.tanh(h2 @ p["dense1_w"] + p["dense1_b"])
    x2 = (x1 + a2) * mcol
    raw = x2 @ p["head_w"] + p["head_b"]
    return raw, (ids, mask, x0, h1, a1, x1, h2, a2, x2)


def _backward(p: dict, d_raw: np.ndarray, cache) -> dict:
    ids, mask, x0, h1, a1, x1, h2, a2, x2 = cache
    L = ids.shape[1]
    mcol = mask[..., None]
    g = {k: np.zeros_like(v) for k, v in p.items()}

    g["head_w"] = np.einsum("blc,blk->ck", x2, d_raw)
    g["head_b"] = d_raw.sum(axis=(0, 1))
    dx2 = (d_raw @ p["head_w"].T) * mcol

    dx1 = dx2.copy()
    dz2 = dx2 * (1.0 - a2 * a2)
    g["dense1_w"] = np.einsum("blc,blk->ck", h2, dz2)
    g["dense1_b"] = dz2.sum(axis=(0, 1))
    dh2 = dz2 @ p["dense1_w"].T
    g["mix1"][:L, :L] = np.einsum("bic,bjc->ij", dh2, x1)
    dx1 += np.einsum("ij,bic->bjc", p["mix1"][:L, :L], dh2)
    dx1 *= mcol

    dx0 = dx1.copy()
    dz1 = dx1 * (1.0 - a1 * a1)
    g["dense0_w"] = np.einsum("blc,blk->ck", h1, dz1)
    g["dense0_b"] = dz1.sum(axis=(0, 1))
    dh1 = dz1 @ p["dense0_w"].T
    g["mix0"][:L, :L] = np.einsum("bic,bjc->ij", dh1, x0)
    dx0 += np.einsum("ij,bic->bjc", p["mix0"][:L, :L], dh1)
    dx0 *= mcol

    g["pos_emb"][:L] = dx0.sum(axis=0)
    np.add.at(g["tok_emb"], ids.reshape(-1), dx0.reshape(-1, dx0.shape[-1]))
    return g


def _raw_grad_from_nll(family: DistFamily, raw: np.ndarray, y: np.ndarray, tmask: np.ndarray):
    """Mean masked NLL and its gradient with respect to the raw outputs."""
    count = float(tmask.sum())
    p1, p2 = constrain_arrays(raw, family)
    y_safe = np.where(tmask > 0, y, 1.0)  # keep off-target values inside any support
    nll = -logpdf_arrays(family, p1, p2, y_safe)
    loss = float((nll * tmask).sum() / count)
    d1, d2 = nll_param_grads(family, p1, p2, y_safe)
    w = tmask / count
    sig2 = _sigmoid(raw[..., 1])
    if family.positive_support:
        d_raw1 = d1 * _sigmoid(raw[..., 0]) * w
    else:
        d_raw1 = d1 * w
    d_raw = np.stack([d_raw1, d2 * sig2 * w], axis=-1)
    return loss, d_raw


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _Adam:
    def __init__(self, keys, params, lr: float, clip_norm: float):
        self.keys = keys
        self.lr = lr
        self.clip = clip_norm
        self.m = {k: np.zeros_like(params[k]) for k in keys}
        self.v = {k: np.zeros_like(params[k]) for k in keys}
        self.t = 0
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8

    def step(self, params: dict, grads: dict) -> None:
        norm = math.sqrt(sum(float((grads[k] ** 2).sum()) for k in self.keys))
        scale = self.clip / norm if norm > self.clip else 1.0
        self.t += 1
        lr_t = self.lr * math.sqrt(1.0 - self.beta2**self.t) / (1.0 - self.beta1**self.t)
        for k in self.keys:
            g = grads[k] * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= lr_t * self.m[k] / (np.sqrt(self.v[k]) + self.eps)


class PredictorModel:
    """Trained window predictor: vocabulary, parameters, output family."""

    def __init__(self, vocab: Vocabulary, family: DistFamily, params: dict, embed_dim: int):
        self.vocab = vocab
        self.family = family
        self.params = params
        self.embed_dim = embed_dim
        self.train_log: dict = {}

    # -- single window -----------------------------------------------------
    def predict(self, window: ContextWindow) -> DistParams:
        raw = self.predict_raw([window])[0]
        return constrain((raw[0], raw[1]), self.family)

    # -- uniform predictor interface ----------------------------------------
    def predict_raw(self, windows: Sequence[ContextWindow]) -> np.ndarray:
        """Raw (unconstrained) parameter pairs, one row per window, evaluated
        at each window's target position."""
        out = np.empty((len(windows), 2))
        by_len: dict[int, list[int]] = {}
        for i, w in enumerate(windows):
            by_len.setdefault(len(w.tokens), []).append(i)
        for L, idxs in sorted(by_len.items()):
            ids = np.empty((len(idxs), L), dtype=np.int64)
            for r, i in enumerate(idxs):
                ids[r] = self.vocab.encode_tokens(windows[i].tokens)
            mask = np.ones((len(idxs), L))
            raw, _ = _forward(self.params, ids, mask)
            for r, i in enumerate(idxs):
                out[i] = raw[r, windows[i].target_index]
        return out

    def raw_for_batch(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if not (1 <= ids.shape[1] <= MAX_WINDOW):
            raise ValueError(f"window length must be in [1, {MAX_WINDOW}], got {ids.shape[1]}")
        raw, _ = _forward(self.params, ids, mask)
        return raw

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        np.savez(
            path,
            vocab=np.asarray(self.vocab.tokens, dtype=object),
            family=self.family.value,
            embed_dim=self.embed_dim,
            **arrays,
        )

    @classmethod
    def load(cls, path) -> "PredictorModel":
        data = np.load(path, allow_pickle=True)
        vocab = Vocabulary(list(data["vocab"]))
        params = {k: data[f"param_{k}"] for k in _PARAM_KEYS}
        return cls(vocab, DistFamily(str(data["family"])), params, int(data["embed_dim"]))


class ParamPredictor(Protocol):
    """What the sweep needs: a family and raw parameters per window."""

    family: DistFamily

    def predict_raw(self, windows: Sequence[ContextWindow]) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# training


def _make_batches(spans: list[tuple[np.ndarray, np.ndarray]], batch_size: int):
    """Pad (ids, values) spans into (ids, y, target_mask, pad_mask) batches.

    Positions with NaN values stay in the input but are excluded from the
    loss. Spans with no finite target are dropped.
    """
    spans = [s for s in spans if np.any(np.isfinite(s[1]))]
    batches = []
    for i in range(0, len(spans), batch_size):
        chunk = spans[i:i + batch_size]
        width = max(len(ids) for ids, _ in chunk)
        ids = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        y = np.zeros((len(chunk), width))
        tmask = np.zeros((len(chunk), width))
        pmask = np.zeros((len(chunk), width))
        for r, (row_ids, row_vals) in enumerate(chunk):
            ids[r, : len(row_ids)] = row_ids
            pmask[r, : len(row_ids)] = 1.0
            finite = np.isfinite(row_vals)
            y[r, : len(row_ids)][finite] = row_vals[finite]
            tmask[r, : len(row_ids)][finite] = 1.0
        batches.append((ids, y, tmask, pmask))
    return batches


def _epoch_spans(series: list[UtteranceSeries], vocab: Vocabulary, order, rng, lo, hi):
    spans = []
    for idx in order:
        s = series[idx]
        span = sample_span(s, rng, lo, hi)
        ids = vocab.encode_tokens(span.tokens)
        vals = s.values[span.start:span.start + len(span)]
        spans.append((ids, vals))
    return spans


def _eval_ce(params: dict, family: DistFamily, batches) -> float:
    total, count = 0.0, 0.0
    for ids, y, tmask, pmask in batches:
        raw, _ = _forward(params, ids, pmask)
        p1, p2 = constrain_arrays(raw, family)
        y_safe = np.where(tmask > 0, y, 1.0)
        nll = -logpdf_arrays(family, p1, p2, y_safe)
        total += float((nll * tmask).sum())
        count += float(tmask.sum())
    return total / count


def train(
    train_corpus: Corpus,
    val_corpus: Corpus,
    feature: FeatureKind,
    family: DistFamily,
    cfg: TrainConfig,
) -> PredictorModel:
    """Fit the window predictor by span sampling, returning the parameter
    snapshot with the best validation cross-entropy."""
    t_series = utterance_series(train_corpus, feature)
    v_series = utterance_series(val_corpus, feature)
    t_series = [s for s in t_series if np.any(np.isfinite(s.values))]
    v_series = [s for s in v_series if np.any(np.isfinite(s.values))]
    if not t_series or not v_series:
        raise ValueError(f"no usable {feature.value} values in train/validation data")

    vocab = Vocabulary.from_corpus(train_corpus)
    all_vals = np.concatenate([s.values[np.isfinite(s.values)] for s in t_series])
    if family.positive_support and float(all_vals.min()) <= 0:
        raise ValueError(f"family {family.value} incompatible with nonpositive {feature.value} values")
    y_scale = float(all_vals.std())
    raw_scale_init = inv_softplus(max(y_scale, 10 * SCALE_FLOOR))

    rng = np.random.default_rng(cfg.seed)
    params = _init_params(len(vocab), cfg.embed_dim, rng, raw_scale_init)
    opt = _Adam(_PARAM_KEYS, params, cfg.learning_rate, cfg.clip_norm)

    # one fixed validation span per utterance, frozen across epochs
    val_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    val_spans = _epoch_spans(v_series, vocab, range(len(v_series)), val_rng, cfg.span_lo, cfg.span_hi)
    val_batches = _make_batches(val_spans, max(cfg.batch_size, 256))
    if not val_batches:
        raise ValueError("validation spans contain no finite targets")

    stopper = EarlyStopping(cfg.patience)
    best_params = {k: v.copy() for k, v in params.items()}
    trajectory: list[float] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(t_series))
        spans = _epoch_spans(t_series, vocab, order, rng, cfg.span_lo, cfg.span_hi)
        for b, (ids, y, tmask, pmask) in enumerate(_make_batches(spans, cfg.batch_size)):
            raw, cache = _forward(params, ids, pmask)
            loss, d_raw = _raw_grad_from_nll(family, raw, y, tmask)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b)
            grads = _backward(params, d_raw, cache)
            opt.step(params, grads)
        val_ce = _eval_ce(params, family, val_batches)
        if not math.isfinite(val_ce):
            raise TrainingDivergedError(epoch, -1, "non-finite validation loss")
        trajectory.append(val_ce)
        log.debug("epoch %d: val_ce=%.6f", epoch, val_ce)
        improved = val_ce < stopper.best
        stop = stopper.update(val_ce, epoch)
        if improved:
            best_params = {k: v.copy() for k, v in params.items()}
        if stop:
            break

    model = PredictorModel(vocab, family, best_params, cfg.embed_dim)
    model.train_log = {
        "trajectory": trajectory,
        "best_epoch": stopper.best_epoch,
        "best_val_ce": stopper.best,
        "epochs_run": len(trajectory),
        "seed": cfg.seed,
    }
    return model
