"""Finetuning loop: span sampling over utterances, validation early stopping.

The data regime mirrors the estimation toolkit's trainer: one random span of
1-10 words per utterance per epoch, every span position predicted at once,
and training stops when validation cross-entropy has not improved for
`patience` epochs, keeping the best snapshot.
"""

from __future__ import annotations

import copy
import logging
import math

import numpy as np
import torch
from transformers import AutoTokenizer

from .config import BridgeConfig
from .corpus_io import UtteranceData, read_utterances
from .model import WordParamModel, batch_windows, family_nll

log = logging.getLogger(__name__)


class EarlyStopping:
    """Stop when the monitored loss has not improved for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, loss: float, epoch: int) -> bool:
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def sample_span(n_words: int, rng: np.random.Generator, lo: int, hi: int) -> tuple[int, int]:
    length = int(rng.integers(lo, min(hi, n_words) + 1))
    start = int(rng.integers(0, n_words - length + 1))
    return start, length


def _spans_for_epoch(series, order, rng, lo, hi):
    spans = []
    for idx in order:
        u = series[idx]
        start, length = sample_span(len(u.tokens), rng, lo, hi)
        tokens = u.tokens[start:start + length]
        values = np.asarray(u.values[start:start + length], dtype=np.float64)
        if np.any(np.isfinite(values)):
            spans.append((tokens, values))
    return spans


def _batch_loss(model, tokenizer, family, spans, cfg, device):
    windows = [tokens for tokens, _ in spans]
    input_ids, attention, first_subword = batch_windows(
        tokenizer, windows, cfg.max_subword_len, device
    )
    width = first_subword.size(1)
    y = torch.zeros((len(spans), width), dtype=torch.float32, device=device)
    tmask = torch.zeros((len(spans), width), dtype=torch.float32, device=device)
    for b, (_, values) in enumerate(spans):
        finite = np.isfinite(values)
        y[b, : len(values)][torch.tensor(finite)] = torch.tensor(
            values[finite], dtype=torch.float32, device=device
        )
        tmask[b, : len(values)][torch.tensor(finite)] = 1.0
    raw = model(input_ids, attention, first_subword)
    y_safe = torch.where(tmask > 0, y, torch.ones_like(y))
    nll = family_nll(family, raw, y_safe)
    return (nll * tmask).sum(), tmask.sum()


def evaluate(model, tokenizer, family, spans, cfg, device, batch_size=64) -> float:
    model.eval()
    total, count = 0.0, 0.0
    with torch.no_grad():
        for i in range(0, len(spans), batch_size):
            s, n = _batch_loss(model, tokenizer, family, spans[i:i + batch_size], cfg, device)
            total += float(s)
            count += float(n)
    return total / count


def finetune(cfg: BridgeConfig, train_path, val_path, device: str = "cpu") -> tuple[WordParamModel, "AutoTokenizer", dict]:
    """Train the parameter head (and encoder) on a corpus; returns the best
    snapshot by validation cross-entropy plus the training log."""
    torch.manual_seed(cfg.seed)
    tokenizer = AutoTokenizer.from_pretrained(cfg.base_model)
    model = WordParamModel(cfg.base_model).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    train_series = read_utterances(train_path, cfg.feature)
    val_series = read_utterances(val_path, cfg.feature)
    if not train_series or not val_series:
        raise ValueError(f"no usable utterances for feature {cfg.feature!r}")

    rng = np.random.default_rng(cfg.seed)
    val_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    val_spans = _spans_for_epoch(val_series, range(len(val_series)), val_rng, cfg.span_lo, cfg.span_hi)

    stopper = EarlyStopping(cfg.patience)
    best_state = copy.deepcopy(model.state_dict())
    trajectory = []
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_series))
        spans = _spans_for_epoch(train_series, order, rng, cfg.span_lo, cfg.span_hi)
        epoch_loss, epoch_count = 0.0, 0.0
        for i in range(0, len(spans), cfg.batch_size):
            optimizer.zero_grad()
            loss_sum, count = _batch_loss(model, tokenizer, cfg.family, spans[i:i + cfg.batch_size], cfg, device)
            loss = loss_sum / count
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 5.0)
            optimizer.step()
            epoch_loss += float(loss_sum.detach())
            epoch_count += float(count)
        val_ce = evaluate(model, tokenizer, cfg.family, val_spans, cfg, device)
        trajectory.append(val_ce)
        log.info("epoch %d: train_ce=%.4f val_ce=%.4f", epoch, epoch_loss / epoch_count, val_ce)
        improved = val_ce < stopper.best
        stop = stopper.update(val_ce, epoch)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    train_log = {
        "trajectory": trajectory,
        "best_epoch": stopper.best_epoch,
        "best_val_ce": stopper.best,
        "epochs_run": len(trajectory),
    }
    return model, tokenizer, train_log
