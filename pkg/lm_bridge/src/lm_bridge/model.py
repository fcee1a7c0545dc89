"""Masked-LM encoder with a per-word parameter head.

Whole words arrive over the protocol; each is tokenized to subwords, the
encoder runs on the subword sequence, and the word's representation is the
hidden state of its first subword. A linear head maps it to two raw
(unconstrained) distribution parameters; constraining is the client's job.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import torch
from torch import nn
from transformers import AutoModel, AutoTokenizer

from .config import BridgeConfig

SCALE_FLOOR = 1e-6
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class WordParamModel(nn.Module):
    def __init__(self, base_model: str):
        super().__init__()
        self.encoder = AutoModel.from_pretrained(base_model)
        self.head = nn.Linear(self.encoder.config.hidden_size, 2)

    def forward(self, input_ids, attention_mask, first_subword):
        """first_subword: (B, W) indices into the subword axis, -1 for padding.

        Returns (B, W, 2) raw parameters; padded words yield garbage rows
        that callers must mask.
        """
        hidden = self.encoder(input_ids=input_ids, attention_mask=attention_mask).last_hidden_state
        gather = first_subword.clamp(min=0).unsqueeze(-1).expand(-1, -1, hidden.size(-1))
        word_repr = hidden.gather(1, gather)
        return self.head(word_repr)


def encode_words(tokenizer, words, max_subword_len: int):
    """Subword ids for a word sequence plus each word's first-subword index.

    Words that tokenize to nothing fall back to the unknown token so every
    word keeps a representation.
    """
    ids = [tokenizer.cls_token_id]
    first = []
    for word in words:
        pieces = tokenizer.encode(word, add_special_tokens=False)
        if not pieces:
            pieces = [tokenizer.unk_token_id]
        first.append(len(ids))
        ids.extend(pieces)
    ids.append(tokenizer.sep_token_id)
    if len(ids) > max_subword_len:
        raise ValueError(
            f"window of {len(words)} words needs {len(ids)} subword slots, "
            f"limit is {max_subword_len}"
        )
    return ids, first


def batch_windows(tokenizer, windows, max_subword_len: int, device):
    """Pad a list of word sequences into model inputs."""
    encoded = [encode_words(tokenizer, w, max_subword_len) for w in windows]
    sub_len = max(len(ids) for ids, _ in encoded)
    word_len = max(len(first) for _, first in encoded)
    pad = tokenizer.pad_token_id
    input_ids = torch.full((len(windows), sub_len), pad, dtype=torch.long)
    attention = torch.zeros((len(windows), sub_len), dtype=torch.long)
    first_subword = torch.full((len(windows), word_len), -1, dtype=torch.long)
    for b, (ids, first) in enumerate(encoded):
        input_ids[b, : len(ids)] = torch.tensor(ids)
        attention[b, : len(ids)] = 1
        first_subword[b, : len(first)] = torch.tensor(first)
    return input_ids.to(device), attention.to(device), first_subword.to(device)


def family_nll(family: str, raw: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Negative log-density per element from raw parameter pairs."""
    p2 = nn.functional.softplus(raw[..., 1]) + SCALE_FLOOR
    if family == "gaussian":
        mu = raw[..., 0]
        return LOG_SQRT_2PI + torch.log(p2) + 0.5 * ((y - mu) / p2) ** 2
    if family == "laplace":
        loc = raw[..., 0]
        return torch.log(2.0 * p2) + torch.abs(y - loc) / p2
    if family == "gamma":
        shape = nn.functional.softplus(raw[..., 0]) + SCALE_FLOOR
        if torch.any(y <= 0):
            raise ValueError("gamma targets must be > 0")
        return -(shape * torch.log(p2) - torch.lgamma(shape) + (shape - 1.0) * torch.log(y) - p2 * y)
    raise ValueError(f"unknown family {family!r}")


def save_bridge(path, model: WordParamModel, tokenizer, cfg: BridgeConfig) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model.encoder.save_pretrained(path / "encoder")
    tokenizer.save_pretrained(path / "encoder")
    torch.save(model.head.state_dict(), path / "head.pt")
    with open(path / "bridge.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "feature": cfg.feature,
                "family": cfg.family,
                "span_lo": cfg.span_lo,
                "span_hi": cfg.span_hi,
                "patience": cfg.patience,
                "seed": cfg.seed,
                "max_subword_len": cfg.max_subword_len,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")


def load_bridge(path) -> tuple[WordParamModel, "AutoTokenizer", dict]:
    path = Path(path)
    with open(path / "bridge.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    model = WordParamModel(str(path / "encoder"))
    model.head.load_state_dict(torch.load(path / "head.pt", weights_only=True))
    model.eval()
    tokenizer = AutoTokenizer.from_pretrained(str(path / "encoder"))
    return model, tokenizer, meta
