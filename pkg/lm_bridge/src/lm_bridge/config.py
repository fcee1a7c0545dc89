"""Bridge configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

FEATURES = ("pitch", "energy", "duration", "pause", "abs_prominence", "rel_prominence")
FAMILIES = ("gaussian", "gamma", "laplace")
MAX_WINDOW = 11


@dataclass(frozen=True)
class BridgeConfig:
    """One bridge process serves one (feature, family) pair.

    Span range and patience deliberately mirror the toolkit's trainer, so a
    finetuned transformer and the built-in model see identical data.
    """

    base_model: str
    feature: str
    family: str
    span_lo: int = 1
    span_hi: int = 10
    patience: int = 3
    port: int = 0
    seed: int = 0
    learning_rate: float = 5e-5
    batch_size: int = 16
    max_epochs: int = 10
    max_subword_len: int = 128

    def __post_init__(self):
        if self.feature not in FEATURES:
            raise ValueError(f"unknown feature {self.feature!r}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not (1 <= self.span_lo <= self.span_hi <= MAX_WINDOW):
            raise ValueError(f"span range must lie within [1, {MAX_WINDOW}]")
