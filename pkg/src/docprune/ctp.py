"""Comprehension-aware token pruning over exported decoder traces.

A per-layer comprehension signal picks the first layer (inside a search
window) at which the model is deemed to understand the input; visual tokens
whose max-normalized last-token attention at that layer falls below
``tau_att`` are dropped once, there.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GeometryError, MissingDataError
from .masks import Stage, TokenMask


class Criterion(str, enum.Enum):
    L2_NORM = "l2_norm"
    ENTROPY = "entropy"
    FEATURE_DELTA = "feature_delta"


@dataclass(frozen=True)
class DecoderTrace:
    last_token_hidden: np.ndarray  # (L, d)
    visual_range: tuple[int, int]
    attention: Optional[np.ndarray] = None  # (L, N_vis), visual tokens only, head-averaged
    logits: Optional[np.ndarray] = None  # (L, V)

    def __post_init__(self) -> None:
        h = self.last_token_hidden
        if h.ndim != 2 or h.shape[0] < 1:
            raise GeometryError(f"last_token_hidden must be (L, d) with L >= 1, got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValueError("hidden states contain NaN or Inf")
        start, end = self.visual_range
        if not 0 <= start <= end:
            raise GeometryError(f"invalid visual_range {self.visual_range}")
        if self.attention is not None:
            a = self.attention
            if a.shape != (h.shape[0], end - start):
                raise GeometryError(
                    f"attention shape {a.shape} != (num_layers, visual tokens) = {(h.shape[0], end - start)}"
                )
            if end == start:
                raise GeometryError("visual_range must be non-empty when attention is present")
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise ValueError("attention must be finite and non-negative")
        if self.logits is not None:
            lg = self.logits
            if lg.ndim != 2 or lg.shape[0] != h.shape[0] or lg.shape[1] < 1:
                raise GeometryError(f"logits shape {lg.shape} does not match {h.shape[0]} layers")
            if not np.all(np.isfinite(lg)):
                raise ValueError("logits contain NaN or Inf")

    @property
    def num_layers(self) -> int:
        return self.last_token_hidden.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.last_token_hidden.shape[1]

    @property
    def n_visual(self) -> int:
        return self.visual_range[1] - self.visual_range[0]


@dataclass(frozen=True)
class ComprehensionSeries:
    criterion: Criterion
    values: np.ndarray  # (L,)


def comprehension_l2(trace: DecoderTrace) -> ComprehensionSeries:
    values = np.linalg.norm(trace.last_token_hidden.astype(np.float64), axis=1)
    return ComprehensionSeries(Criterion.L2_NORM, values)


def comprehension_entropy(trace: DecoderTrace) -> ComprehensionSeries:
    """Natural-log entropy of softmax(logits) per layer; lower means more confident."""
    if trace.logits is None:
        raise MissingDataError("entropy criterion requires per-layer logits in the trace")
    z = trace.logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    return ComprehensionSeries(Criterion.ENTROPY, np.clip(ent, 0.0, np.log(z.shape[1])))


def comprehension_feature_delta(trace: DecoderTrace) -> ComprehensionSeries:
    h = trace.last_token_hidden.astype(np.float64)
    if h.shape[0] < 2:
        raise GeometryError("feature delta needs at least two layers")
    values = np.zeros(h.shape[0])
    values[1:] = np.linalg.norm(np.diff(h, axis=0), axis=1)
    return ComprehensionSeries(Criterion.FEATURE_DELTA, values)


_SERIES = {
    Criterion.L2_NORM: comprehension_l2,
    Criterion.ENTROPY: comprehension_entropy,
    Criterion.FEATURE_DELTA: comprehension_feature_delta,
}


def comprehension_series(trace: DecoderTrace, criterion: Criterion | str) -> ComprehensionSeries:
    return _SERIES[Criterion(criterion)](trace)


def select_prune_layer(
    series: ComprehensionSeries, tau_comp: float, min_layer: int, max_layer: int
) -> Optional[int]:
    """First layer in [min_layer, max_layer] that reaches ``tau_comp``; None means no pruning.

    Entropy is compared negated (entropy <= tau_comp qualifies).
    """
    n = series.values.size
    if not 0 <= min_layer <= max_layer < n:
        raise ValueError(f"invalid layer window [{min_layer}, {max_layer}] for {n} layers")
    values = series.values
    if series.criterion is Criterion.ENTROPY:
        values, tau_comp = -values, -tau_comp
    hits = np.flatnonzero(values[min_layer : max_layer + 1] >= tau_comp)
    if hits.size == 0:
        return None
    return min_layer + int(hits[0])


def ctp_mask(attention, tau_att: float) -> TokenMask:
    a = np.asarray(attention, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("empty attention vector")
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("attention must be finite and non-negative")
    peak = a.max()
    if peak <= 0:
        raise ValueError("attention vector is all zero")
    return TokenMask.from_array(a / peak >= tau_att, Stage.CTP)


def resolve_window(window: tuple[int, int], num_layers: int) -> tuple[int, int]:
    """Clamp the configured search window to the trace depth."""
    lo, hi = window
    hi = min(hi, num_layers - 1)
    if lo < 0 or lo > hi:
        raise ValueError(f"layer window {tuple(window)} is empty for a {num_layers}-layer trace")
    return lo, hi


@dataclass(frozen=True)
class CTPDecision:
    criterion: Criterion
    l_star: Optional[int]
    mask: TokenMask
    num_layers: int

    @property
    def n_visual(self) -> int:
        return self.mask.size

    @property
    def kept(self) -> int:
        return self.mask.kept_count()


def run_ctp(trace: DecoderTrace, config) -> CTPDecision:
    """Select l* with ``config.criterion`` and threshold attention there.

    ``config`` needs ``criterion``, ``tau_comp``, ``tau_att`` and ``ctp_window``.
    """
    criterion = Criterion(config.criterion)
    series = comprehension_series(trace, criterion)
    lo, hi = resolve_window(tuple(config.ctp_window), trace.num_layers)
    l_star = select_prune_layer(series, config.tau_comp, lo, hi)
    if l_star is None:
        return CTPDecision(criterion, None, TokenMask.full(1, trace.n_visual, Stage.CTP), trace.num_layers)
    if trace.attention is None:
        raise MissingDataError("trace has no attention vectors; cannot prune at the selected layer")
    return CTPDecision(criterion, l_star, ctp_mask(trace.attention[l_star], config.tau_att), trace.num_layers)
