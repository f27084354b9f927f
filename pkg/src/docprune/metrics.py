"""Drop rates, FLOPs estimates and attention-mass statistics.

FLOPs model, per layer with sequence length N, width d and FFN width d_ff::

    projections   4 * N * d**2
    attention     4 * N**2 * d        (bidirectional, e.g. a vision encoder)
                  2 * N * (N + 1) * d (causal decoder: query i sees keys 0..i)
    feed-forward  4 * N * d * d_ff

Embeddings, norms and the logit head are not counted. The two attention
variants agree at N = 1.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class ModelShape:
    d_model: int
    d_ff: int
    num_layers: int
    num_heads: int
    vocab: Optional[int] = None
    name: str = ""
    causal: bool = True

    def __post_init__(self) -> None:
        for key in ("d_model", "d_ff", "num_layers", "num_heads"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.vocab is not None and self.vocab < 1:
            raise ValueError("vocab must be positive")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")


# 7B-class decoder (Qwen2-7B geometry) and its ViT encoder.
DECODER_7B = ModelShape(d_model=3584, d_ff=18944, num_layers=28, num_heads=28, vocab=152064, name="7b-decoder", causal=True)
VISION_ENCODER = ModelShape(d_model=1280, d_ff=5120, num_layers=32, num_heads=16, name="vit-encoder", causal=False)


def drop_rate(initial: int, kept: int) -> float:
    if initial <= 0:
        raise ValueError("initial token count must be positive")
    if not 0 <= kept <= initial:
        raise ValueError(f"kept={kept} outside [0, {initial}]")
    return (initial - kept) / initial


def decoder_drop_rate_progressive(n_visual: int, l_star: Optional[int], kept_after: int, num_layers: int) -> float:
    """Layer-weighted drop rate when ``kept_after`` tokens survive from layer ``l_star`` on."""
    if l_star is None or n_visual == 0:
        return 0.0
    if not 0 <= kept_after <= n_visual:
        raise ValueError(f"kept_after={kept_after} outside [0, {n_visual}]")
    if not 0 <= l_star < num_layers:
        raise ValueError(f"l_star={l_star} outside [0, {num_layers})")
    kept_token_layers = l_star * n_visual + (num_layers - l_star) * kept_after
    return 1.0 - kept_token_layers / (num_layers * n_visual)


def layer_flops(shape: ModelShape, n: int) -> int:
    d = shape.d_model
    attn = 2 * n * (n + 1) * d if shape.causal else 4 * n * n * d
    return 4 * n * d * d + attn + 4 * n * d * shape.d_ff


def transformer_flops(shape: ModelShape, token_counts: Sequence[int]) -> int:
    if len(token_counts) != shape.num_layers:
        raise GeometryError(f"{len(token_counts)} token counts for a {shape.num_layers}-layer model")
    total = 0
    for n in token_counts:
        if n < 0:
            raise ValueError("token counts must be non-negative")
        total += layer_flops(shape, int(n))
    return total


@dataclass
class FlopsReport:
    encoder_flops: int
    decoder_flops: int
    baseline_encoder_flops: int
    baseline_decoder_flops: int
    encoder_drop_rate: float
    decoder_drop_rate: float
    tokens_per_stage: list[tuple[str, int]]
    prune_layer: Optional[int]
    throughput: Optional[float] = None  # externally measured, never modeled
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokens_per_stage"] = [[s, n] for s, n in self.tokens_per_stage]
        d["prune_layer"] = "no_prune" if self.prune_layer is None else self.prune_layer
        extra = d.pop("extra")
        d.update(extra)
        return d


def _stage_flops(shape_enc, shape_dec, n_enc, n_dec_before, n_dec_after, l_star, text_tokens, enc_overhead):
    enc = transformer_flops(shape_enc, [n_enc + enc_overhead] * shape_enc.num_layers)
    split = shape_dec.num_layers if l_star is None else l_star
    counts = [n_dec_before + text_tokens] * split + [n_dec_after + text_tokens] * (shape_dec.num_layers - split)
    return enc, transformer_flops(shape_dec, counts)


def pipeline_flops(
    shape_enc: ModelShape,
    shape_dec: ModelShape,
    n0: int,
    staged: Sequence[tuple[str, int]],
    l_star: Optional[int],
    text_tokens: int = 0,
    encoder_overhead: int = 0,
) -> FlopsReport:
    """Account a BTP/QTP/CTP run.

    ``staged`` lists (stage, kept) in pipeline order after the raw input; the
    encoder runs at the last pre-CTP count, the decoder at that count for
    layers [0, l_star) and at the "ctp" count from l_star on.
    """
    counts = [n0] + [k for _, k in staged]
    if n0 <= 0:
        raise ValueError("n0 must be positive")
    if any(b > a or b < 0 for a, b in zip(counts, counts[1:])):
        raise GeometryError(f"staged token counts must be non-increasing: {counts}")
    enc_stages = [(s, k) for s, k in staged if s != "ctp"]
    n_enc = enc_stages[-1][1] if enc_stages else n0
    ctp = [k for s, k in staged if s == "ctp"]
    n_after = ctp[0] if (ctp and l_star is not None) else n_enc
    if l_star is not None and not 0 <= l_star < shape_dec.num_layers:
        raise ValueError(f"l_star={l_star} outside decoder depth {shape_dec.num_layers}")

    enc, dec = _stage_flops(shape_enc, shape_dec, n_enc, n_enc, n_after, l_star, text_tokens, encoder_overhead)
    base_enc, base_dec = _stage_flops(shape_enc, shape_dec, n0, n0, n0, None, text_tokens, encoder_overhead)
    split = shape_dec.num_layers if l_star is None else l_star
    token_layers = split * n_enc + (shape_dec.num_layers - split) * n_after
    return FlopsReport(
        encoder_flops=enc,
        decoder_flops=dec,
        baseline_encoder_flops=base_enc,
        baseline_decoder_flops=base_dec,
        encoder_drop_rate=drop_rate(n0, n_enc),
        decoder_drop_rate=1.0 - token_layers / (shape_dec.num_layers * n0),
        tokens_per_stage=[("input", n0)] + [(s, int(k)) for s, k in staged],
        prune_layer=l_star,
    )


def report_rows(report: FlopsReport, shape_enc: ModelShape, shape_dec: ModelShape, text_tokens: int = 0, encoder_overhead: int = 0):
    """(stage, kept, drop_rate, flops) rows: cost if the pipeline stopped after each stage."""
    n0 = report.tokens_per_stage[0][1]
    rows = []
    n_enc = n0
    for stage, kept in report.tokens_per_stage:
        if stage == "ctp":
            l_star = report.prune_layer
            enc, dec = _stage_flops(shape_enc, shape_dec, n_enc, n_enc, kept, l_star, text_tokens, encoder_overhead)
        else:
            n_enc = kept
            enc, dec = _stage_flops(shape_enc, shape_dec, kept, kept, kept, None, text_tokens, encoder_overhead)
        rows.append({"stage": stage, "kept": kept, "drop_rate": drop_rate(n0, kept), "flops": enc + dec})
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["stage", "kept", "drop_rate", "flops"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def top_k_count(n: int, k: float) -> int:
    # guard against 0.1 * 30 = 3.0000000000000004 style round-up
    return max(1, min(n, math.ceil(k * n - 1e-9)))


def top_k_attention_mass(attention, k: float) -> float:
    """Share of total attention held by the ceil(k*N) largest entries."""
    if not 0.0 < k <= 1.0:
        raise ValueError(f"k must be in (0, 1], got {k}")
    a = np.asarray(attention, dtype=np.float64).ravel()
    if a.size == 0 or np.any(a < 0):
        raise ValueError("attention must be non-empty and non-negative")
    total = a.sum()
    if total <= 0:
        raise ValueError("attention sums to zero")
    top = np.sort(a)[::-1][: top_k_count(a.size, k)]
    return float(top.sum() / total)
