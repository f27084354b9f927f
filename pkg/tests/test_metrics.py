from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docprune.errors import GeometryError
from docprune.metrics import (
    DECODER_7B,
    VISION_ENCODER,
    ModelShape,
    decoder_drop_rate_progressive,
    drop_rate,
    pipeline_flops,
    report_csv,
    report_rows,
    top_k_attention_mass,
    transformer_flops,
)

from oracles import layer_flops_bruteforce

SMALL = ModelShape(d_model=64, d_ff=256, num_layers=4, num_heads=4, name="small")


def test_drop_rate_examples():
    assert drop_rate(100, 100) == 0.0
    assert drop_rate(100, 0) == 1.0
    assert drop_rate(2508, 168) == pytest.approx(0.933014354066985646, abs=1e-15)
    with pytest.raises(ValueError):
        drop_rate(0, 0)
    with pytest.raises(ValueError):
        drop_rate(10, 11)


def test_progressive_examples():
    assert decoder_drop_rate_progressive(1000, 0, 0, 28) == 1.0
    assert decoder_drop_rate_progressive(1000, None, 0, 28) == 0.0
    # 20 layers at 1000 tokens plus 8 layers at 100 tokens
    assert decoder_drop_rate_progressive(1000, 20, 100, 28) == pytest.approx(1 - 20800 / 28000, abs=1e-15)
    assert decoder_drop_rate_progressive(1000, 20, 100, 28) == pytest.approx(0.257142857142857143, abs=1e-15)


@given(st.integers(1, 5000), st.integers(0, 5000), st.integers(1, 40), st.integers(0, 39))
def test_progressive_bounds_and_order(n, kept, layers, l):
    kept = min(kept, n - 1) if n > 1 else 0
    l = min(l, layers - 1)
    r = decoder_drop_rate_progressive(n, l, kept, layers)
    assert 0.0 <= r <= 1.0
    if l + 1 < layers and kept < n:
        assert decoder_drop_rate_progressive(n, l + 1, kept, layers) < r


def test_flops_examples():
    assert transformer_flops(DECODER_7B, [0] * 28) == 0
    d, f = 3584, 18944
    one = replace(DECODER_7B, num_layers=1)
    assert transformer_flops(one, [1]) == 4 * d * d + 4 * d + 4 * d * f
    assert transformer_flops(replace(one, causal=False), [1]) == 4 * d * d + 4 * d + 4 * d * f
    with pytest.raises(GeometryError):
        transformer_flops(DECODER_7B, [1, 2])


def test_flops_calibration_ratio():
    full = transformer_flops(DECODER_7B, [2600] * 28)
    tenth = transformer_flops(DECODER_7B, [260] * 28)
    assert 0.095 <= tenth / full <= 0.125


@settings(max_examples=50)
@given(st.lists(st.integers(0, 3000), min_size=4, max_size=4), st.booleans())
def test_flops_bruteforce_and_additive(counts, causal):
    shape = replace(SMALL, causal=causal)
    total = transformer_flops(shape, counts)
    assert total == sum(layer_flops_bruteforce(64, 256, n, causal) for n in counts)
    i = int(np.argmin(counts))
    bumped = list(counts)
    bumped[i] += 1
    assert transformer_flops(shape, bumped) > total


def test_shape_validation():
    with pytest.raises(ValueError):
        ModelShape(d_model=10, d_ff=4, num_layers=1, num_heads=3)
    with pytest.raises(ValueError):
        ModelShape(d_model=0, d_ff=4, num_layers=1, num_heads=1)


def _recompute(shape_enc, shape_dec, n_enc, n_before, n_after, l_star):
    enc = transformer_flops(shape_enc, [n_enc] * shape_enc.num_layers)
    split = shape_dec.num_layers if l_star is None else l_star
    dec = transformer_flops(shape_dec, [n_before] * split + [n_after] * (shape_dec.num_layers - split))
    return enc, dec


def test_pipeline_degenerate_cases():
    base = pipeline_flops(VISION_ENCODER, DECODER_7B, 2508, [], None)
    enc, dec = _recompute(VISION_ENCODER, DECODER_7B, 2508, 2508, 2508, None)
    assert (base.encoder_flops, base.decoder_flops) == (enc, dec)
    assert (base.encoder_flops, base.decoder_flops) == (base.baseline_encoder_flops, base.baseline_decoder_flops)

    keep_all = pipeline_flops(VISION_ENCODER, DECODER_7B, 2508, [("btp", 2508), ("qtp", 2508), ("ctp", 2508)], 20)
    assert (keep_all.encoder_flops, keep_all.decoder_flops) == (enc, dec)
    assert keep_all.encoder_drop_rate == keep_all.decoder_drop_rate == 0.0

    gone = pipeline_flops(VISION_ENCODER, DECODER_7B, 100, [("btp", 0)], None, encoder_overhead=7, text_tokens=5)
    assert gone.encoder_flops == transformer_flops(VISION_ENCODER, [7] * 32)
    assert gone.decoder_flops == transformer_flops(DECODER_7B, [5] * 28)


def test_pipeline_staged_example():
    r = pipeline_flops(VISION_ENCODER, DECODER_7B, 2508, [("btp", 1340), ("qtp", 460), ("ctp", 168)], 20)
    enc, dec = _recompute(VISION_ENCODER, DECODER_7B, 460, 460, 168, 20)
    assert (r.encoder_flops, r.decoder_flops) == (enc, dec)
    assert r.encoder_drop_rate == drop_rate(2508, 460)
    assert r.decoder_drop_rate == pytest.approx(1 - (20 * 460 + 8 * 168) / (28 * 2508))
    assert r.tokens_per_stage == [("input", 2508), ("btp", 1340), ("qtp", 460), ("ctp", 168)]
    d = r.to_dict()
    assert d["prune_layer"] == 20 and d["throughput"] is None


def test_pipeline_rejects_increasing_counts():
    with pytest.raises(GeometryError):
        pipeline_flops(VISION_ENCODER, DECODER_7B, 100, [("btp", 50), ("qtp", 60)], None)


def test_report_csv_rows():
    r = pipeline_flops(VISION_ENCODER, DECODER_7B, 100, [("btp", 60), ("qtp", 30), ("ctp", 10)], 20)
    rows = report_rows(r, VISION_ENCODER, DECODER_7B)
    assert [row["stage"] for row in rows] == ["input", "btp", "qtp", "ctp"]
    assert rows[-1]["flops"] == r.encoder_flops + r.decoder_flops
    assert rows[0]["flops"] == r.baseline_encoder_flops + r.baseline_decoder_flops
    flops = [row["flops"] for row in rows]
    assert flops == sorted(flops, reverse=True)
    text = report_csv(rows)
    assert text.splitlines()[0] == "stage,kept,drop_rate,flops"
    assert len(text.splitlines()) == 5


def test_top_k_examples():
    assert top_k_attention_mass(np.full(100, 0.01), 0.1) == pytest.approx(0.1)
    spike = np.zeros(50)
    spike[9] = 3.0
    assert top_k_attention_mass(spike, 0.1) == 1.0
    assert top_k_attention_mass([8, 4, 2, 1, 1], 0.4) == 0.75
    # ceil(0.1 * 30) must be 3, not 4
    assert top_k_attention_mass(np.arange(30, dtype=float), 0.1) == pytest.approx((29 + 28 + 27) / sum(range(30)))
    with pytest.raises(ValueError):
        top_k_attention_mass(np.zeros(4), 0.5)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_top_k_monotone(seed, a, b):
    att = np.random.default_rng(seed).exponential(1.0, 57)
    lo, hi = sorted((a, b))
    assert top_k_attention_mass(att, lo) <= top_k_attention_mass(att, hi) + 1e-15
    assert top_k_attention_mass(att, 1.0) == pytest.approx(1.0, abs=1e-15)
