import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docprune.btp import btp_mask, strict_background_threshold
from docprune.ctp import comprehension_l2, ctp_mask, select_prune_layer
from docprune.imagecore import mode_intensity, to_grayscale, tile_patches
from docprune.qtp import relevance_scores
from docprune.synthgen import (
    ContentBox,
    SynthSpec,
    box_patch_labels,
    gen_document,
    gen_embeddings,
    gen_trace,
    random_spec,
)


def _recover(truth, spec):
    gray = to_grayscale(truth.image)
    grid = tile_patches(gray, spec.patch_size)
    return btp_mask(grid, spec.background_value, 1, strict_background_threshold(spec.patch_size))


def test_no_boxes_all_background():
    t = gen_document(SynthSpec(96, 64, 32))
    assert t.background_patches.shape == (2, 3) and t.background_patches.all()
    assert np.all(t.image.data == 255)


def test_full_box_no_background():
    t = gen_document(SynthSpec(64, 64, 16, content_boxes=(ContentBox(0, 0, 64, 64, 0, 1.0),)))
    assert not t.background_patches.any()
    assert np.all(t.image.data == 0)


def test_240_of_400_patches():
    # four boxes, each a band of whole patches, covering 12 rows x 20 cols = 240 cells
    boxes = tuple(ContentBox(0, 160 * k, 640, 96, 20 + k, 0.3) for k in range(4))
    spec = SynthSpec(640, 640, 32, content_boxes=boxes, seed=11)
    truth = gen_document(spec)
    assert (~box_patch_labels(spec)).sum() == 240
    assert truth.background_patches.sum() == 160
    assert np.array_equal(truth.background_patches, box_patch_labels(spec))
    mask = btp_mask(tile_patches(to_grayscale(truth.image), 32), 255, 1, 1.0 - 1e-12)
    assert np.array_equal(mask.keep, truth.content_patches)
    assert np.array_equal(_recover(truth, spec).keep, truth.content_patches)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(64, 64, 32, content_boxes=(ContentBox(0, 0, 0, 5, 0, 0.5),))
    with pytest.raises(ValueError):
        SynthSpec(64, 64, 32, content_boxes=(ContentBox(60, 0, 5, 5, 0, 0.5),))
    with pytest.raises(ValueError):
        SynthSpec(64, 64, 32, content_boxes=(ContentBox(0, 0, 5, 5, 255, 0.5),))
    with pytest.raises(ValueError):
        SynthSpec(64, 64, 32, content_boxes=(ContentBox(0, 0, 5, 5, 0, 0.0),))
    spec = SynthSpec.from_dict({"page_width": 8, "page_height": 8, "patch_size": 4, "content_boxes": [[0, 0, 2, 2, 3, 1.0]]})
    assert spec.content_boxes[0] == ContentBox(0, 0, 2, 2, 3, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_spec_roundtrip(seed):
    spec = random_spec(np.random.default_rng(seed), patch_size=8, grid=(6, 7))
    a, b = gen_document(spec), gen_document(spec)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.background_patches, b.background_patches)
    assert mode_intensity(to_grayscale(a.image)) == spec.background_value
    assert np.array_equal(_recover(a, spec).keep, a.content_patches)
    # every patch touching a box holds a stroke pixel, so pixel truth equals box truth
    assert np.array_equal(a.background_patches, box_patch_labels(spec))


def test_trace_examples():
    t = gen_trace(28, 32, 6, 20, [3], seed=0)
    assert select_prune_layer(comprehension_l2(t), 65, 0, 27) == 6
    assert ctp_mask(t.attention[6], 0.5).kept_indices() == [3]
    never = gen_trace(28, 32, 28, 20, [3], seed=0)
    assert select_prune_layer(comprehension_l2(never), 65, 0, 27) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 40), st.integers(1, 60), st.integers(0, 2**32 - 1), st.floats(0.05, 1.0))
def test_trace_contract(layers, crossing, n, seed, mass):
    crossing = min(crossing, layers)
    rng = np.random.default_rng(seed)
    spikes = sorted(set(rng.integers(0, n, int(rng.integers(0, min(n, 5) + 1))).tolist()))
    t = gen_trace(layers, 8, crossing, n, spikes, seed=seed, spike_mass=mass)
    l2 = comprehension_l2(t).values
    assert np.all(np.diff(l2) > 0)
    want = None if crossing == layers else crossing
    assert select_prune_layer(comprehension_l2(t), 65, 0, layers - 1) == want
    if spikes and len(spikes) + 2 <= n:
        att = t.attention.astype(np.float64)
        share = att[:, spikes].sum(axis=1) / att.sum(axis=1)
        assert np.max(np.abs(share - mass)) <= 1e-11
    again = gen_trace(layers, 8, crossing, n, spikes, seed=seed, spike_mass=mass)
    assert np.array_equal(t.last_token_hidden, again.last_token_hidden)
    assert np.array_equal(t.attention, again.attention)


def test_trace_entropy_non_increasing():
    from docprune.ctp import comprehension_entropy

    ent = comprehension_entropy(gen_trace(20, 8, 5, 4, seed=9)).values
    assert np.all(np.diff(ent) <= 1e-9)


def test_gen_embeddings_hot_cells():
    doc, qst = gen_embeddings(4, 5, 32, 3, hot_cells=[2, 17], seed=1)
    s = relevance_scores(doc, qst)
    top = set(np.argsort(s)[-2:].tolist())
    assert top == {2, 17}
    doc2, _ = gen_embeddings(4, 5, 32, 3, hot_cells=[2, 17], seed=1)
    assert np.array_equal(doc.values, doc2.values)
