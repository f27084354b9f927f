"""Synthetic pages, embeddings and decoder traces with known ground truth."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .ctp import DecoderTrace
from .imagecore import GrayImage, RasterImage, tile_patches
from .qtp import EmbeddingMatrix


@dataclass(frozen=True)
class ContentBox:
    x: int
    y: int
    w: int
    h: int
    intensity: int
    density: float

    @classmethod
    def from_obj(cls, obj) -> "ContentBox":
        if isinstance(obj, dict):
            return cls(int(obj["x"]), int(obj["y"]), int(obj["w"]), int(obj["h"]), int(obj["intensity"]), float(obj["density"]))
        x, y, w, h, intensity, density = obj
        return cls(int(x), int(y), int(w), int(h), int(intensity), float(density))


@dataclass(frozen=True)
class SynthSpec:
    page_width: int
    page_height: int
    patch_size: int
    background_value: int = 255
    content_boxes: tuple[ContentBox, ...] = ()
    seed: int = 0
    channels: int = 3
    min_contrast: int = 1  # strokes must differ from the background by at least this (i.e. tau_e)

    def __post_init__(self) -> None:
        object.__setattr__(self, "content_boxes", tuple(ContentBox.from_obj(b) if not isinstance(b, ContentBox) else b for b in self.content_boxes))
        self.validate()

    def validate(self) -> None:
        if self.page_width < 1 or self.page_height < 1:
            raise ValueError("page dimensions must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 0 <= self.background_value <= 255:
            raise ValueError("background_value must be an 8-bit intensity")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        for i, b in enumerate(self.content_boxes):
            if b.w < 1 or b.h < 1:
                raise ValueError(f"box {i} has zero area")
            if b.x < 0 or b.y < 0 or b.x + b.w > self.page_width or b.y + b.h > self.page_height:
                raise ValueError(f"box {i} exceeds the page bounds")
            if not 0 <= b.intensity <= 255:
                raise ValueError(f"box {i} intensity out of range")
            if abs(b.intensity - self.background_value) < max(1, self.min_contrast):
                raise ValueError(f"box {i} stroke intensity too close to the background")
            if not 0.0 < b.density <= 1.0:
                raise ValueError(f"box {i} density must be in (0, 1]")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthSpec":
        return cls(
            page_width=int(obj["page_width"]),
            page_height=int(obj["page_height"]),
            patch_size=int(obj["patch_size"]),
            background_value=int(obj.get("background_value", 255)),
            content_boxes=tuple(ContentBox.from_obj(b) for b in obj.get("content_boxes", ())),
            seed=int(obj.get("seed", 0)),
            channels=int(obj.get("channels", 3)),
            min_contrast=int(obj.get("min_contrast", 1)),
        )


@dataclass(frozen=True)
class SynthTruth:
    image: RasterImage
    background_patches: np.ndarray  # (rows, cols) bool
    trace: Optional[DecoderTrace] = None

    @property
    def content_patches(self) -> np.ndarray:
        return ~self.background_patches


def gen_document(spec: SynthSpec) -> SynthTruth:
    """Render a page; every patch touching a box gets at least one stroke pixel."""
    rng = np.random.default_rng(spec.seed)
    page = np.full((spec.page_height, spec.page_width), spec.background_value, dtype=np.uint8)
    p = spec.patch_size
    for box in spec.content_boxes:
        strokes = rng.random((box.h, box.w)) < box.density
        # per-patch floor: each patch/box intersection receives a stroke pixel
        for py in range(box.y // p, (box.y + box.h - 1) // p + 1):
            for px in range(box.x // p, (box.x + box.w - 1) // p + 1):
                y0, y1 = max(py * p, box.y) - box.y, min((py + 1) * p, box.y + box.h) - box.y
                x0, x1 = max(px * p, box.x) - box.x, min((px + 1) * p, box.x + box.w) - box.x
                if not strokes[y0:y1, x0:x1].any():
                    strokes[y0 + rng.integers(y1 - y0), x0 + rng.integers(x1 - x0)] = True
        region = page[box.y : box.y + box.h, box.x : box.x + box.w]
        region[strokes] = box.intensity
    grid = tile_patches(GrayImage.from_array(page), p)
    background = (grid.patches == spec.background_value).all(axis=(1, 2)).reshape(grid.rows, grid.cols)
    if spec.channels == 3:
        data = np.repeat(page[:, :, None], 3, axis=2)
    else:
        data = page[:, :, None]
    return SynthTruth(image=RasterImage.from_array(data), background_patches=background)


def box_patch_labels(spec: SynthSpec) -> np.ndarray:
    """Geometric truth: True for patches that intersect no content box."""
    p = spec.patch_size
    rows, cols = -(-spec.page_height // p), -(-spec.page_width // p)
    touched = np.zeros((rows, cols), dtype=bool)
    for b in spec.content_boxes:
        touched[b.y // p : (b.y + b.h - 1) // p + 1, b.x // p : (b.x + b.w - 1) // p + 1] = True
    return ~touched


def random_spec(
    rng: np.random.Generator,
    patch_size: int = 32,
    grid: tuple[int, int] = (10, 10),
    max_boxes: int = 6,
    seed: Optional[int] = None,
) -> SynthSpec:
    """A random valid spec whose background stays the page's mode intensity."""
    rows, cols = grid
    width, height = cols * patch_size, rows * patch_size
    bg = int(rng.integers(0, 256))
    boxes = []
    budget = width * height // 3
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        w = int(rng.integers(1, max(2, width // 3)))
        h = int(rng.integers(1, max(2, height // 3)))
        if w * h > budget:
            continue
        budget -= w * h
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        intensity = int(rng.integers(0, 255))
        if intensity >= bg:
            intensity += 1
        boxes.append(ContentBox(x, y, w, h, intensity, float(rng.uniform(0.05, 1.0))))
    return SynthSpec(
        page_width=width,
        page_height=height,
        patch_size=patch_size,
        background_value=bg,
        content_boxes=tuple(boxes),
        seed=int(rng.integers(0, 2**63)) if seed is None else seed,
    )


def gen_embeddings(
    rows: int,
    cols: int,
    dim: int,
    n_qst: int,
    hot_cells: Sequence[int] = (),
    seed: int = 0,
    noise: float = 0.05,
) -> tuple[EmbeddingMatrix, EmbeddingMatrix]:
    """Question embeddings plus a document grid whose ``hot_cells`` align with the question."""
    rng = np.random.default_rng(seed)
    qst = rng.standard_normal((n_qst, dim))
    doc = rng.standard_normal((rows * cols, dim))
    anchor = qst.sum(axis=0)
    for i in hot_cells:
        doc[i] = anchor + noise * np.linalg.norm(anchor) * rng.standard_normal(dim)
    return EmbeddingMatrix.from_array(doc), EmbeddingMatrix.from_array(qst)


def l2_schedule(num_layers: int, crossing_layer: int, tau_comp: float) -> np.ndarray:
    """Strictly increasing norms, first reaching ``tau_comp`` at ``crossing_layer``."""
    c = crossing_layer
    layers = np.arange(num_layers, dtype=np.float64)
    below = tau_comp * (layers + 1) / (c + 2)
    above = tau_comp + max(1.0, 0.02 * tau_comp) + 0.05 * tau_comp * (layers - c)
    return np.where(layers < c, below, above)


def _exact_mass_attention(rng, n_visual, spikes, mass) -> np.ndarray:
    """float32 attention whose spike share equals ``mass`` to ~1e-12 in float64.

    One non-spike entry is made small and absorbs the float32 rounding, so
    the bound needs at least two non-spike tokens; with exactly one the
    share is only good to float32 precision (~1e-8).
    """
    spikes = np.asarray(sorted(set(int(s) for s in spikes)), dtype=np.int64)
    rest = np.setdiff1d(np.arange(n_visual), spikes)
    a = np.zeros(n_visual, dtype=np.float32)
    if spikes.size == 0:
        a[:] = rng.uniform(1.0, 2.0, n_visual).astype(np.float32)
        return a
    if rest.size == 0 or mass >= 1.0:
        a[spikes] = np.float32(1.0 / spikes.size)
        return a
    a[spikes] = np.float32(mass / spikes.size)
    weights = rng.uniform(1.0, 2.0, rest.size)
    if rest.size > 1:
        weights[0] *= 1e-3  # the absorber: a fine ulp keeps the fix-up precise
    s = float(a[spikes].astype(np.float64).sum())
    target_rest = s * (1.0 - mass) / mass
    a[rest] = (weights / weights.sum() * target_rest).astype(np.float32)
    j = rest[0]
    for _ in range(4):
        gap = target_rest - float(a[rest].astype(np.float64).sum())
        a[j] = np.float32(float(a[j]) + gap)
    return a


def gen_trace(
    num_layers: int,
    dim: int,
    crossing_layer: int,
    n_visual: int,
    spike_indices: Sequence[int] = (),
    seed: int = 0,
    spike_mass: float = 0.9,
    tau_comp: float = 65.0,
    vocab: int = 32,
    visual_start: int = 0,
) -> DecoderTrace:
    """Decoder trace whose L2 series first reaches ``tau_comp`` at ``crossing_layer``.

    ``crossing_layer == num_layers`` builds a trace that never crosses. Every
    layer's attention gives ``spike_mass`` of the total to ``spike_indices``
    (split evenly); logits sharpen with depth so entropy is non-increasing.
    """
    if not 0 <= crossing_layer <= num_layers:
        raise ValueError(f"crossing_layer must be in [0, {num_layers}]")
    if tau_comp <= 0:
        raise ValueError("tau_comp must be positive")
    if not 0.0 < spike_mass <= 1.0:
        raise ValueError("spike_mass must be in (0, 1]")
    if any(not 0 <= s < n_visual for s in spike_indices):
        raise ValueError("spike index outside the visual tokens")
    rng = np.random.default_rng(seed)
    norms = l2_schedule(num_layers, crossing_layer, tau_comp)
    directions = rng.standard_normal((num_layers, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    hidden = (directions * norms[:, None]).astype(np.float32)

    base = rng.standard_normal(vocab)
    sharpness = np.linspace(0.25, 8.0, num_layers)
    logits = (sharpness[:, None] * base[None, :]).astype(np.float32)

    attention = None
    if n_visual > 0:
        attention = np.stack([_exact_mass_attention(rng, n_visual, spike_indices, spike_mass) for _ in range(num_layers)])
    trace = DecoderTrace(
        last_token_hidden=hidden,
        visual_range=(visual_start, visual_start + n_visual),
        attention=attention,
        logits=logits,
    )
    # self-check of the crossing contract on the stored float32 values
    l2 = np.linalg.norm(hidden.astype(np.float64), axis=1)
    hits = np.flatnonzero(l2 >= tau_comp)
    first = int(hits[0]) if hits.size else num_layers
    if first != crossing_layer or np.any(np.diff(l2) <= 0):
        raise AssertionError("generated trace violates its crossing contract")
    return trace
