"""Question-aware token pruning.

Relevance of each document token is the summed cosine similarity to all
question tokens. The map is resized to the QA grid (align-corners bilinear),
smoothed with a truncated Gaussian, min-max normalized and thresholded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .masks import Stage, TokenMask


@dataclass(frozen=True)
class EmbeddingMatrix:
    values: np.ndarray  # (count, dim) float32

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 2:
            raise GeometryError(f"embedding matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding matrix contains NaN or Inf")

    @classmethod
    def from_array(cls, arr) -> "EmbeddingMatrix":
        return cls(np.ascontiguousarray(np.asarray(arr, dtype=np.float32)))

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class RelevanceMap:
    scores: np.ndarray  # (rows, cols) float64 in memory, float32 on disk

    def __post_init__(self) -> None:
        if self.scores.ndim != 2 or 0 in self.scores.shape:
            raise GeometryError(f"relevance map must be a non-empty 2-D array, got shape {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("relevance map contains NaN or Inf")

    @property
    def rows(self) -> int:
        return self.scores.shape[0]

    @property
    def cols(self) -> int:
        return self.scores.shape[1]

    def flatten(self) -> np.ndarray:
        return self.scores.ravel().copy()


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    # zero-norm rows become zero vectors and contribute nothing to any cosine
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, x / safe, 0.0)


def relevance_scores(doc: EmbeddingMatrix, qst: EmbeddingMatrix) -> np.ndarray:
    if doc.dim != qst.dim:
        raise GeometryError(f"embedding dim mismatch: doc {doc.values.shape} vs question {qst.values.shape}")
    return (_unit_rows(doc.values) @ _unit_rows(qst.values).T).sum(axis=1)


def reshape_to_grid(scores, rows: int, cols: int) -> RelevanceMap:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size != rows * cols:
        raise GeometryError(f"cannot place {scores.size} scores on a {rows}x{cols} grid")
    return RelevanceMap(scores.reshape(rows, cols).copy())


def _align_corner_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(rmap: RelevanceMap, rows: int, cols: int) -> RelevanceMap:
    """Align-corners bilinear resampling (corner cells map onto corner cells).

    A single output row/column samples the first input row/column.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"target grid must be >= 1x1, got {rows}x{cols}")
    if (rows, cols) == rmap.scores.shape:
        return RelevanceMap(rmap.scores.copy())
    s = rmap.scores
    lo, hi, f = _align_corner_weights(s.shape[0], rows)
    s = s[lo, :] * (1.0 - f)[:, None] + s[hi, :] * f[:, None]
    lo, hi, f = _align_corner_weights(s.shape[1], cols)
    s = s[:, lo] * (1.0 - f)[None, :] + s[:, hi] * f[None, :]
    # interpolation cannot leave the input range; clip float round-off
    s = np.clip(s, rmap.scores.min(), rmap.scores.max())
    return RelevanceMap(s)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ceil(3 sigma)."""
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Half-sample symmetric reflection (``d c b a | a b c d | d c b a``), any depth."""
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def _smooth_axis(s: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = kernel.size // 2
    n = s.shape[axis]
    out = np.zeros_like(s)
    base = np.arange(n)
    for t, w in zip(range(-radius, radius + 1), kernel):
        out += w * np.take(s, reflect_index(base + t, n), axis=axis)
    return out


def gaussian_smooth(rmap: RelevanceMap, sigma: float) -> RelevanceMap:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma < 1e-6:
        return rmap
    k = gaussian_kernel(sigma)
    s = _smooth_axis(rmap.scores, k, axis=0)
    s = _smooth_axis(s, k, axis=1)
    return RelevanceMap(s)


def normalize_minmax(rmap: RelevanceMap) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes all ones."""
    s = rmap.scores
    lo, hi = float(s.min()), float(s.max())
    if hi - lo <= 0.0:
        return np.ones_like(s)
    return (s - lo) / (hi - lo)


def qtp_mask(smoothed: RelevanceMap, tau_qst: float) -> TokenMask:
    keep = normalize_minmax(smoothed) >= tau_qst
    return TokenMask(rows=smoothed.rows, cols=smoothed.cols, keep=keep, stage=Stage.QTP)


def combine_masks(a: TokenMask, b: TokenMask) -> TokenMask:
    if (a.rows, a.cols) != (b.rows, b.cols):
        raise GeometryError(f"mask dims differ: {a.rows}x{a.cols} vs {b.rows}x{b.cols}")
    return TokenMask(rows=a.rows, cols=a.cols, keep=a.keep & b.keep, stage=Stage.COMBINED)


def qtp_pipeline(
    doc: EmbeddingMatrix,
    qst: EmbeddingMatrix,
    grid: tuple[int, int],
    target: tuple[int, int],
    sigma: float,
    tau_qst: float,
) -> tuple[RelevanceMap, TokenMask]:
    """relevance -> reshape -> resize -> smooth -> threshold. Returns the smoothed map and mask."""
    rmap = reshape_to_grid(relevance_scores(doc, qst), *grid)
    smoothed = gaussian_smooth(bilinear_resize(rmap, *target), sigma)
    return smoothed, qtp_mask(smoothed, tau_qst)
