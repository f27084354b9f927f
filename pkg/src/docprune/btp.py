"""Background token pruning.

A patch is background when most of its pixels sit within ``tau_e`` of the
page's mode intensity. Patches whose background ratio is at most ``tau_bg``
are kept.
"""
from __future__ import annotations

import numpy as np

from .imagecore import PatchGrid
from .masks import Stage, TokenMask


def background_ratio(patch: np.ndarray, m: int, tau_e: float) -> float:
    """Fraction of pixels with ``|pixel - m| < tau_e`` (signed arithmetic)."""
    if tau_e < 0:
        raise ValueError(f"tau_e must be >= 0, got {tau_e}")
    patch = np.asarray(patch)
    if patch.size == 0:
        raise ValueError("empty patch")
    close = np.abs(patch.astype(np.int32) - int(m)) < tau_e
    return int(np.count_nonzero(close)) / patch.size


def background_ratios(grid: PatchGrid, m: int, tau_e: float) -> np.ndarray:
    """Per-cell background ratios, shape (rows, cols)."""
    if tau_e < 0:
        raise ValueError(f"tau_e must be >= 0, got {tau_e}")
    close = np.abs(grid.patches.astype(np.int32) - int(m)) < tau_e
    counts = np.count_nonzero(close.reshape(len(grid), -1), axis=1)
    ratios = counts / (grid.patch_size * grid.patch_size)
    return ratios.reshape(grid.rows, grid.cols)


def btp_mask(grid: PatchGrid, m: int, tau_e: float, tau_bg: float) -> TokenMask:
    if not 0.0 <= tau_bg <= 1.0:
        raise ValueError(f"tau_bg must lie in [0, 1], got {tau_bg}")
    keep = background_ratios(grid, m, tau_e) <= tau_bg
    return TokenMask(rows=grid.rows, cols=grid.cols, keep=keep, stage=Stage.BTP)


def strict_background_threshold(patch_size: int) -> float:
    """``tau_bg`` that drops only patches whose ratio is exactly 1."""
    n = patch_size * patch_size
    return (n - 1) / n


def block_coarsen(mask: TokenMask, block: int) -> TokenMask:
    """Make every aligned ``block x block`` group kept if any member is kept.

    Ragged edge groups are padded with kept cells, so they end up fully kept.
    """
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    if block == 1:
        return mask
    rows_b = -(-mask.rows // block)
    cols_b = -(-mask.cols // block)
    padded = np.ones((rows_b * block, cols_b * block), dtype=bool)
    padded[: mask.rows, : mask.cols] = mask.keep
    groups = padded.reshape(rows_b, block, cols_b, block).any(axis=(1, 3))
    out = np.repeat(np.repeat(groups, block, axis=0), block, axis=1)[: mask.rows, : mask.cols]
    return TokenMask(rows=mask.rows, cols=mask.cols, keep=np.ascontiguousarray(out), stage=mask.stage)
