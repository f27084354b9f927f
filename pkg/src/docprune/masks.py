"""Keep/drop masks over token grids."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError


class Stage(str, enum.Enum):
    BTP = "BTP"
    QTP = "QTP"
    COMBINED = "COMBINED"
    CTP = "CTP"


@dataclass(frozen=True)
class TokenMask:
    rows: int
    cols: int
    keep: np.ndarray  # (rows, cols) bool
    stage: Stage

    def __post_init__(self) -> None:
        if self.keep.shape != (self.rows, self.cols) or self.keep.dtype != np.bool_:
            raise GeometryError(f"keep must be bool of shape {(self.rows, self.cols)}, got {self.keep.dtype} {self.keep.shape}")
        object.__setattr__(self, "stage", Stage(self.stage))

    @classmethod
    def from_array(cls, keep: np.ndarray, stage: Stage | str) -> "TokenMask":
        keep = np.asarray(keep, dtype=bool)
        if keep.ndim == 1:
            keep = keep[None, :]
        return cls(rows=keep.shape[0], cols=keep.shape[1], keep=np.ascontiguousarray(keep), stage=Stage(stage))

    @classmethod
    def full(cls, rows: int, cols: int, stage: Stage | str, value: bool = True) -> "TokenMask":
        return cls(rows=rows, cols=cols, keep=np.full((rows, cols), value, dtype=bool), stage=Stage(stage))

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def kept_count(self) -> int:
        return int(np.count_nonzero(self.keep))

    def kept_indices(self) -> list[int]:
        """Row-major indices of kept cells, ascending."""
        return [int(i) for i in np.flatnonzero(self.keep.ravel())]

    def drop_rate(self) -> float:
        return (self.size - self.kept_count()) / self.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenMask):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and self.stage == other.stage
            and bool(np.array_equal(self.keep, other.keep))
        )

    __hash__ = None  # type: ignore[assignment]
