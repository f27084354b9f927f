"""Pruning configuration: built-in presets, JSON config files, overrides."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

from .ctp import Criterion

CONFIG_ENV = "DOCPRUNE_CONFIG"

# Presets keyed by retrieved page count: retrieval tau_bg, QA tau_bg, tau_e, tau_qst, tau_comp, tau_att.
PRESETS: dict[int, dict[str, Any]] = {
    1: {"tau_bg_ret": 0.9, "tau_bg": 0.9, "tau_e": 1.0, "tau_qst": 0.3, "tau_comp": 65.0, "tau_att": 0.5},
    2: {"tau_bg_ret": 1.0, "tau_bg": 1.0, "tau_e": 1.0, "tau_qst": 0.3, "tau_comp": 60.0, "tau_att": 0.25},
    4: {"tau_bg_ret": 1.0, "tau_bg": 0.8, "tau_e": 1.0, "tau_qst": 0.4, "tau_comp": 45.0, "tau_att": 0.075},
}


@dataclass(frozen=True)
class PruneConfig:
    patch_size: int = 28
    tau_e: float = 1.0
    tau_bg: float = 0.9
    tau_bg_ret: float = 0.9
    sigma: float = 1.0
    tau_qst: float = 0.3
    criterion: str = Criterion.L2_NORM.value
    tau_comp: float = 65.0
    tau_att: float = 0.5
    block: int = 2
    ctp_window: tuple[int, int] = (15, 27)
    pages: int = 1
    text_tokens: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "ctp_window", tuple(int(v) for v in self.ctp_window))
        object.__setattr__(self, "criterion", Criterion(self.criterion).value)
        self.validate()

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.tau_e < 0:
            raise ValueError("tau_e must be >= 0")
        for key in ("tau_bg", "tau_bg_ret", "tau_qst", "tau_att"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{key} must lie in [0, 1], got {v}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if math.isnan(self.tau_comp):
            raise ValueError("tau_comp must not be NaN")
        if self.block < 1:
            raise ValueError("block must be >= 1")
        lo, hi = self.ctp_window
        if not 0 <= lo <= hi:
            raise ValueError(f"ctp_window must satisfy 0 <= min <= max, got {self.ctp_window}")
        if self.pages < 1:
            raise ValueError("pages must be >= 1")
        if self.text_tokens < 0:
            raise ValueError("text_tokens must be >= 0")

    @classmethod
    def preset(cls, pages: int) -> "PruneConfig":
        if pages not in PRESETS:
            raise ValueError(f"no preset for {pages} pages; choose from {sorted(PRESETS)}")
        return cls(pages=pages, **PRESETS[pages])

    def with_overrides(self, overrides: dict[str, Any]) -> "PruneConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["ctp_window"] = list(self.ctp_window)
        if math.isinf(self.tau_comp):
            d["tau_comp"] = "inf" if self.tau_comp > 0 else "-inf"
        return d


def _coerce(obj: dict[str, Any]) -> dict[str, Any]:
    out = dict(obj)
    if isinstance(out.get("tau_comp"), str):
        out["tau_comp"] = float(out["tau_comp"])
    return out


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict[str, Any]] = None) -> PruneConfig:
    """Resolve the effective config: overrides > file > preset/defaults.

    The file is ``path`` or, when absent, the one named by $DOCPRUNE_CONFIG.
    A ``pages`` key (from either source) selects the preset the rest layer onto.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    file_values: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            file_values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(file_values, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
        file_values = _coerce(file_values)
    pages = overrides.get("pages", file_values.get("pages", 1))
    base = PruneConfig.preset(int(pages)) if int(pages) in PRESETS else PruneConfig(pages=int(pages))
    return base.with_overrides(file_values).with_overrides(overrides)
