"""Per-layer statistics over a directory of decoder traces."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ctp import comprehension_entropy, comprehension_feature_delta, comprehension_l2
from .metrics import top_k_attention_mass
from .traceio import load_manifest


def mass_column(k: float) -> str:
    return f"top_mass_{k:g}"


def find_manifests(directory: str | Path) -> list[Path]:
    """JSON files in ``directory`` that look like trace manifests, sorted by name."""
    found = []
    for path in sorted(Path(directory).glob("*.json")):
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(obj, dict) and "num_layers" in obj and "files" in obj:
            found.append(path)
    return found


def layer_rows(manifest_paths: Iterable[Path], top_fracs: Sequence[float] = (0.1,)) -> list[dict]:
    rows = []
    for path in manifest_paths:
        manifest, trace = load_manifest(path)
        l2 = comprehension_l2(trace).values
        delta = comprehension_feature_delta(trace).values if trace.num_layers >= 2 else np.zeros(trace.num_layers)
        ent = comprehension_entropy(trace).values if trace.logits is not None else None
        for layer in range(trace.num_layers):
            row = {
                "trace": path.stem,
                "layer": layer,
                "l2_norm": float(l2[layer]),
                "entropy": "" if ent is None else float(ent[layer]),
                "feature_delta": float(delta[layer]),
                "n_visual": trace.n_visual,
                "score": "" if manifest.score is None else manifest.score,
            }
            for k in top_fracs:
                a = None if trace.attention is None else trace.attention[layer]
                row[mass_column(k)] = "" if a is None or a.sum() <= 0 else top_k_attention_mass(a, k)
            rows.append(row)
    return rows


def layer_columns(top_fracs: Sequence[float]) -> list[str]:
    return ["trace", "layer", "l2_norm", "entropy", "feature_delta", "n_visual", "score"] + [mass_column(k) for k in top_fracs]


def score_bins(rows: Sequence[dict], n_bins: int) -> list[dict]:
    """Bin L2 norms per layer into ``n_bins`` equal-width bins and average the trace score."""
    scored = [r for r in rows if r["score"] != ""]
    if not scored:
        return []
    norms = np.array([r["l2_norm"] for r in scored])
    edges = np.linspace(norms.min(), norms.max(), n_bins + 1)
    out = []
    for layer in sorted({r["layer"] for r in scored}):
        sel = [r for r in scored if r["layer"] == layer]
        idx = np.clip(np.searchsorted(edges, [r["l2_norm"] for r in sel], side="right") - 1, 0, n_bins - 1)
        for b in range(n_bins):
            members = [r["score"] for r, i in zip(sel, idx) if i == b]
            if members:
                out.append(
                    {
                        "layer": layer,
                        "bin_lo": float(edges[b]),
                        "bin_hi": float(edges[b + 1]),
                        "count": len(members),
                        "mean_score": float(np.mean(members)),
                    }
                )
    return out


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        # repr keeps floats round-trippable
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()
