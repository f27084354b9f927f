"""On-disk formats exchanged with external VLM pipelines (schema version 1).

Tensor blob layout, all integers little-endian::

    offset  size      field
    0       4         magic, ASCII: DPEM | DPLT | DPAT | DPLG | DPRM
    4       4         version (u32) = 1
    8       4         ndims (u32)
    12      4*ndims   dims (u32 each)
    ..      8         payload byte count (u64) = prod(dims) * 4
    ..      ...       payload, float32 little-endian, row-major

A one-element blob is therefore 28 bytes. JSON is used for masks,
manifests, decisions and reports.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .ctp import CTPDecision, DecoderTrace
from .errors import BadMagicError, CorruptDataError, GeometryError, UnsupportedFormatError
from .masks import Stage, TokenMask

SCHEMA_VERSION = 1
BLOB_VERSION = 1
MAGICS = {
    "DPEM": "embeddings",
    "DPLT": "layer hidden states",
    "DPAT": "per-layer attention",
    "DPLG": "per-layer logits",
    "DPRM": "relevance map",
}
_MAX_DIMS = 8


@dataclass(frozen=True)
class Blob:
    magic: str
    data: np.ndarray  # float32
    version: int = BLOB_VERSION

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def encode_blob(magic: str, data) -> bytes:
    if magic not in MAGICS:
        raise BadMagicError(f"unknown blob magic {magic!r}")
    arr = np.asarray(data)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    if arr.ndim < 1 or arr.ndim > _MAX_DIMS:
        raise GeometryError(f"blob must have 1..{_MAX_DIMS} dims, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("blob payload contains NaN or Inf")
    if any(d >= 2**32 for d in arr.shape):
        raise GeometryError("dimension exceeds u32 range")
    header = magic.encode("ascii") + struct.pack(f"<II{arr.ndim}I", BLOB_VERSION, arr.ndim, *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return header + struct.pack("<Q", len(payload)) + payload


def decode_blob(raw: bytes, expect_magic: Optional[str] = None) -> Blob:
    if len(raw) < 12:
        raise CorruptDataError(f"blob header truncated ({len(raw)} bytes)")
    magic = raw[:4].decode("ascii", errors="replace")
    if magic not in MAGICS:
        raise BadMagicError(f"bad blob magic {raw[:4]!r}")
    if expect_magic is not None and magic != expect_magic:
        raise BadMagicError(f"expected {expect_magic} blob, found {magic}")
    version, ndims = struct.unpack_from("<II", raw, 4)
    if version != BLOB_VERSION:
        raise UnsupportedFormatError(f"blob version {version} not supported")
    if not 1 <= ndims <= _MAX_DIMS:
        raise CorruptDataError(f"implausible dimension count {ndims}")
    off = 12 + 4 * ndims
    if len(raw) < off + 8:
        raise CorruptDataError("blob header truncated")
    dims = struct.unpack_from(f"<{ndims}I", raw, 12)
    (nbytes,) = struct.unpack_from("<Q", raw, off)
    off += 8
    expected = int(np.prod(dims, dtype=np.uint64)) * 4
    # size checks happen before any array is allocated
    if nbytes != expected:
        raise CorruptDataError(f"payload size {nbytes} does not match dims {list(dims)} ({expected} bytes)")
    if len(raw) - off < expected:
        raise CorruptDataError(f"short read: {len(raw) - off} of {expected} payload bytes")
    if len(raw) - off > expected:
        raise CorruptDataError(f"{len(raw) - off - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=expected // 4, offset=off).astype(np.float32).reshape(dims)
    return Blob(magic=magic, data=data, version=version)


def write_blob(path: str | Path, magic: str, data) -> None:
    atomic_write_bytes(path, encode_blob(magic, data))


def read_blob(path: str | Path, expect_magic: Optional[str] = None) -> Blob:
    return decode_blob(Path(path).read_bytes(), expect_magic)


# -- masks -------------------------------------------------------------------


def mask_to_dict(mask: TokenMask, patch_size: Optional[int] = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "stage": mask.stage.value,
        "rows": mask.rows,
        "cols": mask.cols,
        "patch_size": patch_size,
        "kept": mask.kept_indices(),
    }


def mask_from_dict(obj: dict) -> TokenMask:
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise UnsupportedFormatError(f"mask schema_version {obj.get('schema_version')!r} not supported")
    try:
        rows, cols = int(obj["rows"]), int(obj["cols"])
        stage = Stage(obj["stage"])
        kept = obj["kept"]
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptDataError(f"malformed mask file: {exc}") from None
    if rows < 0 or cols < 0:
        raise GeometryError(f"negative mask dims {rows}x{cols}")
    flat = np.zeros(rows * cols, dtype=bool)
    for idx in kept:
        if not isinstance(idx, int) or isinstance(idx, bool) or not 0 <= idx < rows * cols:
            raise GeometryError(f"kept index {idx!r} out of range for a {rows}x{cols} mask")
        if flat[idx]:
            raise GeometryError(f"duplicate kept index {idx}")
        flat[idx] = True
    return TokenMask(rows=rows, cols=cols, keep=flat.reshape(rows, cols), stage=stage)


def write_mask(path: str | Path, mask: TokenMask, patch_size: Optional[int] = None) -> None:
    atomic_write_text(path, dump_json(mask_to_dict(mask, patch_size)))


def _load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptDataError(f"{path}: invalid JSON ({exc})") from None


def read_mask(path: str | Path) -> TokenMask:
    return mask_from_dict(_load_json(path))


# -- decoder trace manifests -------------------------------------------------


@dataclass(frozen=True)
class TraceManifest:
    model_name: str
    num_layers: int
    hidden_dim: int
    visual_range: tuple[int, int]
    grid: tuple[int, int]
    files: dict
    norm_point: str = "post_norm"
    head_aggregation: str = "mean"
    schema_version: int = SCHEMA_VERSION
    score: Optional[float] = None

    def to_dict(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "model_name": self.model_name,
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "visual_range": list(self.visual_range),
            "grid": {"rows": self.grid[0], "cols": self.grid[1]},
            "files": dict(self.files),
            "norm_point": self.norm_point,
            "head_aggregation": self.head_aggregation,
        }
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TraceManifest":
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise UnsupportedFormatError(f"manifest schema_version {obj.get('schema_version')!r} not supported")
        try:
            m = cls(
                model_name=str(obj.get("model_name", "")),
                num_layers=int(obj["num_layers"]),
                hidden_dim=int(obj["hidden_dim"]),
                visual_range=(int(obj["visual_range"][0]), int(obj["visual_range"][1])),
                grid=(int(obj["grid"]["rows"]), int(obj["grid"]["cols"])),
                files=dict(obj["files"]),
                norm_point=str(obj.get("norm_point", "post_norm")),
                head_aggregation=str(obj.get("head_aggregation", "mean")),
                score=None if obj.get("score") is None else float(obj["score"]),
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise CorruptDataError(f"malformed trace manifest: {exc}") from None
        if "hidden" not in m.files:
            raise CorruptDataError("trace manifest lacks files.hidden")
        if m.norm_point not in ("pre_norm", "post_norm"):
            raise CorruptDataError(f"norm_point must be pre_norm or post_norm, got {m.norm_point!r}")
        if m.head_aggregation != "mean":
            raise CorruptDataError(f"head_aggregation must be 'mean', got {m.head_aggregation!r}")
        return m


def load_manifest(path: str | Path) -> tuple[TraceManifest, DecoderTrace]:
    """Read a manifest and its blobs, checking all geometry eagerly.

    The attention blob is (L, S) over the full key sequence seen by the
    last token; ``visual_range`` selects the visual slice.
    """
    path = Path(path)
    manifest = TraceManifest.from_dict(_load_json(path))
    base = path.parent

    def blob(key: str, magic: str) -> Optional[np.ndarray]:
        name = manifest.files.get(key)
        if name is None:
            return None
        target = base / name
        if not target.is_file():
            raise FileNotFoundError(f"trace file for '{key}' not found: {target}")
        return read_blob(target, magic).data

    L, d = manifest.num_layers, manifest.hidden_dim
    start, end = manifest.visual_range
    if not 0 <= start <= end:
        raise GeometryError(f"invalid visual_range {list(manifest.visual_range)}")
    rows, cols = manifest.grid
    if rows * cols != end - start:
        raise GeometryError(f"grid {rows}x{cols} does not cover visual_range of {end - start} tokens")

    hidden = blob("hidden", "DPLT")
    if hidden.shape != (L, d):
        raise GeometryError(f"hidden blob dims {list(hidden.shape)} != declared [{L}, {d}]")
    attention = blob("attention", "DPAT")
    if attention is not None:
        if attention.ndim != 2 or attention.shape[0] != L:
            raise GeometryError(f"attention blob dims {list(attention.shape)} do not match {L} layers")
        if end > attention.shape[1]:
            raise GeometryError(f"visual_range end {end} exceeds attention sequence length {attention.shape[1]}")
        attention = np.ascontiguousarray(attention[:, start:end])
    logits = blob("logits", "DPLG")
    if logits is not None and (logits.ndim != 2 or logits.shape[0] != L):
        raise GeometryError(f"logits blob dims {list(logits.shape)} do not match {L} layers")
    trace = DecoderTrace(last_token_hidden=hidden, visual_range=(start, end), attention=attention, logits=logits)
    return manifest, trace


def write_trace(
    directory: str | Path,
    trace: DecoderTrace,
    grid: Optional[tuple[int, int]] = None,
    model_name: str = "synthetic",
    stem: str = "trace",
    norm_point: str = "post_norm",
    score: Optional[float] = None,
) -> Path:
    """Write blobs plus a manifest for ``trace``; returns the manifest path.

    The attention blob spans positions [0, end) with zeros before the
    visual range, so ``visual_range`` keeps its original offsets.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    start, end = trace.visual_range
    files = {"hidden": f"{stem}.hidden.dplt"}
    write_blob(directory / files["hidden"], "DPLT", trace.last_token_hidden)
    if trace.attention is not None:
        files["attention"] = f"{stem}.attention.dpat"
        # keep the original offsets by zero-filling the non-visual prefix
        full = np.zeros((trace.num_layers, end), dtype=np.float32)
        full[:, start:end] = trace.attention
        write_blob(directory / files["attention"], "DPAT", full)
    if trace.logits is not None:
        files["logits"] = f"{stem}.logits.dplg"
        write_blob(directory / files["logits"], "DPLG", trace.logits)
    manifest = TraceManifest(
        model_name=model_name,
        num_layers=trace.num_layers,
        hidden_dim=trace.hidden_dim,
        visual_range=(start, end),
        grid=grid if grid is not None else (1, trace.n_visual),
        files=files,
        norm_point=norm_point,
        score=score,
    )
    out = directory / f"{stem}.json"
    atomic_write_text(out, dump_json(manifest.to_dict()))
    return out


# -- decisions and reports ---------------------------------------------------


def decision_to_dict(decision: CTPDecision) -> dict:
    from .metrics import decoder_drop_rate_progressive

    return {
        "schema_version": SCHEMA_VERSION,
        "criterion": decision.criterion.value,
        "l_star": "no_prune" if decision.l_star is None else decision.l_star,
        "n_visual": decision.n_visual,
        "kept": decision.kept,
        "kept_indices": decision.mask.kept_indices(),
        "drop_rate_progressive": decoder_drop_rate_progressive(
            decision.n_visual, decision.l_star, decision.kept, decision.num_layers
        ),
    }


def write_json(path: str | Path, obj: dict) -> None:
    atomic_write_text(path, dump_json(obj))
