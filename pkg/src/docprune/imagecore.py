"""Page image loading, grayscale conversion, patch tiling and background mode."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorruptDataError, UnsupportedFormatError

# ITU-R BT.601 luma weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class RasterImage:
    """8-bit raster, ``data`` has shape (height, width, channels)."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be >= 1, got {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.data.shape != (self.height, self.width, self.channels) or self.data.dtype != np.uint8:
            raise ValueError(
                f"data must be uint8 of shape {(self.height, self.width, self.channels)}, "
                f"got {self.data.dtype} {self.data.shape}"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RasterImage":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, data=np.ascontiguousarray(arr, dtype=np.uint8))


@dataclass(frozen=True)
class GrayImage:
    width: int
    height: int
    data: np.ndarray  # (height, width) uint8

    def __post_init__(self) -> None:
        if self.data.shape != (self.height, self.width) or self.data.dtype != np.uint8:
            raise ValueError(
                f"data must be uint8 of shape {(self.height, self.width)}, got {self.data.dtype} {self.data.shape}"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GrayImage":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        return cls(width=arr.shape[1], height=arr.shape[0], data=arr)


@dataclass(frozen=True)
class PatchGrid:
    """Row-major P x P tiles of a (possibly padded) grayscale page."""

    patch_size: int
    rows: int
    cols: int
    patches: np.ndarray  # (rows * cols, P, P) uint8
    source_width: int
    source_height: int

    def __post_init__(self) -> None:
        p = self.patch_size
        if self.patches.shape != (self.rows * self.cols, p, p):
            raise ValueError(f"patches shape {self.patches.shape} does not match {self.rows}x{self.cols} grid of {p}px")

    def __len__(self) -> int:
        return self.rows * self.cols

    def untile(self) -> np.ndarray:
        """Reassemble the padded page, shape (rows * P, cols * P)."""
        p = self.patch_size
        return self.patches.reshape(self.rows, self.cols, p, p).transpose(0, 2, 1, 3).reshape(self.rows * p, self.cols * p)


def _read_ppm(raw: bytes) -> RasterImage:
    # Binary P6 only: magic, width, height, maxval (whitespace/comment separated), one whitespace byte, pixels.
    tokens: list[bytes] = []
    pos = 0
    n = len(raw)
    while len(tokens) < 4:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptDataError("truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise UnsupportedFormatError(f"unsupported PNM variant {tokens[0]!r}; only binary P6 is read")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptDataError(f"malformed PPM header: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise CorruptDataError(f"invalid PPM geometry {width}x{height} maxval={maxval}")
    if maxval > 255:
        raise UnsupportedFormatError("16-bit PPM is not supported")
    if pos >= n or not raw[pos : pos + 1].isspace():
        raise CorruptDataError("truncated PPM header")
    pos += 1
    expected = width * height * 3
    body = raw[pos : pos + expected]
    if len(body) < expected:
        raise CorruptDataError(f"PPM payload truncated: {len(body)} of {expected} bytes")
    data = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    if maxval != 255:
        data = np.floor(data.astype(np.float64) * 255.0 / maxval + 0.5).astype(np.uint8)
    return RasterImage(width=width, height=height, channels=3, data=data.copy())


def _read_png(raw: bytes) -> RasterImage:
    try:
        with Image.open(io.BytesIO(raw)) as im:
            if im.mode in ("I;16", "I;16B", "I;16L", "I", "F") or im.info.get("bitdepth", 8) == 16:
                raise UnsupportedFormatError(f"16-bit PNG (mode {im.mode}) is not supported")
            im.load()
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.uint8)[:, :, None]
            elif im.mode == "1":
                arr = np.asarray(im.convert("L"), dtype=np.uint8)[:, :, None]
            elif im.mode in ("LA",):
                arr = np.asarray(im, dtype=np.uint8)[:, :, :1]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnsupportedFormatError:
        raise
    except (OSError, SyntaxError, ValueError, UnidentifiedImageError) as exc:
        raise CorruptDataError(f"cannot decode PNG: {exc}") from None
    return RasterImage.from_array(arr)


def _png_is_16bit(raw: bytes) -> bool:
    # IHDR is always the first chunk: length(4) type(4) width(4) height(4) bit_depth(1)
    return len(raw) >= 25 and raw[12:16] == b"IHDR" and raw[24] == 16


def load_image(path: str | Path) -> RasterImage:
    """Decode a PNG or binary PPM (P6) page image.

    Raises FileNotFoundError, UnsupportedFormatError or CorruptDataError.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(_PNG_SIGNATURE):
        if _png_is_16bit(raw):
            raise UnsupportedFormatError("16-bit PNG is not supported")
        return _read_png(raw)
    if raw[:1] == b"P" and raw[1:2] in b"1234567":
        return _read_ppm(raw)
    raise UnsupportedFormatError(f"{path.name}: not a PNG or PPM file")


def to_grayscale(img: RasterImage) -> GrayImage:
    if img.channels == 1:
        return GrayImage(width=img.width, height=img.height, data=img.data[:, :, 0].copy())
    rgb = img.data.astype(np.float64)
    r, g, b = LUMA_WEIGHTS
    luma = r * rgb[:, :, 0] + g * rgb[:, :, 1] + b * rgb[:, :, 2]
    # round half-up; the small epsilon absorbs binary representation error of the weights
    gray = np.floor(luma + 0.5 + 1e-9)
    return GrayImage.from_array(np.clip(gray, 0, 255).astype(np.uint8))


def tile_patches(img: GrayImage, patch_size: int) -> PatchGrid:
    """Split into non-overlapping patches, padding bottom/right by edge replication."""
    p = int(patch_size)
    if p < 1:
        raise ValueError(f"patch size must be >= 1, got {p}")
    if p > img.width and p > img.height:
        raise ValueError(f"patch size {p} exceeds both image dimensions {img.width}x{img.height}")
    rows = math.ceil(img.height / p)
    cols = math.ceil(img.width / p)
    data = img.data
    pad_h, pad_w = rows * p - img.height, cols * p - img.width
    if pad_h or pad_w:
        data = np.pad(data, ((0, pad_h), (0, pad_w)), mode="edge")
    patches = data.reshape(rows, p, cols, p).transpose(0, 2, 1, 3).reshape(rows * cols, p, p)
    return PatchGrid(
        patch_size=p,
        rows=rows,
        cols=cols,
        patches=np.ascontiguousarray(patches),
        source_width=img.width,
        source_height=img.height,
    )


def mode_intensity(img: GrayImage) -> int:
    """Most frequent intensity of the whole page; ties go to the lowest value."""
    if img.data.size == 0:
        raise ValueError("empty image")
    hist = np.bincount(img.data.ravel(), minlength=256)
    return int(np.argmax(hist))


def encode_image(img: RasterImage, fmt: str = "png") -> bytes:
    """Serialize as binary PPM (P6, always RGB) or PNG."""
    if fmt == "ppm":
        rgb = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
        return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()
    if fmt == "png":
        buf = io.BytesIO()
        arr = img.data[:, :, 0] if img.channels == 1 else img.data
        Image.fromarray(np.ascontiguousarray(arr)).save(buf, format="PNG")
        return buf.getvalue()
    raise UnsupportedFormatError(f"cannot write image format {fmt!r}")
