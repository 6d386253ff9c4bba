"""Radiograph and mask primitives: raw/PGM I/O, mask algebra, downscaling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ALLOWED_BIT_DEPTHS = (8, 12, 16)


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Unsigned integer radiograph, stored as a (height, width) uint16 array."""

    pixels: np.ndarray
    bit_depth: int = 16

    def __post_init__(self):
        pix = np.asarray(self.pixels)
        if pix.ndim != 2 or pix.shape[0] == 0 or pix.shape[1] == 0:
            raise ValueError(f"image must be a non-empty 2D grid, got shape {pix.shape}")
        if self.bit_depth not in ALLOWED_BIT_DEPTHS:
            raise ValueError(f"bit_depth must be one of {ALLOWED_BIT_DEPTHS}, got {self.bit_depth}")
        if pix.size and (pix.min() < 0 or pix.max() >= 2 ** self.bit_depth):
            raise ValueError(f"pixel values out of range for {self.bit_depth}-bit image")
        pix = pix.astype(np.uint16, copy=True)
        pix.setflags(write=False)
        object.__setattr__(self, "pixels", pix)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def max_value(self) -> int:
        return 2 ** self.bit_depth - 1

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.bit_depth == other.bit_depth and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """{0,1} region mask, stored as a (height, width) uint8 array."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] == 0 or bits.shape[1] == 0:
            raise ValueError(f"mask must be a non-empty 2D grid, got shape {bits.shape}")
        if bits.dtype == bool:
            bits = bits.astype(np.uint8)
        elif not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        bits = bits.astype(np.uint8, copy=True)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class RawLayout:
    width: int = 2048
    height: int = 2048
    byte_order: str = "big_endian"
    bit_depth: int = 12
    bytes_per_sample: int = 2

    def __post_init__(self):
        if self.byte_order not in ("big_endian", "little_endian"):
            raise ValueError(f"unknown byte order {self.byte_order!r}")
        if self.bytes_per_sample != 2:
            raise ValueError("only 2-byte samples are supported")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("layout dimensions must be positive")
        if self.bit_depth not in ALLOWED_BIT_DEPTHS:
            raise ValueError(f"bit_depth must be one of {ALLOWED_BIT_DEPTHS}")

    @property
    def file_size(self) -> int:
        return self.width * self.height * self.bytes_per_sample

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(">u2" if self.byte_order == "big_endian" else "<u2")


def _check_same_shape(a, b, what="dimensions"):
    if a.shape != b.shape:
        raise ValueError(f"{what} mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# raw and PGM I/O
# ---------------------------------------------------------------------------


def load_raw_image(data: bytes, layout: RawLayout) -> ImageGrid:
    """Decode a headerless 16-bit sample stream laid out row-major."""
    if len(data) != layout.file_size:
        raise ValueError(
            f"raw size mismatch: got {len(data)} bytes, layout needs {layout.file_size}"
        )
    samples = np.frombuffer(data, dtype=layout.dtype).reshape(layout.height, layout.width)
    if samples.max() >= 2 ** layout.bit_depth:
        raise ValueError(
            f"sample value {int(samples.max())} exceeds {layout.bit_depth}-bit range"
        )
    return ImageGrid(samples.astype(np.uint16), layout.bit_depth)


def dump_raw_image(image: ImageGrid, layout: RawLayout) -> bytes:
    if (image.height, image.width) != (layout.height, layout.width):
        raise ValueError("image does not match layout dimensions")
    return image.pixels.astype(layout.dtype).tobytes()


def read_raw_file(path, layout: RawLayout) -> ImageGrid:
    return load_raw_image(Path(path).read_bytes(), layout)


def bit_depth_for_maxval(maxval: int) -> int:
    needed = max(1, int(maxval).bit_length())
    for depth in ALLOWED_BIT_DEPTHS:
        if needed <= depth:
            return depth
    raise ValueError(f"maxval {maxval} too large")


def decode_pgm(data: bytes) -> ImageGrid:
    """Parse a binary (P5) PGM; 16-bit samples are big-endian."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(data):
            raise ValueError("truncated PGM header")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"invalid PGM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    body = data[pos : pos + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise ValueError("truncated PGM raster")
    pixels = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return ImageGrid(pixels.astype(np.uint16), bit_depth_for_maxval(maxval))


def encode_pgm(image: ImageGrid) -> bytes:
    maxval = image.max_value
    header = f"P5\n{image.width} {image.height}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + image.pixels.astype(dtype).tobytes()


def read_pgm(path) -> ImageGrid:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path, image: ImageGrid) -> None:
    Path(path).write_bytes(encode_pgm(image))


def mask_to_image(mask: BinaryMask) -> ImageGrid:
    """8-bit 0/255 rendering of a mask, as masks are stored on disk."""
    return ImageGrid(mask.bits.astype(np.uint16) * 255, 8)


# ---------------------------------------------------------------------------
# mask algebra
# ---------------------------------------------------------------------------


def load_mask(image: ImageGrid, threshold: int = 128) -> BinaryMask:
    if threshold >= 2 ** image.bit_depth:
        raise ValueError("threshold exceeds image bit depth")
    return BinaryMask(image.pixels >= threshold)


def apply_mask(image: ImageGrid, mask: BinaryMask) -> ImageGrid:
    _check_same_shape(image, mask)
    return ImageGrid(np.where(mask.bits == 1, image.pixels, 0), image.bit_depth)


def combine_masks(masks: Sequence[BinaryMask], op: str = "union") -> BinaryMask:
    """Pointwise union (OR), intersection (AND) or mean (majority, average >= 0.5)."""
    masks = list(masks)
    if not masks:
        raise ValueError("cannot combine an empty list of masks")
    for m in masks[1:]:
        _check_same_shape(masks[0], m)
    stack = np.stack([m.bits for m in masks])
    if op == "union":
        out = stack.any(axis=0)
    elif op == "intersection":
        out = stack.all(axis=0)
    elif op == "mean":
        # integer form of mean >= 0.5 avoids float rounding at exact halves
        out = 2 * stack.sum(axis=0, dtype=np.int64) >= len(masks)
    else:
        raise ValueError(f"unknown mask operation {op!r}")
    return BinaryMask(out)


def mask_area_fraction(mask: BinaryMask) -> float:
    return float(mask.bits.sum(dtype=np.int64)) / mask.bits.size


def reduction_factor(fraction: float) -> float:
    if not 0 < fraction <= 1:
        raise ValueError(f"area fraction must be in (0, 1], got {fraction}")
    return 1.0 / fraction


def point_in_mask(mask: BinaryMask, x: int, y: int) -> bool:
    if not (0 <= x < mask.width and 0 <= y < mask.height):
        raise IndexError(f"point ({x}, {y}) outside {mask.width}x{mask.height} mask")
    return bool(mask.bits[y, x])


# ---------------------------------------------------------------------------
# downscaling
# ---------------------------------------------------------------------------


def block_mean(array: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = array.shape
    if new_h <= 0 or new_w <= 0 or h % new_h or w % new_w:
        raise ValueError(f"cannot box-downscale {w}x{h} to {new_w}x{new_h}")
    bh, bw = h // new_h, w // new_w
    return array.reshape(new_h, bh, new_w, bw).astype(np.float64).mean(axis=(1, 3))


def resize_image(image: ImageGrid, new_w: int, new_h: int) -> ImageGrid:
    """Integer box downscale; each output pixel is the rounded mean of its block."""
    means = block_mean(image.pixels, new_h, new_w)
    # round half up, matching "rounded arithmetic mean" for non-negative values
    return ImageGrid(np.floor(means + 0.5).astype(np.uint16), image.bit_depth)


__all__ = [
    "ALLOWED_BIT_DEPTHS",
    "BinaryMask",
    "ImageGrid",
    "RawLayout",
    "apply_mask",
    "bit_depth_for_maxval",
    "block_mean",
    "combine_masks",
    "decode_pgm",
    "dump_raw_image",
    "encode_pgm",
    "load_mask",
    "load_raw_image",
    "mask_area_fraction",
    "mask_to_image",
    "point_in_mask",
    "read_pgm",
    "read_raw_file",
    "reduction_factor",
    "resize_image",
    "write_pgm",
]
