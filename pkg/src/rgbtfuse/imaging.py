"""Image planes, PGM/PPM/TNSR ingestion, channel replication and RGB block masking."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError, DimensionError
from .tensor_io import decode_array, encode_array

# incremented by every block_mask_rgb call; lets tests prove inference never masks
BLOCK_MASK_CALLS = 0

BLOCK_SIDE_FRACTION = 0.18


@dataclass
class ImagePlane:
    """A float image in [0, 1], stored as an (H, W, C) array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise DimensionError(f"image must be (H, W, 1|3), got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise ContractError("image pixels must be finite and inside [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def copy(self) -> ImagePlane:
        return ImagePlane(self.pixels.copy())


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def replicate_channels(th: ImagePlane) -> ImagePlane:
    if th.channels != 1:
        raise ContractError(f"thermal plane must be single-channel, got {th.channels} channels")
    return ImagePlane(np.repeat(th.pixels, 3, axis=2))


def block_mask_pixels(height: int, width: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean (H, W) union of random squares covering exactly round(rho*H*W) pixels.

    Squares of side round(0.18*min(H, W)) are centred uniformly at random and
    clipped to the image. Placement stops once the union reaches the target;
    the surplus is trimmed from the last square's newly covered pixels in
    row-major order.
    """
    if not 0.0 <= rho < 1.0:
        raise ContractError(f"mask ratio must be in [0, 1), got {rho}")
    target = round_half_up(rho * height * width)
    covered = np.zeros((height, width), dtype=bool)
    if target == 0:
        return covered
    side = max(1, round_half_up(BLOCK_SIDE_FRACTION * min(height, width)))
    count = 0
    while count < target:
        cy = int(rng.integers(0, height))
        cx = int(rng.integers(0, width))
        y0, x0 = max(0, cy - side // 2), max(0, cx - side // 2)
        y1, x1 = min(height, y0 + side), min(width, x0 + side)
        fresh = np.zeros_like(covered)
        fresh[y0:y1, x0:x1] = True
        fresh &= ~covered
        covered |= fresh
        count += int(fresh.sum())
    excess = count - target
    if excess:
        ys, xs = np.nonzero(fresh)  # row-major
        covered[ys[-excess:], xs[-excess:]] = False
    return covered


def block_mask_rgb(img: ImagePlane, rho: float, seed) -> ImagePlane:
    """Zero contiguous square regions covering a fraction ``rho`` of the RGB image.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    global BLOCK_MASK_CALLS
    BLOCK_MASK_CALLS += 1
    if img.channels != 3:
        raise ContractError("block masking applies to 3-channel RGB planes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    covered = block_mask_pixels(img.height, img.width, rho, rng)
    out = img.pixels.copy()
    out[covered] = 0.0
    return ImagePlane(out)


# ---------------------------------------------------------------- file formats


def _netpbm_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    # magic, width, height, maxval, then exactly one whitespace byte
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(buf, pos)
        if not m:
            raise ValueError("truncated netpbm header")
        tokens.append(m.group(2))
        pos = m.end()
    return tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3]), pos + 1


def read_netpbm(path) -> ImagePlane:
    buf = Path(path).read_bytes()
    magic, w, h, maxval, start = _netpbm_header(buf)
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: only binary P5/P6 with maxval 255 are supported")
    c = 1 if magic == b"P5" else 3
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * c, offset=start)
    return ImagePlane(raw.reshape(h, w, c).astype(np.float64) / 255.0)


def write_netpbm(path, img: ImagePlane) -> None:
    magic = b"P5" if img.channels == 1 else b"P6"
    raw = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{img.width} {img.height}\n255\n".encode())
        fh.write(raw.tobytes())


def quantize(img: ImagePlane) -> ImagePlane:
    """Round-trip through 8-bit so in-memory planes match what is written to disk."""
    return ImagePlane(np.rint(img.pixels * 255.0) / 255.0)


def read_image(path) -> ImagePlane:
    path = Path(path)
    if path.suffix.lower() in (".tnsr", ".bin"):
        arr, _ = decode_array(path.read_bytes())
        return ImagePlane(arr)
    return read_netpbm(path)


def write_tnsr_image(path, img: ImagePlane) -> None:
    Path(path).write_bytes(encode_array(img.pixels))
