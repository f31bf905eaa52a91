"""Dense token grids, foreground masks and masked gather/scatter.

Every module uses the same flat token order: frame-major, then row-major,
``t = (f * H + y) * W + x``.  Grids are immutable once constructed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyForegroundError, PartitionError, ShapeError

_GRID_HEADER = struct.Struct("<4I")
_MASK_HEADER = struct.Struct("<3I")

Dims = tuple[int, int, int]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """An F x H x W x C block of real-valued tokens."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or min(data.shape) < 1:
            raise ShapeError(f"token grid needs shape (F, H, W, C) with all dims >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("token grid contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, dims: Sequence[int]) -> "TokenGrid":
        f, h, w = (int(d) for d in dims)
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] != f * h * w:
            raise ShapeError(f"expected ({f * h * w}, C) tokens, got {tokens.shape}")
        return cls(tokens.reshape(f, h, w, tokens.shape[1]))

    @classmethod
    def from_flat(cls, values: Sequence[float], frames: int, height: int, width: int, channels: int) -> "TokenGrid":
        values = np.asarray(values, dtype=np.float64)
        if values.size != frames * height * width * channels:
            raise ShapeError(f"expected {frames * height * width * channels} values, got {values.size}")
        return cls(values.reshape(frames, height, width, channels))

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def dims(self) -> Dims:
        return self.data.shape[:3]

    @property
    def n_tokens(self) -> int:
        return self.frames * self.height * self.width

    def tokens(self) -> np.ndarray:
        """Read-only (N, C) view in canonical flat order."""
        return self.data.reshape(self.n_tokens, self.channels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class ForegroundMask:
    """One boolean per (frame, y, x); True marks foreground."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 3 or min(bits.shape) < 1:
            raise ShapeError(f"mask needs shape (F, H, W) with all dims >= 1, got {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits))

    @classmethod
    def full(cls, dims: Sequence[int], value: bool = True) -> "ForegroundMask":
        return cls(np.full(tuple(dims), value, dtype=bool))

    @property
    def dims(self) -> Dims:
        return self.bits.shape

    @property
    def n_tokens(self) -> int:
        return int(self.bits.size)

    def flat(self) -> np.ndarray:
        return self.bits.reshape(-1)

    def count(self) -> int:
        return int(self.bits.sum())

    def __invert__(self) -> "ForegroundMask":
        return ForegroundMask(~self.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ForegroundMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None  # type: ignore[assignment]

    def downsample(self, k: int) -> "ForegroundMask":
        """Max-pool each k x k block; partial edge blocks are kept."""
        if k < 1:
            raise ValueError("downsample factor must be >= 1")
        f, h, w = self.dims
        hh, ww = -(-h // k), -(-w // k)
        padded = np.zeros((f, hh * k, ww * k), dtype=bool)
        padded[:, :h, :w] = self.bits
        return ForegroundMask(padded.reshape(f, hh, k, ww, k).any(axis=(2, 4)))

    def upsample(self, k: int, dims: Sequence[int] | None = None) -> "ForegroundMask":
        """Repeat every bit as a k x k block, cropped to ``dims`` if given."""
        up = np.repeat(np.repeat(self.bits, k, axis=1), k, axis=2)
        if dims is not None:
            f, h, w = dims
            up = up[:f, :h, :w]
        return ForegroundMask(up)


@dataclass(frozen=True)
class BoundingBox:
    """Half-open (y0, y1, x0, x1) token boxes, one per frame.

    A frame without foreground has ``None``.
    """

    frames: tuple[tuple[int, int, int, int] | None, ...]
    height: int
    width: int

    def __post_init__(self) -> None:
        for box in self.frames:
            if box is None:
                continue
            y0, y1, x0, x1 = box
            if not (0 <= y0 < y1 <= self.height and 0 <= x0 < x1 <= self.width):
                raise ValueError(f"invalid box {box} for {self.height}x{self.width} frame")

    def union(self) -> tuple[int, int, int, int]:
        boxes = [b for b in self.frames if b is not None]
        if not boxes:
            raise EmptyForegroundError("no frame has a foreground box")
        return (
            min(b[0] for b in boxes),
            max(b[1] for b in boxes),
            min(b[2] for b in boxes),
            max(b[3] for b in boxes),
        )

    def to_mask(self) -> ForegroundMask:
        bits = np.zeros((len(self.frames), self.height, self.width), dtype=bool)
        for f, box in enumerate(self.frames):
            if box is not None:
                y0, y1, x0, x1 = box
                bits[f, y0:y1, x0:x1] = True
        return ForegroundMask(bits)

    def token_count(self) -> int:
        return sum((b[1] - b[0]) * (b[3] - b[2]) for b in self.frames if b is not None)


def _check_dims(grid: TokenGrid, mask: ForegroundMask) -> None:
    if grid.dims != mask.dims:
        raise ShapeError(f"mask dims {mask.dims} do not match grid dims {grid.dims}")


def gather(grid: TokenGrid, mask: ForegroundMask) -> tuple[np.ndarray, np.ndarray]:
    """Tokens under ``mask`` in ascending flat order, plus their flat indices."""
    _check_dims(grid, mask)
    index_map = np.flatnonzero(mask.flat())
    return grid.tokens()[index_map], index_map


def scatter(
    fg: np.ndarray,
    fg_index: np.ndarray,
    bg: np.ndarray,
    bg_index: np.ndarray,
    dims: Sequence[int],
) -> TokenGrid:
    """Inverse of a pair of complementary gathers.

    The two index maps must partition ``range(F*H*W)``; their order is free.
    """
    f, h, w = (int(d) for d in dims)
    n = f * h * w
    fg_index = np.asarray(fg_index, dtype=np.int64).reshape(-1)
    bg_index = np.asarray(bg_index, dtype=np.int64).reshape(-1)
    fg = np.asarray(fg, dtype=np.float64)
    bg = np.asarray(bg, dtype=np.float64)
    if fg.shape[0] != fg_index.size or bg.shape[0] != bg_index.size:
        raise ShapeError("token lists and index maps differ in length")
    if fg_index.size + bg_index.size != n:
        raise PartitionError(f"index maps cover {fg_index.size + bg_index.size} tokens, expected {n}")
    both = np.concatenate([fg_index, bg_index])
    if both.size and (both.min() < 0 or both.max() >= n):
        raise PartitionError("index out of range")
    if np.bincount(both, minlength=n).max(initial=0) > 1:
        raise PartitionError("index maps overlap")
    shaped = [a for a in (fg, bg) if a.ndim == 2]
    if not shaped:
        raise ShapeError("token lists must be 2-D (n, C)")
    channels = shaped[0].shape[1]
    out = np.empty((n, channels), dtype=np.float64)
    if fg_index.size:
        out[fg_index] = fg
    if bg_index.size:
        out[bg_index] = bg
    return TokenGrid(out.reshape(f, h, w, channels))


def mask_to_padded_box(mask: ForegroundMask, pad: int = 0, per_frame: bool = False) -> BoundingBox:
    """Tightest box around the foreground, grown by ``pad`` and clamped.

    By default every frame gets the union box across frames, so the crop is
    one dense F x h x w block.  ``per_frame=True`` keeps separate boxes.
    Raises EmptyForegroundError when the mask has no true bit.
    """
    if pad < 0:
        raise ValueError("pad must be >= 0")
    f, h, w = mask.dims
    boxes: list[tuple[int, int, int, int] | None] = []
    for frame in mask.bits:
        ys, xs = np.nonzero(frame)
        if ys.size == 0:
            boxes.append(None)
            continue
        boxes.append((
            max(int(ys.min()) - pad, 0),
            min(int(ys.max()) + 1 + pad, h),
            max(int(xs.min()) - pad, 0),
            min(int(xs.max()) + 1 + pad, w),
        ))
    if all(b is None for b in boxes):
        raise EmptyForegroundError("mask has no foreground tokens")
    box = BoundingBox(tuple(boxes), h, w)
    if per_frame:
        return box
    u = box.union()
    return BoundingBox((u,) * f, h, w)


# -- binary I/O -------------------------------------------------------------

def grid_to_bytes(grid: TokenGrid) -> bytes:
    """Little-endian uint32 header (F, H, W, C) followed by float32 values."""
    header = _GRID_HEADER.pack(*grid.data.shape)
    return header + grid.data.astype("<f4").tobytes()


def grid_from_bytes(buf: bytes) -> TokenGrid:
    if len(buf) < _GRID_HEADER.size:
        raise ShapeError("buffer shorter than grid header")
    f, h, w, c = _GRID_HEADER.unpack_from(buf)
    values = np.frombuffer(buf, dtype="<f4", offset=_GRID_HEADER.size)
    if values.size != f * h * w * c:
        raise ShapeError(f"header says {f * h * w * c} values, buffer has {values.size}")
    return TokenGrid(values.astype(np.float64).reshape(f, h, w, c))


def mask_to_bytes(mask: ForegroundMask) -> bytes:
    """Little-endian uint32 header (F, H, W) followed by LSB-first packed bits."""
    return _MASK_HEADER.pack(*mask.dims) + np.packbits(mask.flat(), bitorder="little").tobytes()


def mask_from_bytes(buf: bytes) -> ForegroundMask:
    if len(buf) < _MASK_HEADER.size:
        raise ShapeError("buffer shorter than mask header")
    f, h, w = _MASK_HEADER.unpack_from(buf)
    packed = np.frombuffer(buf, dtype=np.uint8, offset=_MASK_HEADER.size)
    n = f * h * w
    if packed.size != -(-n // 8):
        raise ShapeError(f"header says {n} bits, buffer has {packed.size} bytes")
    bits = np.unpackbits(packed, bitorder="little", count=n).astype(bool)
    return ForegroundMask(bits.reshape(f, h, w))


def write_grid(grid: TokenGrid, path: str | Path) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path: str | Path) -> TokenGrid:
    return grid_from_bytes(Path(path).read_bytes())


def write_mask(mask: ForegroundMask, path: str | Path) -> None:
    Path(path).write_bytes(mask_to_bytes(mask))


def read_mask(path: str | Path) -> ForegroundMask:
    return mask_from_bytes(Path(path).read_bytes())


def write_pgm_frames(grid: TokenGrid, prefix: str | Path, channel: int = 0) -> list[Path]:
    """Dump one channel of every frame as 8-bit binary PGM, min/max scaled per grid."""
    plane = grid.data[..., channel]
    lo, hi = float(plane.min()), float(plane.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.round((plane - lo) * scale).astype(np.uint8)
    paths = []
    for f in range(grid.frames):
        p = Path(f"{prefix}_{f:03d}.pgm")
        p.write_bytes(f"P5\n{grid.width} {grid.height}\n255\n".encode() + pix[f].tobytes())
        paths.append(p)
    return paths
