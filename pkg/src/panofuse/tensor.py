"""Core numeric types and image-space primitives.

Conventions fixed here and relied on by every other module:

* Logit tensors are channel-major ``(C, H, W)``.  Stuff category channels
  always precede thing category channels; :class:`CategorySet` owns that
  ordering, so callers never pass channel offsets around.
* Bilinear sampling uses half-pixel centers with edge clamping: the source
  coordinate for output index ``d`` is ``(d + 0.5) * scale - 0.5`` with
  ``scale = in_size / out_size`` evaluated first.
  Interpolation is evaluated in ``a + w * (b - a)`` form (rows first, then
  columns), which makes constant inputs and same-size resizes exact and
  pins the rounding behavior relied on by downstream binarization.
* Boxes are half-open ``[x0, x1) x [y0, y1)`` in continuous pixel units.
  Rasterization rounds each edge half-up (``floor(v + 0.5)``) and clamps to
  the image bounds.
* Reductions accumulate in float64 regardless of storage dtype, so oracle
  comparisons have deterministic tolerances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "BBox",
    "CategorySet",
    "LogitTensor",
    "MaskPatch",
    "average_logit_maps",
    "bilinear_resize",
    "channel_argmax",
    "channel_softmax",
    "load_tensor",
    "rasterize_box",
    "resize_coeffs",
    "save_tensor",
]

MASK_SIDE = 28


def _frozen_view(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.setflags(write=False)
    return view


def _trusted_tensor(data: np.ndarray) -> "LogitTensor":
    """Wrap an internally computed array, skipping the full finiteness scan.

    Callers are responsible for the invariants (3-D, positive dims, finite,
    float32/float64); used on hot paths where the data was just produced
    from validated inputs.
    """
    t = object.__new__(LogitTensor)
    object.__setattr__(t, "data", _frozen_view(np.ascontiguousarray(data)))
    return t


@dataclass(frozen=True, eq=False)
class LogitTensor:
    """Immutable channel-major ``(C, H, W)`` tensor of finite reals.

    Storage dtype is float32 or float64 (anything else is promoted to
    float64); NaN/Inf are rejected at construction.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"expected a (C, H, W) array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dimensions must be positive, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise ValueError("logit tensor contains NaN or Inf values")
        object.__setattr__(self, "data", _frozen_view(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, half-open on the high side."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def iou(self, other: "BBox") -> float:
        iw = min(self.x1, other.x1) - max(self.x0, other.x0)
        ih = min(self.y1, other.y1) - max(self.y0, other.y0)
        if iw <= 0.0 or ih <= 0.0:
            return 0.0
        inter = iw * ih
        union = self.area + other.area - inter
        return inter / union if union > 0.0 else 0.0


def rasterize_box(box: BBox, height: int, width: int) -> tuple[int, int, int, int]:
    """Round a continuous box to integer pixel bounds, clamped to the image.

    Returns ``(y0, y1, x0, x1)``; the region is empty when ``y1 <= y0`` or
    ``x1 <= x0``.
    """
    x0 = max(0, min(width, int(np.floor(box.x0 + 0.5))))
    x1 = max(0, min(width, int(np.floor(box.x1 + 0.5))))
    y0 = max(0, min(height, int(np.floor(box.y0 + 0.5))))
    y1 = max(0, min(height, int(np.floor(box.y1 + 0.5))))
    return y0, y1, x0, x1


@dataclass(frozen=True, eq=False)
class MaskPatch:
    """Fixed 28x28 grid of mask logits attached to a detection."""

    logits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.logits, dtype=np.float64)
        if arr.shape != (MASK_SIDE, MASK_SIDE):
            raise ValueError(f"mask patch must be {MASK_SIDE}x{MASK_SIDE}, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("mask patch contains NaN or Inf values")
        object.__setattr__(self, "logits", _frozen_view(np.ascontiguousarray(arr)))


@dataclass(frozen=True)
class CategorySet:
    """Ordered category labels with the stuff/thing partition.

    Stuff categories occupy indices ``0..n_stuff-1`` and thing categories
    follow; all channel arithmetic in the library assumes this layout.
    """

    names: tuple[str, ...]
    is_thing: tuple[bool, ...]

    def __post_init__(self) -> None:
        names = tuple(self.names)
        is_thing = tuple(bool(t) for t in self.is_thing)
        if len(names) != len(is_thing):
            raise ValueError("names and is_thing must have equal length")
        if not names:
            raise ValueError("category set must not be empty")
        seen_thing = False
        for flag in is_thing:
            if flag:
                seen_thing = True
            elif seen_thing:
                raise ValueError("stuff categories must precede thing categories")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "is_thing", is_thing)

    @property
    def total(self) -> int:
        return len(self.names)

    @property
    def n_thing(self) -> int:
        return sum(self.is_thing)

    @property
    def n_stuff(self) -> int:
        return self.total - self.n_thing

    def is_stuff(self, category: int) -> bool:
        return 0 <= category < self.n_stuff

    def thing_channel(self, category: int) -> int:
        """Index of a thing category within the thing-only channel block."""
        if not (self.n_stuff <= category < self.total):
            raise ValueError(
                f"category {category} is not a thing category "
                f"(thing range is [{self.n_stuff}, {self.total}))"
            )
        return category - self.n_stuff

    @classmethod
    def synthetic(cls, n_stuff: int, n_thing: int) -> "CategorySet":
        names = tuple(f"stuff_{i}" for i in range(n_stuff)) + tuple(
            f"thing_{i}" for i in range(n_thing)
        )
        flags = (False,) * n_stuff + (True,) * n_thing
        return cls(names, flags)


def resize_coeffs(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-axis gather indices and weights for half-pixel-center sampling.

    Returns ``(lo, hi, w)`` such that ``out[d] = a + w[d] * (b - a)`` with
    ``a = src[lo[d]]`` and ``b = src[hi[d]]``.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be positive, got n_in={n_in} n_out={n_out}")
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, float(n_in - 1))
    lo = np.floor(src).astype(np.intp)
    np.minimum(lo, n_in - 1, out=lo)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    return lo, hi, w


def bilinear_resize(patch: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D grid with half-pixel-center bilinear sampling.

    Exact for constant inputs and the identity when the output size equals
    the input size.  Always returns float64.
    """
    grid = np.asarray(patch, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {grid.shape}")
    in_h, in_w = grid.shape
    if in_h < 1 or in_w < 1 or out_h < 1 or out_w < 1:
        raise ValueError(
            f"zero-sized dimension: in=({in_h}, {in_w}) out=({out_h}, {out_w})"
        )
    ylo, yhi, wy = resize_coeffs(in_h, out_h)
    xlo, xhi, wx = resize_coeffs(in_w, out_w)
    rows_lo = grid[ylo, :]
    rows = rows_lo + wy[:, None] * (grid[yhi, :] - rows_lo)
    cols_lo = rows[:, xlo]
    return cols_lo + wx[None, :] * (rows[:, xhi] - cols_lo)


def channel_softmax(t: LogitTensor) -> LogitTensor:
    """Per-pixel softmax along the channel axis, max-subtracted for stability."""
    x = t.data.astype(np.float64)
    x = x - x.max(axis=0, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=0, keepdims=True)
    return LogitTensor(x)


def _argmax_channels(data: np.ndarray) -> np.ndarray:
    # Blocked running max over the channel axis: each pixel block stays
    # cache-resident across the channel sweep.  Strict ">" keeps the first
    # (lowest-index) maximum, matching a linear scan.
    c = data.shape[0]
    flat = data.reshape(c, -1)
    n = flat.shape[1]
    arg = np.zeros(n, dtype=np.int32)
    block = 1 << 15
    best = np.empty(min(block, n), dtype=flat.dtype)
    better = np.empty(min(block, n), dtype=bool)
    for start in range(0, n, block):
        end = min(n, start + block)
        span = end - start
        b = best[:span]
        m = better[:span]
        a = arg[start:end]
        np.copyto(b, flat[0, start:end])
        for ch in range(1, c):
            row = flat[ch, start:end]
            np.greater(row, b, out=m)
            np.copyto(a, ch, where=m)
            np.maximum(b, row, out=b)
    return arg.reshape(data.shape[1:])


def channel_argmax(t: LogitTensor) -> np.ndarray:
    """Per-pixel index of the maximum channel; ties break toward lower indices."""
    return _argmax_channels(t.data)


def average_logit_maps(maps: Sequence[LogitTensor]) -> LogitTensor:
    """Element-wise arithmetic mean of same-shaped logit tensors."""
    if not maps:
        raise ValueError("cannot average an empty list of logit maps")
    shape = maps[0].data.shape
    for m in maps[1:]:
        if m.data.shape != shape:
            raise ValueError(f"shape mismatch: {m.data.shape} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for m in maps:
        acc += m.data
    acc /= len(maps)
    return LogitTensor(acc)


# Raw tensor file format: magic "UPST", version byte 0x01, dtype byte 0x00
# (32-bit float), ndim byte, ndim little-endian uint32 dims, then the
# row-major little-endian float32 payload.

_MAGIC = b"UPST"
_VERSION = 1
_DTYPE_F32 = 0


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write an array in the raw tensor file format (stored as float32)."""
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"unsupported number of dimensions: {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes((_VERSION, _DTYPE_F32, arr.ndim)))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a raw tensor file; bit-exact inverse of :func:`save_tensor`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 7 or blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a raw tensor file (bad magic)")
    version, dtype_code, ndim = blob[4], blob[5], blob[6]
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if dtype_code != _DTYPE_F32:
        raise ValueError(f"{path}: unsupported dtype code {dtype_code}")
    header_end = 7 + 4 * ndim
    if len(blob) < header_end:
        raise ValueError(f"{path}: truncated dimension header")
    dims = struct.unpack(f"<{ndim}I", blob[7:header_end])
    if any(d == 0 for d in dims):
        raise ValueError(f"{path}: zero-sized dimension in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    payload = blob[header_end:]
    if len(payload) != 4 * count:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, expected {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
