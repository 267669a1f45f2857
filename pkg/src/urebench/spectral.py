"""Radix-2 FFT, short-time Fourier transform and spectrogram images.

Orientation is fixed everywhere: rows index frequency (bin 0 at row 0),
columns index time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMG_MAGIC = b"IMG1"
IMG_HEADER = struct.Struct("<4sII")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def fft_radix2(buffer, inverse: bool = False) -> np.ndarray:
    """Iterative Cooley-Tukey FFT over the last axis.

    Works on a 1-D sequence or a stack of rows.  The inverse is scaled by 1/n.
    """
    x = np.array(buffer, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    levels = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(levels):
        rev |= ((idx >> b) & 1) << (levels - 1 - b)
    x = x[..., rev]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = x.reshape(x.shape[:-1] + (n // size, size))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        x = blocks.reshape(x.shape)
        size *= 2
    if inverse:
        x /= n
    return x


def dft_naive(buffer) -> np.ndarray:
    """O(n^2) reference DFT."""
    x = np.asarray(buffer, dtype=np.complex128)
    n = x.size
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # [freq_bins, time_frames]
    sample_rate: float
    window_size: int
    hop: int
    window: str = "hann"

    def __post_init__(self):
        m = np.asarray(self.magnitudes, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != self.window_size // 2 + 1:
            raise ValueError(f"magnitudes shape {m.shape} inconsistent with window_size {self.window_size}")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ValueError("magnitudes must be finite and non-negative")
        self.magnitudes = m

    @property
    def params(self) -> dict:
        return {"sample_rate": self.sample_rate, "window_size": self.window_size,
                "hop": self.hop, "window": self.window}


@dataclass
class ImageTensor:
    values: np.ndarray  # [1, H, W] in [0, 1]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[0] != 1:
            raise ValueError(f"image must be [1, H, W], got {v.shape}")
        self.values = v

    @property
    def grid(self) -> np.ndarray:
        return self.values[0]

    @property
    def shape(self) -> tuple:
        return self.values.shape


def _window(kind: str, size: int) -> np.ndarray:
    if kind == "hann":
        # periodic Hann
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(size) / size)
    if kind == "rect":
        return np.ones(size)
    raise ValueError(f"unknown window {kind!r}")


def stft(ts, window_size: int, hop: int, window: str = "hann") -> Spectrogram:
    samples = np.asarray(ts.samples, dtype=np.float64)
    if not _is_pow2(window_size):
        raise ValueError(f"window_size must be a power of two, got {window_size}")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if samples.size < window_size:
        raise ValueError(f"input of {samples.size} samples is shorter than one window ({window_size})")
    frames = 1 + (samples.size - window_size) // hop
    win = np.lib.stride_tricks.sliding_window_view(samples, window_size)[::hop][:frames]
    spectra = fft_radix2(win * _window(window, window_size))
    mags = np.abs(spectra[:, : window_size // 2 + 1]).T
    return Spectrogram(mags, ts.sample_rate, window_size, hop, window)


def _resize_axis(a: np.ndarray, size: int, axis: int) -> np.ndarray:
    """Linear resampling along one axis with half-pixel centres."""
    n = a.shape[axis]
    if n == size:
        return a
    pos = (np.arange(size) + 0.5) * n / size - 0.5
    pos = np.clip(pos, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, hi, axis=axis) * frac


def bilinear_resize(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    return _resize_axis(_resize_axis(np.asarray(grid, dtype=np.float64), h, 0), w, 1)


def minmax(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def to_image(spec: Spectrogram, target_h: int, target_w: int) -> ImageTensor:
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target dims must be >= 1, got {target_h}x{target_w}")
    if spec.magnitudes.size == 0:
        raise ValueError("empty spectrogram")
    grid = minmax(bilinear_resize(np.log1p(spec.magnitudes), target_h, target_w))
    return ImageTensor(grid[None], {**spec.params, "height": target_h, "width": target_w})


def write_image(img: ImageTensor | np.ndarray, path) -> None:
    grid = img.grid if isinstance(img, ImageTensor) else np.asarray(img)
    grid = np.asarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got {grid.shape}")
    h, w = grid.shape
    Path(path).write_bytes(IMG_HEADER.pack(IMG_MAGIC, h, w) + grid.tobytes(order="C"))


def read_grid(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < IMG_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, h, w = IMG_HEADER.unpack_from(blob)
    if magic != IMG_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if len(blob) - IMG_HEADER.size < 4 * h * w:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(blob, dtype="<f4", count=h * w, offset=IMG_HEADER.size).reshape(h, w).copy()


def read_image(path) -> ImageTensor:
    return ImageTensor(read_grid(path)[None], {"path": str(path)})
