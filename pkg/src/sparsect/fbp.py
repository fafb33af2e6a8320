"""Filtered backprojection: ramp filtering plus pixel-driven backprojection.

Rows are filtered in the frequency domain against the exact discrete ramp
kernel (built in the spatial domain, then transformed), zero-padded to a
power of two of at least twice the detector count to suppress cyclic
wrap-around. Backprojection interpolates each filtered row linearly and
accumulates in FP32 with the pi/A normalization of the continuous limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import FP32, Tensor
from .projector import Sinogram

WINDOWS = ("ramlak", "hann")


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


@dataclass(frozen=True)
class FilterSpec:
    window: str = "ramlak"
    zero_pad: int | None = None      # default: next power of two >= 2*D

    def __post_init__(self):
        if self.window not in WINDOWS:
            raise ParameterError(f"window must be one of {WINDOWS}, got {self.window!r}")

    def padded_length(self, n_detectors: int) -> int:
        target = 2 * n_detectors
        if self.zero_pad is None:
            return next_pow2(target)
        if self.zero_pad < target or self.zero_pad & (self.zero_pad - 1):
            raise ParameterError(
                f"zero_pad must be a power of two >= {target}, got {self.zero_pad}")
        return self.zero_pad


def ramp_kernel(npad: int) -> np.ndarray:
    """Discrete Ram-Lak kernel at unit spacing, wrapped for cyclic use:
    h[0] = 1/4, h[odd n] = -1/(pi^2 n^2), h[even n] = 0."""
    h = np.zeros(npad, dtype=np.float64)
    h[0] = 0.25
    odd = np.arange(1, npad // 2 + 1, 2)
    h[odd] = -1.0 / (np.pi * np.pi * odd * odd)
    h[-odd] = h[odd]
    return h


def _frequency_response(npad: int, window: str) -> np.ndarray:
    resp = np.real(np.fft.rfft(ramp_kernel(npad)))
    if window == "hann":
        k = np.arange(resp.size, dtype=np.float64)
        resp = resp * 0.5 * (1.0 + np.cos(np.pi * k / (resp.size - 1)))
    return resp


def ramp_filter(s: Sinogram, spec: FilterSpec = FilterSpec()) -> Sinogram:
    """Convolve every row with the ramp kernel via zero-padded cyclic FFT."""
    d = s.n_detectors
    if d < 2:
        raise DimensionError(f"need at least 2 detector bins, got {d}")
    npad = spec.padded_length(d)
    resp = _frequency_response(npad, spec.window)
    rows = s.data.data.astype(np.float64)
    padded = np.zeros((rows.shape[0], npad), dtype=np.float64)
    padded[:, :d] = rows
    filtered = np.fft.irfft(np.fft.rfft(padded, axis=1) * resp, n=npad, axis=1)[:, :d]
    return Sinogram(data=Tensor(filtered.astype(np.float32), dtype=FP32),
                    angles=s.angles.copy(), detector_spacing=s.detector_spacing)


def backproject(s: Sinogram, size: int) -> Tensor:
    """Pixel-driven backprojection onto a size x size image (requires size == D).

    Pixels outside the inscribed field-of-view circle of radius (D-1)/2 are
    zeroed: the [0, pi) parallel scan never measures every line through them,
    so their values are reconstruction noise by construction.
    """
    d = s.n_detectors
    if size != d:
        raise DimensionError(f"image side {size} must equal detector count {d}")
    a = s.n_angles
    c = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - c
    ys = coords[:, None]
    xs = coords[None, :]
    center = (d - 1) / 2.0

    out = np.zeros((size, size), dtype=np.float32)
    for row, theta in zip(s.data.data, s.angles):
        t = xs * np.cos(theta) + ys * np.sin(theta) + center
        i0 = np.floor(t).astype(np.int64)
        frac = (t - i0).astype(np.float32)
        v0 = np.where((i0 >= 0) & (i0 < d), row[np.clip(i0, 0, d - 1)], 0.0)
        i1 = i0 + 1
        v1 = np.where((i1 >= 0) & (i1 < d), row[np.clip(i1, 0, d - 1)], 0.0)
        out += (1.0 - frac) * v0 + frac * v1
    out *= np.float32(np.pi / a)
    r_fov = (d - 1) / 2.0
    out[(xs * xs + ys * ys) > r_fov * r_fov] = 0.0
    return Tensor(out.reshape(1, 1, size, size), dtype=FP32)


def fbp(s: Sinogram, spec: FilterSpec = FilterSpec(), size: int | None = None) -> Tensor:
    """Filtered backprojection; output is unclamped (quantization happens later)."""
    if size is None:
        size = s.n_detectors
    return backproject(ramp_filter(s, spec), size)
