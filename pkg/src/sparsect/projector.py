"""Parallel-beam Radon transform and angle subsampling.

Geometry: D detector bins equal the image side S, detector spacing one pixel,
field of view inscribed (phantoms keep content inside radius 0.95*S/2, so
nothing is truncated). Rays are marched at half-pixel steps with bilinear
sampling, each sample weighted by the step length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import FP32, Tensor

RAY_STEP = 0.5  # pixels


@dataclass
class Sinogram:
    data: Tensor                 # (A, D), FP32
    angles: np.ndarray           # A radians, strictly increasing, in [0, pi)
    detector_spacing: float = 1.0

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.data.data.ndim != 2:
            raise DimensionError(f"sinogram data must be rank 2, got {self.data.dims}")
        if self.data.dims[0] != len(self.angles):
            raise DimensionError(
                f"sinogram rows {self.data.dims[0]} != angle count {len(self.angles)}")
        if len(self.angles) > 1 and not np.all(np.diff(self.angles) > 0):
            raise ParameterError("sinogram angles must be strictly increasing")

    @property
    def n_angles(self) -> int:
        return self.data.dims[0]

    @property
    def n_detectors(self) -> int:
        return self.data.dims[1]

    @property
    def origin(self) -> float:
        """Detector center index."""
        return (self.n_detectors - 1) / 2.0


@dataclass(frozen=True)
class SubsampleSpec:
    factor: int = 1

    def __post_init__(self):
        if self.factor < 1:
            raise ParameterError(f"subsample factor must be >= 1, got {self.factor}")


def uniform_angles(n: int) -> np.ndarray:
    """n angles k*pi/n for k = 0..n-1."""
    if n < 1:
        raise ParameterError(f"angle count must be >= 1, got {n}")
    return np.arange(n, dtype=np.float64) * (np.pi / n)


def _bilinear_sum(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sum of bilinear samples along the last axis; points outside read zero."""
    s = img.shape[0]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    total = np.zeros(xs.shape[:-1], dtype=np.float64)
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        yi = y0 + dy
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            xi = x0 + dx
            inb = (xi >= 0) & (xi < s) & (yi >= 0) & (yi < s)
            vals = img[np.clip(yi, 0, s - 1), np.clip(xi, 0, s - 1)]
            total += np.sum(np.where(inb, wx * wy * vals, 0.0), axis=-1)
    return total


def radon_forward(image: Tensor, angles) -> Sinogram:
    """Line integrals of a square (1,1,S,S) image at the given angles."""
    if image.data.ndim != 4 or image.dims[0] != 1 or image.dims[1] != 1:
        raise DimensionError(f"image must have dims (1,1,S,S), got {image.dims}")
    s = image.dims[2]
    if image.dims[3] != s:
        raise DimensionError(f"image must be square, got {image.dims}")
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size == 0:
        raise ParameterError("angle list must not be empty")
    if np.any(angles < 0.0) or np.any(angles >= np.pi):
        raise ParameterError("angles must lie in [0, pi)")

    img = image.data[0, 0].astype(np.float64)
    d = s
    c = (s - 1) / 2.0
    offsets = np.arange(d, dtype=np.float64) - (d - 1) / 2.0

    half = 0.75 * s  # covers the half-diagonal with margin
    n_steps = int(np.ceil(2.0 * half / RAY_STEP)) + 1
    us = -half + RAY_STEP * np.arange(n_steps, dtype=np.float64)

    rows = np.empty((len(angles), d), dtype=np.float32)
    for a, theta in enumerate(angles):
        ct, st = np.cos(theta), np.sin(theta)
        xs = c + offsets[:, None] * ct - us[None, :] * st
        ys = c + offsets[:, None] * st + us[None, :] * ct
        rows[a] = (RAY_STEP * _bilinear_sum(img, xs, ys)).astype(np.float32)

    return Sinogram(data=Tensor(rows, dtype=FP32), angles=angles)


def subsample(s: Sinogram, spec: SubsampleSpec) -> Sinogram:
    """Keep rows whose index is congruent to 0 modulo the factor."""
    factor = spec.factor
    if factor > s.n_angles:
        raise ParameterError(
            f"subsample factor {factor} exceeds angle count {s.n_angles}")
    kept = s.data.data[::factor].copy()
    return Sinogram(data=Tensor(kept, dtype=FP32), angles=s.angles[::factor].copy(),
                    detector_spacing=s.detector_spacing)
