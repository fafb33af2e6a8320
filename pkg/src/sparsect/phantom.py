"""Seeded 2D foam phantoms: a uniform disk with non-overlapping circular voids.

Randomness comes from numpy's counter-based Philox generator keyed per
phantom through a SplitMix64 stream split, so any phantom is reproducible
from (config, master seed, index) alone. Edges are anti-aliased by 4x4
subpixel area sampling.

Coordinates are measured from the image corner: pixel (row, col) covers the
unit square [row, row+1) x [col, col+1), so the disk center (S/2, S/2) is the
exact image center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .tensor import FP32, Tensor

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

DISK_RADIUS_FRACTION = 0.95  # disk radius = 0.95 * S/2
SUBSAMPLES = 4


def split_seed(seed: int, index: int) -> int:
    """Derive child seed `index` from a 64-bit master seed (SplitMix64 mix)."""
    z = (seed + (index + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 128
    void_count: tuple = (8, 16)
    radius: tuple | None = None        # pixels; default (0.02*S, 0.10*S)
    intensity: tuple = (0.7, 1.0)
    max_attempts: int = 200

    def resolved_radius(self) -> tuple:
        if self.radius is not None:
            return (float(self.radius[0]), float(self.radius[1]))
        return (0.02 * self.size, 0.10 * self.size)

    def validate(self) -> None:
        if self.size < 16:
            raise ParameterError(f"phantom size must be >= 16, got {self.size}")
        n_min, n_max = self.void_count
        if n_min < 0 or n_max < n_min:
            raise ParameterError(f"bad void_count range {self.void_count}")
        r_min, r_max = self.resolved_radius()
        if r_min < 1.0:
            raise ParameterError(f"minimum void radius must be >= 1 pixel, got {r_min}")
        if r_max < r_min:
            raise ParameterError(f"bad radius range ({r_min}, {r_max})")
        i_lo, i_hi = self.intensity
        if not (0.0 <= i_lo <= i_hi <= 1.0):
            raise ParameterError(f"intensity range {self.intensity} must sit in [0, 1]")
        if self.max_attempts < 1:
            raise ParameterError("max_attempts must be >= 1")

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "void_count": list(self.void_count),
            "radius": list(self.resolved_radius()),
            "intensity": list(self.intensity),
            "max_attempts": self.max_attempts,
        }


@dataclass
class Phantom:
    image: Tensor                      # (1, 1, S, S), FP32, values in [0, 1]
    spheres: list = field(default_factory=list)   # (cx, cy, r, intensity)
    seed: int = 0
    material_value: float = 1.0
    placement_failures: int = 0


def disk_image(size: int, radius: float, value: float = 1.0,
               center: tuple | None = None) -> np.ndarray:
    """Anti-aliased filled disk on a size x size grid (corner coordinates)."""
    cx, cy = center if center is not None else (size / 2.0, size / 2.0)
    n = size * SUBSAMPLES
    coords = (np.arange(n, dtype=np.float64) + 0.5) / SUBSAMPLES
    dx2 = (coords - cx) ** 2
    dy2 = (coords - cy) ** 2
    inside = (dy2[:, None] + dx2[None, :]) <= radius * radius
    fine = inside.astype(np.float64) * value
    return fine.reshape(size, SUBSAMPLES, size, SUBSAMPLES).mean(axis=(1, 3))


def _paint_void(fine: np.ndarray, size: int, cx: float, cy: float, r: float,
                value: float) -> None:
    """Assign `value` inside the void circle on the supersampled grid."""
    n = size * SUBSAMPLES
    lo_y = max(0, int((cy - r) * SUBSAMPLES) - 1)
    hi_y = min(n, int((cy + r) * SUBSAMPLES) + 2)
    lo_x = max(0, int((cx - r) * SUBSAMPLES) - 1)
    hi_x = min(n, int((cx + r) * SUBSAMPLES) + 2)
    ys = (np.arange(lo_y, hi_y, dtype=np.float64) + 0.5) / SUBSAMPLES
    xs = (np.arange(lo_x, hi_x, dtype=np.float64) + 0.5) / SUBSAMPLES
    mask = ((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2) <= r * r
    region = fine[lo_y:hi_y, lo_x:hi_x]
    region[mask] = value


def generate(config: PhantomConfig, seed: int) -> Phantom:
    """Deterministic phantom from (config, seed).

    Draw order is fixed: void count, then per void (radius, intensity,
    placement attempts). A void whose placement attempts run out is dropped
    and counted in `placement_failures`.
    """
    config.validate()
    rng = rng_from_seed(seed)
    s = config.size
    center = s / 2.0
    disk_r = DISK_RADIUS_FRACTION * s / 2.0
    material = 1.0

    n_min, n_max = config.void_count
    r_min, r_max = config.resolved_radius()
    i_lo, i_hi = config.intensity

    n_voids = int(rng.integers(n_min, n_max + 1))
    accepted: list[tuple] = []
    failures = 0
    for _ in range(n_voids):
        r = float(rng.uniform(r_min, r_max))
        intensity = float(rng.uniform(i_lo, i_hi))
        reach = disk_r - r
        placed = False
        for _attempt in range(config.max_attempts):
            cx = float(rng.uniform(center - reach, center + reach))
            cy = float(rng.uniform(center - reach, center + reach))
            if (cx - center) ** 2 + (cy - center) ** 2 > reach * reach:
                continue
            clear = True
            for (ox, oy, orr, _oi) in accepted:
                d2 = (cx - ox) ** 2 + (cy - oy) ** 2
                if d2 <= (r + orr) ** 2:
                    clear = False
                    break
            if clear:
                accepted.append((cx, cy, r, intensity))
                placed = True
                break
        if not placed:
            failures += 1

    # rasterize on the supersampled grid, voids are disjoint by construction
    n = s * SUBSAMPLES
    coords = (np.arange(n, dtype=np.float64) + 0.5) / SUBSAMPLES
    d2 = (coords[:, None] - center) ** 2 + (coords[None, :] - center) ** 2
    fine = (d2 <= disk_r * disk_r).astype(np.float64) * material
    for (cx, cy, r, intensity) in accepted:
        _paint_void(fine, s, cx, cy, r, material * (1.0 - intensity))
    img = fine.reshape(s, SUBSAMPLES, s, SUBSAMPLES).mean(axis=(1, 3))

    tensor = Tensor(img.astype(np.float32).reshape(1, 1, s, s), dtype=FP32)
    return Phantom(image=tensor, spheres=accepted, seed=seed,
                   material_value=material, placement_failures=failures)


def generate_dataset(config: PhantomConfig, count: int, seed: int) -> list:
    """`count` phantoms; phantom i uses the derived seed split_seed(seed, i)."""
    if count < 1:
        raise ParameterError(f"dataset count must be >= 1, got {count}")
    return [generate(config, split_seed(seed, i)) for i in range(count)]
