"""Ground-truth density maps, sum pooling and the max-density clamp."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .core import HeadPoint

DEFAULT_SIGMA = 4.0
TRUNCATE = 4.0
ADAPTIVE_K = 3
ADAPTIVE_BETA = 0.3


@dataclass(frozen=True)
class DensityMap:
    grid: np.ndarray
    scale: int = 1

    @property
    def count(self) -> float:
        return float(self.grid.sum())

    @property
    def shape(self):
        return self.grid.shape


@dataclass(frozen=True)
class MaxDensityBound:
    value: float

    @property
    def degenerate(self) -> bool:
        return self.value <= 0.0


def _head_xy(heads) -> np.ndarray:
    if isinstance(heads, np.ndarray):
        return heads.reshape(-1, 2).astype(np.float64)
    return np.array([(h.x, h.y) if isinstance(h, HeadPoint) else tuple(h) for h in heads],
                    dtype=np.float64).reshape(-1, 2)


def adaptive_sigmas(xy: np.ndarray, fallback: float, k: int = ADAPTIVE_K,
                    beta: float = ADAPTIVE_BETA) -> np.ndarray:
    """Per-head sigma = beta * mean distance to the k nearest other heads."""
    n = xy.shape[0]
    if n <= k:
        return np.full(n, fallback)
    dist, _ = cKDTree(xy).query(xy, k=k + 1)
    sig = beta * dist[:, 1:].mean(axis=1)
    return np.maximum(sig, 0.5)


def generate_density_map(heads, shape, sigma: float = DEFAULT_SIGMA, mode: str = "fixed") -> DensityMap:
    """Unit-mass truncated Gaussian per head, renormalized after border clipping.

    ``mode="adaptive"`` sizes each kernel from its k-nearest-neighbour distance.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = int(shape[0]), int(shape[1])
    xy = _head_xy(heads)
    if xy.size:
        oob = (xy[:, 0] < 0) | (xy[:, 0] >= w) | (xy[:, 1] < 0) | (xy[:, 1] >= h)
        if oob.any():
            x, y = xy[np.flatnonzero(oob)[0]]
            raise ValueError(f"head ({x}, {y}) outside {h}x{w} map")
    if mode == "fixed":
        sig = np.full(xy.shape[0], float(sigma))
    elif mode == "adaptive":
        sig = adaptive_sigmas(xy, float(sigma))
    else:
        raise ValueError(f"unknown kernel mode {mode!r}")
    grid = kernels.splat_gaussians(xy[:, 0], xy[:, 1], sig, h, w, TRUNCATE)
    return DensityMap(grid, 1)


def downsample_sum(dmap: DensityMap, factor: int) -> DensityMap:
    """Non-overlapping factor x factor block sums."""
    grid = np.asarray(dmap.grid)
    h, w = grid.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"shape {h}x{w} not divisible by {factor}")
    if factor == 1:
        return DensityMap(grid.copy(), dmap.scale)
    out = grid.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(out, dmap.scale * factor)


def compute_max_density(maps: Iterable) -> MaxDensityBound:
    best = None
    for m in maps:
        grid = m.grid if isinstance(m, DensityMap) else np.asarray(m)
        v = float(grid.max()) if grid.size else 0.0
        best = v if best is None else max(best, v)
    if best is None:
        raise ValueError("compute_max_density needs at least one map")
    return MaxDensityBound(best)


def regularize_density(pred, bound: MaxDensityBound):
    """Zero every entry strictly above the bound. Accepts DensityMap or arrays."""
    grid = pred.grid if isinstance(pred, DensityMap) else pred
    if _is_torch(grid):
        if bool((grid < 0).any()):
            raise ValueError("prediction has negative entries")
        return grid.masked_fill(grid > bound.value, 0.0)
    grid = np.asarray(grid)
    if (grid < 0).any():
        raise ValueError("prediction has negative entries")
    out = np.where(grid > bound.value, 0.0, grid).astype(grid.dtype, copy=False)
    if isinstance(pred, DensityMap):
        return DensityMap(out, pred.scale)
    return out


def _is_torch(x) -> bool:
    return type(x).__module__.startswith("torch")


def save_density(dmap, path) -> None:
    """Write ``<H:int32><W:int32>`` little-endian then float32 rows."""
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    h, w = grid.shape
    Path(path).write_bytes(struct.pack("<ii", h, w) + np.ascontiguousarray(grid, dtype="<f4").tobytes())


def load_density(path) -> DensityMap:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated density header")
    h, w = struct.unpack("<ii", data[:8])
    if h < 0 or w < 0 or len(data) != 8 + 4 * h * w:
        raise ValueError(f"{path}: payload size does not match {h}x{w}")
    grid = np.frombuffer(data, dtype="<f4", offset=8).reshape(h, w).astype(np.float32)
    return DensityMap(grid, 1)


def density_for_sample(sample, sigma: float = DEFAULT_SIGMA, mode: str = "fixed") -> DensityMap:
    return generate_density_map(sample.head_array(), (sample.height, sample.width), sigma, mode)


def pad_to_multiple(grid: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad bottom/right so both spatial dims divide ``multiple``; mass is unchanged."""
    h, w = grid.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return grid
    pad = [(0, 0)] * (grid.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(grid, pad)

