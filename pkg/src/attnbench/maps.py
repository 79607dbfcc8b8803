"""Attention maps on a coarse frame grid.

An attention map is a probability distribution over ``height x width`` cells,
stored row-major as a 2-D float64 array.  Maps are built from raw gaze samples
by binning, blurring with a truncated Gaussian and normalizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

DEFAULT_WIDTH = 64
DEFAULT_HEIGHT = 36
DEFAULT_SIGMA = 1.5
DEFAULT_FPS = 3.0

SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Normalized, non-negative grid of probability mass per cell."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"attention map must be 2-D, got shape {v.shape}")
        if v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"attention map needs at least 2x2 cells, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("attention map values must be finite and non-negative")
        if abs(v.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"attention map must sum to 1, got {v.sum():.12g}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class GazeSample:
    clip_id: str
    frame_idx: int
    observer_id: str
    x: float
    y: float


@dataclass(frozen=True)
class SmoothingConfig:
    """Truncated Gaussian blur; ``kernel_radius`` defaults to ``ceil(3 * sigma)``."""

    sigma: float = DEFAULT_SIGMA
    kernel_radius: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        min_radius = math.ceil(3 * self.sigma)
        if self.kernel_radius is None:
            object.__setattr__(self, "kernel_radius", min_radius)
        elif self.kernel_radius < min_radius:
            raise ValueError(
                f"kernel_radius {self.kernel_radius} < ceil(3*sigma) = {min_radius}"
            )


@dataclass(frozen=True, eq=False)
class ClipSequence:
    """Per-frame attention maps of one clip."""

    clip_id: str
    maps: tuple[AttentionMap, ...]
    fps: float = DEFAULT_FPS
    _stack: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        maps = tuple(m if isinstance(m, AttentionMap) else AttentionMap(m) for m in self.maps)
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if len({m.shape for m in maps}) > 1:
            raise ValueError(f"clip {self.clip_id!r}: maps have differing dimensions")
        object.__setattr__(self, "maps", maps)
        if maps:
            stack = np.stack([m.values for m in maps])
        else:
            stack = np.zeros((0, 0, 0))
        stack.setflags(write=False)
        object.__setattr__(self, "_stack", stack)

    @classmethod
    def from_array(cls, clip_id: str, frames: np.ndarray, fps: float = DEFAULT_FPS) -> "ClipSequence":
        """Build a clip from a ``(n_frames, height, width)`` array, normalizing each frame."""
        return cls(clip_id, tuple(normalize(f) for f in np.asarray(frames, dtype=np.float64)), fps)

    @property
    def stack(self) -> np.ndarray:
        return self._stack

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps[0].shape

    def __len__(self):
        return len(self.maps)


def normalize(raw) -> AttentionMap:
    """Divide a non-negative grid by its sum."""
    v = np.asarray(raw, dtype=np.float64)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("cannot normalize: grid has negative or non-finite values")
    total = v.sum()
    if not total > 0:
        raise ValueError("degenerate map: all cells are zero")
    out = v / total
    # second pass absorbs rounding of the first division
    return AttentionMap(out / out.sum())


def gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


@lru_cache(maxsize=64)
def _smoothing_matrix_cached(n: int, sigma: float, radius: int) -> np.ndarray:
    k = gaussian_kernel_1d(sigma, radius)
    m = np.zeros((n, n))
    for off in range(-radius, radius + 1):
        m += np.eye(n, k=off) * k[off + radius]
    m.setflags(write=False)
    return m


def smoothing_matrix(n: int, smoothing: SmoothingConfig) -> np.ndarray:
    """Banded ``n x n`` matrix applying the 1-D kernel with zero padding.

    The kernel is symmetric, so the matrix is its own transpose.
    """
    return _smoothing_matrix_cached(int(n), float(smoothing.sigma), int(smoothing.kernel_radius))


def blur(grid: np.ndarray, smoothing: SmoothingConfig) -> np.ndarray:
    """Separable zero-padded Gaussian blur over the last two axes, no renormalization."""
    grid = np.asarray(grid, dtype=np.float64)
    ky = smoothing_matrix(grid.shape[-2], smoothing)
    kx = smoothing_matrix(grid.shape[-1], smoothing)
    return ky @ grid @ kx.T


def gaussian_smooth(amap: AttentionMap, smoothing: SmoothingConfig | None = None) -> AttentionMap:
    smoothing = smoothing or SmoothingConfig()
    return normalize(blur(np.asarray(amap), smoothing))


def _check_sample(s: GazeSample) -> None:
    if not (0.0 <= s.x < 1.0 and 0.0 <= s.y < 1.0):
        raise ValueError(f"gaze coordinate out of range [0, 1): {s}")


def gaze_histogram(samples: Sequence[GazeSample], width: int, height: int) -> np.ndarray:
    """Count gaze samples per cell; cell = (floor(y*height), floor(x*width))."""
    counts = np.zeros((height, width))
    for s in samples:
        _check_sample(s)
        counts[int(math.floor(s.y * height)), int(math.floor(s.x * width))] += 1.0
    return counts


def aggregate_gazes(
    samples: Sequence[GazeSample],
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    smoothing: SmoothingConfig | None = None,
) -> AttentionMap:
    """Aggregate one frame's gaze samples from all observers into an attention map.

    Every sample carries weight 1, so observers with more samples contribute more.
    The histogram is blurred and then normalized.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no gaze data")
    keys = {(s.clip_id, s.frame_idx) for s in samples}
    if len(keys) > 1:
        raise ValueError(f"samples span several frames: {sorted(keys)[:3]}")
    smoothing = smoothing or SmoothingConfig()
    return normalize(blur(gaze_histogram(samples, width, height), smoothing))


def mean_map(clip: ClipSequence) -> AttentionMap:
    if len(clip) == 0:
        raise ValueError(f"clip {clip.clip_id!r} has no frames")
    return normalize(clip.stack.mean(axis=0))


def group_gazes(samples: Iterable[GazeSample]) -> dict[str, dict[int, list[GazeSample]]]:
    """Group samples by clip then frame, preserving file order inside a frame."""
    out: dict[str, dict[int, list[GazeSample]]] = {}
    for s in samples:
        out.setdefault(s.clip_id, {}).setdefault(s.frame_idx, []).append(s)
    return out


def aggregate_clip(
    clip_id: str,
    frames: dict[int, list[GazeSample]],
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    smoothing: SmoothingConfig | None = None,
    fps: float = DEFAULT_FPS,
    n_frames: int | None = None,
) -> ClipSequence:
    """Aggregate every frame of a clip; a frame with no samples is an error."""
    n = n_frames if n_frames is not None else max(frames) + 1
    maps = []
    for i in range(n):
        if i not in frames:
            raise ValueError(f"no gaze data for clip {clip_id!r} frame {i}")
        maps.append(aggregate_gazes(frames[i], width, height, smoothing))
    extra = [i for i in frames if i >= n or i < 0]
    if extra:
        raise ValueError(f"clip {clip_id!r}: frame index {extra[0]} outside [0, {n})")
    return ClipSequence(clip_id, tuple(maps), fps)
