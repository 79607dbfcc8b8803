"""Human Weighted Sampling.

Frames whose attention map departs from their clip's mean map are sampled
more often during training.  The per-frame weight is a function of the KL
divergence to the clip mean: a low plateau below ``d_lo``, an inverse-histogram
section on ``[d_lo, d_hi]`` that flattens the resampled divergence histogram,
and a saturated plateau above ``d_hi``.  Frames in the first and last moments
of each clip are capped at once per epoch.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .maps import ClipSequence, mean_map
from .metrics import kl_divergence

D_LO = 1.0
D_HI = 3.0
DEFAULT_BIN_WIDTH = 0.1
DEFAULT_W_LOW = 0.2
WINDOW_LENGTH = 6


class FrameWeight(NamedTuple):
    clip_id: str
    frame_idx: int
    d_kl: float
    weight: float


@dataclass(frozen=True)
class FrameWeightTable:
    """Per-frame divergence and normalized sampling weight (mean weight 1)."""

    entries: list[FrameWeight]

    def weights_for(self, clip_id: str) -> np.ndarray:
        rows = sorted((e.frame_idx, e.weight) for e in self.entries if e.clip_id == clip_id)
        return np.array([w for _, w in rows])

    def as_dict(self) -> dict[str, np.ndarray]:
        grouped: dict[str, list[tuple[int, float]]] = {}
        for e in self.entries:
            grouped.setdefault(e.clip_id, []).append((e.frame_idx, e.weight))
        out = {}
        for cid, rows in grouped.items():
            rows.sort()
            if [i for i, _ in rows] != list(range(len(rows))):
                raise ValueError(f"weight table for clip {cid!r} has missing or duplicate frames")
            out[cid] = np.array([w for _, w in rows])
        return out


@dataclass(frozen=True, eq=False)
class WeightFunction:
    """Piecewise weight of a frame as a function of its divergence.

    Middle-section weights are expressed relative to the most populated bin,
    which gets weight 1; ``w_low`` and ``w_high`` are in the same units.
    """

    w_low: float
    w_high: float
    bin_width: float
    inverse_hist: np.ndarray
    d_lo: float = D_LO
    d_hi: float = D_HI

    @property
    def n_bins(self) -> int:
        return len(self.inverse_hist)

    def bin_index(self, d: np.ndarray) -> np.ndarray:
        idx = np.floor((np.asarray(d, dtype=np.float64) - self.d_lo) / self.bin_width).astype(int)
        return np.clip(idx, 0, self.n_bins - 1)

    def __call__(self, d):
        d = np.asarray(d, dtype=np.float64)
        out = self.inverse_hist[self.bin_index(d)]
        out = np.where(d < self.d_lo, self.w_low, out)
        out = np.where(d > self.d_hi, self.w_high, out)
        return out if out.ndim else float(out)


def frame_divergences(clip: ClipSequence) -> list[tuple[int, float]]:
    if len(clip) < 2:
        raise ValueError(f"clip {clip.clip_id!r} needs at least 2 frames to compare with its mean")
    mu = mean_map(clip)
    return [(i, kl_divergence(m, mu)) for i, m in enumerate(clip.maps)]


def _fill_empty_bins(counts: np.ndarray) -> np.ndarray:
    """Empty bins borrow the mean count of the nearest non-empty bin on each side."""
    filled = counts.astype(np.float64).copy()
    nonempty = np.flatnonzero(counts > 0)
    for b in np.flatnonzero(counts == 0):
        left = nonempty[nonempty < b]
        right = nonempty[nonempty > b]
        neigh = []
        if left.size:
            neigh.append(counts[left[-1]])
        if right.size:
            neigh.append(counts[right[0]])
        filled[b] = float(np.mean(neigh))
    return filled


def fit_weight_function(
    d_kls: Sequence[float],
    bin_width: float = DEFAULT_BIN_WIDTH,
    w_low: float = DEFAULT_W_LOW,
    w_high: float | None = None,
    d_lo: float = D_LO,
    d_hi: float = D_HI,
) -> WeightFunction:
    """Fit the weight function to a corpus of frame divergences.

    With ``w_high=None`` the right plateau continues the last middle bin.
    """
    d = np.asarray(d_kls, dtype=np.float64)
    if not bin_width > 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    n_float = (d_hi - d_lo) / bin_width
    n_bins = int(round(n_float))
    if n_bins < 1 or abs(n_float - n_bins) > 1e-6:
        raise ValueError(f"bin_width {bin_width} does not divide [{d_lo}, {d_hi}]")
    if not w_low > 0:
        raise ValueError("w_low must be positive so low-divergence frames stay sampled")
    inside = d[(d >= d_lo) & (d <= d_hi)]
    if not np.any(inside < d_hi):
        raise ValueError(f"cannot flatten empty range: no divergence in [{d_lo}, {d_hi})")
    probe = WeightFunction(w_low, w_low, bin_width, np.ones(n_bins), d_lo, d_hi)
    counts = np.bincount(probe.bin_index(inside), minlength=n_bins)
    filled = _fill_empty_bins(counts)
    inverse = filled.max() / filled
    if w_low > inverse[0]:
        raise ValueError(f"w_low {w_low} exceeds the weight at d={d_lo} ({inverse[0]:.4g})")
    if w_high is None:
        w_high = float(inverse[-1])
    elif w_high < inverse[-1]:
        raise ValueError(f"w_high {w_high} is below the weight at d={d_hi} ({inverse[-1]:.4g})")
    return WeightFunction(float(w_low), float(w_high), float(bin_width), inverse, d_lo, d_hi)


def boundary_frame_counts(fps: float, head_s: float, tail_s: float) -> tuple[int, int]:
    """Frames touching the first ``head_s`` / last ``tail_s`` seconds of a clip.

    Frame ``i`` is displayed over ``[i/fps, (i+1)/fps)``; any overlap counts.
    """
    return math.ceil(head_s * fps - 1e-9), math.ceil(tail_s * fps - 1e-9)


def boundary_mask(n_frames: int, fps: float, head_s: float, tail_s: float) -> np.ndarray:
    head, tail = boundary_frame_counts(fps, head_s, tail_s)
    mask = np.zeros(n_frames, dtype=bool)
    mask[:head] = True
    if tail:
        mask[max(0, n_frames - tail):] = True
    return mask


def _log_total(log_values: np.ndarray) -> float:
    if log_values.size == 0 or not np.any(np.isfinite(log_values)):
        return -math.inf
    return float(logsumexp(log_values))


def cap_and_normalize(raw: np.ndarray, capped: np.ndarray) -> np.ndarray:
    """Scale weights to mean 1 with capped entries held at or below 1.

    This is the fixed point of repeatedly normalizing to mean 1 and clipping the
    capped entries at 1: find ``s`` with
    ``sum(s*raw[free]) + sum(min(s*raw[capped], 1)) == n``.

    The solve runs on log weights shifted so the largest is 0, which keeps
    every positive weight positive however wide the input range is.
    """
    raw = np.asarray(raw, dtype=np.float64)
    capped = np.asarray(capped, dtype=bool)
    if raw.size == 0:
        return raw.copy()
    if np.any(raw < 0) or not np.any(raw > 0):
        raise ValueError("raw weights must be non-negative with positive total")
    positive = raw > 0
    with np.errstate(divide="ignore"):
        logs = np.log(raw)
    logs = logs - logs.max()
    n = raw.size
    log_free = _log_total(logs[~capped])
    cap_logs = np.sort(logs[capped])[::-1]
    # log of sum(cap_logs[k:]) for every k
    log_tails = np.append(np.logaddexp.accumulate(cap_logs[::-1])[::-1], -math.inf)
    for k in range(cap_logs.size + 1):
        # k largest capped entries saturate at 1
        log_denom = float(np.logaddexp(log_free, log_tails[k]))
        if log_denom == -math.inf:
            # only zero-weight entries remain unsaturated: mean 1 is out of reach
            log_s = math.inf
            break
        log_s = math.log(n - k) - log_denom
        ok_sat = k == 0 or log_s + cap_logs[k - 1] >= -1e-12
        ok_rest = k == cap_logs.size or log_s + cap_logs[k] <= 1e-12
        if ok_sat and ok_rest:
            break
    else:  # pragma: no cover - the piecewise-linear equation always has a root
        raise RuntimeError("weight normalization failed")
    if math.isinf(log_s):
        out = np.where(positive, 1.0, 0.0)
    else:
        # saturated capped entries may overflow here; they are clipped just below
        with np.errstate(under="ignore", over="ignore"):
            out = np.exp(logs + log_s)
    out[capped] = np.minimum(out[capped], 1.0)
    return out


def assign_weights(
    clips: Sequence[ClipSequence],
    wf: WeightFunction,
    boundary_head_s: float = 1.0,
    boundary_tail_s: float = 0.5,
) -> FrameWeightTable:
    if not clips:
        raise ValueError("no clips given")
    keys = []
    d_all = []
    capped = []
    for clip in clips:
        divs = frame_divergences(clip)
        keys.extend((clip.clip_id, i) for i, _ in divs)
        d_all.extend(d for _, d in divs)
        capped.append(boundary_mask(len(clip), clip.fps, boundary_head_s, boundary_tail_s))
    d_arr = np.asarray(d_all)
    weights = cap_and_normalize(np.asarray(wf(d_arr), dtype=np.float64), np.concatenate(capped))
    entries = [FrameWeight(c, i, float(d), float(w)) for (c, i), d, w in zip(keys, d_arr, weights)]
    return FrameWeightTable(entries)


@dataclass(frozen=True)
class SequenceWindow:
    clip_id: str
    start_frame: int
    length: int
    weight: float


def enumerate_windows(
    clips: Sequence[ClipSequence] | dict[str, int],
    table: FrameWeightTable,
    length: int = WINDOW_LENGTH,
) -> list[SequenceWindow]:
    """All stride-1 windows of ``length`` frames, weighted by their frames' weight sum.

    ``clips`` may be clip objects or a ``{clip_id: n_frames}`` mapping.  Clips
    shorter than ``length`` are skipped with a warning.  Frames near clip ends
    belong to fewer windows, so they are sampled less often than their weight
    alone suggests.
    """
    lengths = clips if isinstance(clips, dict) else {c.clip_id: len(c) for c in clips}
    weights = table.as_dict()
    out = []
    for cid, n in lengths.items():
        if n < length:
            warnings.warn(f"clip {cid!r} has {n} frames < window length {length}; skipped")
            continue
        w = weights.get(cid)
        if w is None or len(w) != n:
            raise ValueError(f"weight table does not cover clip {cid!r}")
        for s in range(n - length + 1):
            out.append(SequenceWindow(cid, s, length, float(w[s:s + length].sum())))
    if not out:
        raise ValueError(f"no clip has at least {length} frames")
    return out


def sample_windows(
    windows: Sequence[SequenceWindow],
    n: int,
    seed: int | np.random.Generator,
) -> list[SequenceWindow]:
    """Draw ``n`` windows with replacement, probability proportional to weight."""
    if n < 1:
        raise ValueError("n must be >= 1")
    w = np.array([win.weight for win in windows], dtype=np.float64)
    if w.size == 0 or not w.sum() > 0:
        raise ValueError("all window weights are zero")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(w.size, size=n, replace=True, p=w / w.sum())
    return [windows[i] for i in idx]
