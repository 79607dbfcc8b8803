"""Saliency metrics (KL, CC, NSS, AUC-Judd) and bootstrap confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .maps import AttentionMap, ClipSequence, mean_map

KL_EPS = 1e-8
METRICS = ("kl", "cc", "nss", "auc")


@dataclass(frozen=True, eq=False)
class FixationMask:
    """Boolean grid of fixated cells."""

    fixated: np.ndarray

    def __post_init__(self):
        f = np.array(self.fixated, dtype=bool)
        if f.ndim != 2:
            raise ValueError(f"fixation mask must be 2-D, got shape {f.shape}")
        f.setflags(write=False)
        object.__setattr__(self, "fixated", f)

    @property
    def shape(self):
        return self.fixated.shape

    @classmethod
    def from_values(cls, values) -> "FixationMask":
        """From a 0/1 grid such as a fixation tensor file frame."""
        v = np.asarray(values)
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("fixation mask values must be 0.0 or 1.0")
        return cls(v == 1)


@dataclass(frozen=True)
class MetricReport:
    metric_name: str
    per_frame: list[tuple[str, int, float]]
    mean: float
    ci_low: float
    ci_high: float


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _mask(pred: np.ndarray, fixations) -> np.ndarray:
    m = fixations.fixated if isinstance(fixations, FixationMask) else np.asarray(fixations, dtype=bool)
    if m.shape != pred.shape:
        raise ValueError(f"dimension mismatch: map {pred.shape} vs fixations {m.shape}")
    return m


def kl_divergence(gt, pred, eps: float = KL_EPS) -> float:
    """D_KL(gt || pred) in nats, with ``pred`` floored at ``eps``."""
    g, p = _pair(gt, pred)
    m = g > 0
    return float(np.sum(g[m] * np.log(g[m] / np.maximum(p[m], eps))))


def correlation_coefficient(a, b) -> float:
    x, y = _pair(a, b)
    x = x.ravel()
    y = y.ravel()
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("constant map: correlation undefined")
    dx = x - x.mean()
    dy = y - y.mean()
    return float(np.dot(dx, dy) / np.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))


def nss(pred, fixations) -> float:
    """Mean z-scored prediction over fixated cells (population std)."""
    p = np.asarray(pred, dtype=np.float64)
    m = _mask(p, fixations)
    if not m.any():
        raise ValueError("empty fixation mask")
    sd = p.std()
    if np.ptp(p) == 0 or sd == 0:
        raise ValueError("constant map: NSS undefined")
    z = (p - p.mean()) / sd
    return float(z[m].mean())


def auc(pred, fixations) -> float:
    """AUC-Judd: fixated cells are positives, every other cell a negative.

    Computed as the Mann-Whitney statistic with average ranks, so tied
    positive/negative pairs count one half.
    """
    p = np.asarray(pred, dtype=np.float64)
    m = _mask(p, fixations).ravel()
    n_pos = int(m.sum())
    n_neg = m.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one fixated and one non-fixated cell")
    ranks = rankdata(p.ravel(), method="average")
    u = ranks[m].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def nontrivial_subset(clips: Sequence[ClipSequence], threshold: float = 2.0) -> list[tuple[str, int]]:
    """Frames whose map diverges from its clip mean by more than ``threshold`` nats."""
    if not clips:
        raise ValueError("no clips given")
    out = []
    for clip in clips:
        mu = mean_map(clip)
        for i, m in enumerate(clip.maps):
            if kl_divergence(m, mu) > threshold:
                out.append((clip.clip_id, i))
    return out


def bootstrap_ci(
    values: Iterable[float],
    n_resamples: int = 10000,
    level: float = 0.95,
    seed: int | np.random.Generator = 0,
    chunk: int = 2_000_000,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean.

    Resamples of the same size as ``values`` are drawn with replacement; the
    interval bounds are the ``(1-level)/2`` and ``(1+level)/2`` quantiles of
    the resample means.
    """
    v = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("bootstrap of empty sample")
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    if np.all(v == v[0]):
        return float(v[0]), float(v[0])
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = v.size
    per_chunk = max(1, chunk // n)
    means = np.empty(n_resamples)
    done = 0
    while done < n_resamples:
        k = min(per_chunk, n_resamples - done)
        idx = rng.integers(0, n, size=(k, n))
        means[done:done + k] = v[idx].mean(axis=1)
        done += k
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def metric_report(
    name: str,
    keys: Sequence[tuple[str, int]],
    values: Sequence[float],
    n_resamples: int = 10000,
    level: float = 0.95,
    seed: int = 0,
) -> MetricReport:
    """Frame-weighted mean and bootstrap CI of per-frame metric values."""
    if len(values) == 0:
        raise ValueError(f"metric {name}: no frames to report")
    vals = np.asarray(values, dtype=np.float64)
    lo, hi = bootstrap_ci(vals, n_resamples, level, seed)
    per_frame = [(c, int(f), float(v)) for (c, f), v in zip(keys, vals)]
    return MetricReport(name, per_frame, float(vals.mean()), lo, hi)


def score_frame(name: str, gt: AttentionMap | np.ndarray, pred, fixations=None) -> float:
    """Evaluate one metric on one frame; NSS/AUC need ``fixations``."""
    if name == "kl":
        return kl_divergence(gt, pred)
    if name == "cc":
        return correlation_coefficient(gt, pred)
    if fixations is None:
        raise ValueError(f"metric {name} needs a fixation mask")
    if name == "nss":
        return nss(pred, fixations)
    if name == "auc":
        return auc(pred, fixations)
    raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}")

