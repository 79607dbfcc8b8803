"""Attended-object analysis over detection boxes.

A detection counts as attended when the largest map value among the cells
inside its box reaches ``threshold`` times the map's global maximum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .metrics import bootstrap_ci

CATEGORIES = ("car", "pedestrian", "cyclist", "other")


@dataclass(frozen=True)
class DetectionRecord:
    clip_id: str
    frame_idx: int
    category: str
    bbox: tuple[float, float, float, float]  # normalized x_min, y_min, x_max, y_max

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}; expected one of {CATEGORIES}")
        x0, y0, x1, y1 = (float(v) for v in self.bbox)
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"degenerate or out-of-range bbox {self.bbox}")
        object.__setattr__(self, "bbox", (x0, y0, x1, y1))


@dataclass(frozen=True)
class AttendedCriterion:
    threshold: float = 0.5
    mode: str = "max-ratio"

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.mode != "max-ratio":
            raise ValueError(f"unsupported criterion mode {self.mode!r}")


def box_cells(bbox: Sequence[float], height: int, width: int) -> np.ndarray:
    """Boolean mask of cells whose centre lies inside the box.

    A box too small to contain any centre falls back to the cell holding the
    box centre.
    """
    x0, y0, x1, y1 = bbox
    cx = (np.arange(width) + 0.5) / width
    cy = (np.arange(height) + 0.5) / height
    inside = ((cy >= y0) & (cy <= y1))[:, None] & ((cx >= x0) & (cx <= x1))[None, :]
    if not inside.any():
        col = min(int(0.5 * (x0 + x1) * width), width - 1)
        row = min(int(0.5 * (y0 + y1) * height), height - 1)
        inside[row, col] = True
    return inside


def is_attended(amap, det: DetectionRecord, crit: AttendedCriterion = AttendedCriterion()) -> bool:
    v = np.asarray(amap, dtype=np.float64)
    if v.ndim != 2 or min(v.shape) < 2:
        raise ValueError(f"invalid map shape {v.shape}")
    peak = v.max()
    if not peak > 0:
        raise ValueError("map has no positive mass")
    cells = box_cells(det.bbox, *v.shape)
    return bool(v[cells].max() >= crit.threshold * peak)


MapSource = Callable[[str, int], np.ndarray] | Mapping[tuple[str, int], np.ndarray]


def _lookup(maps: MapSource, det: DetectionRecord):
    if callable(maps):
        return maps(det.clip_id, det.frame_idx)
    key = (det.clip_id, det.frame_idx)
    if key not in maps:
        raise KeyError(f"no attention map for clip {det.clip_id!r} frame {det.frame_idx}")
    return maps[key]


def attended_flags(maps: MapSource, dets: Sequence[DetectionRecord], crit: AttendedCriterion) -> np.ndarray:
    return np.array([is_attended(_lookup(maps, d), d, crit) for d in dets], dtype=bool)


def attended_proportions(
    maps: MapSource,
    dets: Sequence[DetectionRecord],
    crit: AttendedCriterion = AttendedCriterion(),
    n_resamples: int = 10000,
    seed: int = 0,
) -> dict[str, tuple[int, float, float, float]]:
    """Per category ``(n, proportion, ci_low, ci_high)`` in fixed category order."""
    flags = attended_flags(maps, dets, crit)
    cats = np.array([d.category for d in dets])
    out = {}
    for cat in CATEGORIES:
        sel = flags[cats == cat] if len(dets) else np.array([], dtype=bool)
        if sel.size == 0:
            warnings.warn(f"no detections of category {cat!r}; omitted from report")
            continue
        lo, hi = bootstrap_ci(sel.astype(float), n_resamples, 0.95, seed)
        out[cat] = (int(sel.size), float(sel.mean()), lo, hi)
    return out


@dataclass(frozen=True)
class Selectivity:
    base_rate: float
    selected_rate: float
    ci_low: float
    ci_high: float
    n_total: int
    n_selected: int


def selectivity_from_flags(
    human: np.ndarray,
    model: np.ndarray,
    n_resamples: int = 10000,
    seed: int = 0,
) -> Selectivity:
    human = np.asarray(human, dtype=bool)
    model = np.asarray(model, dtype=bool)
    if human.shape != model.shape or human.size == 0:
        raise ValueError("human and model flags must be equal-length and non-empty")
    chosen = human[model]
    if chosen.size == 0:
        raise ValueError("no selections: the model attends to none of the detections")
    lo, hi = bootstrap_ci(chosen.astype(float), n_resamples, 0.95, seed)
    return Selectivity(float(human.mean()), float(chosen.mean()), lo, hi, int(human.size), int(chosen.size))


def selectivity(
    human_maps: MapSource,
    model_maps: MapSource,
    dets: Sequence[DetectionRecord],
    crit: AttendedCriterion = AttendedCriterion(),
    n_resamples: int = 10000,
    seed: int = 0,
) -> Selectivity:
    """How often model-attended objects are also human-attended, against the human base rate."""
    return selectivity_from_flags(
        attended_flags(human_maps, dets, crit),
        attended_flags(model_maps, dets, crit),
        n_resamples,
        seed,
    )
