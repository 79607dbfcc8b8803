"""Synthetic driving-attention corpus.

Each clip has a centre-biased default attention field that drifts slightly
from frame to frame.  Event frames add a narrow secondary peak at a random
peripheral location.  Observers' gaze samples are drawn from the latent field
and aggregated into target maps exactly as real gaze data would be.

Feature tensors are a fixed linear encoding of the latent field's two parts
(centre and event) plus Gaussian noise, so a predictor can learn the mapping.
The encoding is not meant to resemble real CNN features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .maps import ClipSequence, GazeSample, SmoothingConfig, aggregate_gazes
from .objects import DetectionRecord


@dataclass(frozen=True)
class SyntheticSpec:
    n_clips: int = 24
    frames_per_clip: int = 30
    event_rate: float = 0.05
    feature_channels: int = 8
    noise: float = 0.3
    seed: int = 0
    width: int = 16
    height: int = 9
    fps: float = 3.0
    n_observers: int = 6
    samples_per_observer: int = 20
    sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.event_rate <= 1.0:
            raise ValueError(f"event_rate must be in [0, 1], got {self.event_rate}")
        if self.n_clips < 1 or self.frames_per_clip < 1:
            raise ValueError("need at least one clip with one frame")
        if self.feature_channels < 2:
            raise ValueError("need at least 2 feature channels")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    gazes: list[GazeSample]
    targets: list[ClipSequence]
    features: dict[str, np.ndarray]
    fixations: dict[str, np.ndarray]
    detections: list[DetectionRecord]
    events: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def clip_ids(self) -> list[str]:
        return [c.clip_id for c in self.targets]


def _blob(cx: float, cy: float, sx: float, sy: float, width: int, height: int) -> np.ndarray:
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    return np.exp(-0.5 * (((ys[:, None] - cy) / sy) ** 2 + ((xs[None, :] - cx) / sx) ** 2))


def feature_loadings(channels: int, seed: int) -> np.ndarray:
    """``(channels, 2)`` weights on the centre and event components."""
    rng = np.random.default_rng([seed, 7])
    a = np.zeros((channels, 2))
    half = channels // 2
    a[:half, 0] = rng.uniform(0.6, 1.4, half)
    a[:half, 1] = rng.uniform(0.0, 0.2, half)
    a[half:, 0] = rng.uniform(0.0, 0.2, channels - half)
    a[half:, 1] = rng.uniform(0.6, 1.4, channels - half)
    return a


def _box(cx: float, cy: float, bw: float, bh: float) -> tuple[float, float, float, float]:
    x0 = min(max(cx - bw / 2, 0.0), 1.0 - bw)
    y0 = min(max(cy - bh / 2, 0.0), 1.0 - bh)
    return (x0, y0, x0 + bw, y0 + bh)


def _peripheral_point(rng: np.random.Generator) -> tuple[float, float]:
    side = rng.integers(2)
    x = rng.uniform(0.06, 0.28) if side == 0 else rng.uniform(0.72, 0.94)
    return float(x), float(rng.uniform(0.3, 0.85))


def synth_generate(spec: SyntheticSpec) -> SyntheticCorpus:
    """Generate a corpus; the same spec always yields the same corpus."""
    w, h = spec.width, spec.height
    smoothing = SmoothingConfig(spec.sigma)
    loadings = feature_loadings(spec.feature_channels, spec.seed)
    clip_seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_clips)
    gazes: list[GazeSample] = []
    targets, detections = [], []
    features, fixations, events = {}, {}, {}
    n_samples = spec.n_observers * spec.samples_per_observer
    for k, ss in enumerate(clip_seeds):
        rng = np.random.default_rng(ss)
        cid = f"clip{k:04d}"
        cx, cy = 0.5 + rng.uniform(-0.06, 0.06), 0.45 + rng.uniform(-0.05, 0.05)
        maps, feats, fix = [], [], []
        is_event = rng.random(spec.frames_per_clip) < spec.event_rate
        for t in range(spec.frames_per_clip):
            fx = cx + rng.normal(0, 0.01)
            fy = cy + rng.normal(0, 0.01)
            centre = _blob(fx, fy, 0.10, 0.14, w, h)
            event = np.zeros_like(centre)
            lam = 0.0
            if is_event[t]:
                ex, ey = _peripheral_point(rng)
                event = _blob(ex, ey, 0.035, 0.06, w, h)
                lam = rng.uniform(0.7, 0.95)
            density = (1 - lam) * centre / centre.sum()
            if lam:
                density = density + lam * event / event.sum()
            density /= density.sum()

            cells = rng.choice(w * h, size=n_samples, p=density.ravel())
            jitter = rng.uniform(0.05, 0.95, (n_samples, 2))
            frame_samples = []
            for j, (cell, (jx, jy)) in enumerate(zip(cells, jitter)):
                row, col = divmod(int(cell), w)
                frame_samples.append(GazeSample(cid, t, f"obs{j // spec.samples_per_observer}",
                                                (col + jx) / w, (row + jy) / h))
            gazes.extend(frame_samples)
            maps.append(aggregate_gazes(frame_samples, w, h, smoothing))
            mask = np.zeros(w * h, dtype=bool)
            mask[cells] = True
            fix.append(mask.reshape(h, w))

            comp = np.stack([(1 - lam) * centre / centre.max(),
                             lam * event / event.max() if lam else event])
            feats.append(np.einsum("ck,khw->chw", loadings, comp)
                         + spec.noise * rng.standard_normal((spec.feature_channels, h, w)))

            detections.append(DetectionRecord(cid, t, "car", _box(fx, fy + 0.05, 0.16, 0.12)))
            if rng.random() < 0.5:
                px, py = _peripheral_point(rng)
                detections.append(DetectionRecord(cid, t, "pedestrian", _box(px, py, 0.05, 0.14)))
            if is_event[t]:
                cat = "pedestrian" if rng.random() < 0.7 else "cyclist"
                detections.append(DetectionRecord(cid, t, cat, _box(ex, ey, 0.06, 0.14)))
            elif rng.random() < 0.1:
                px, py = _peripheral_point(rng)
                detections.append(DetectionRecord(cid, t, "cyclist", _box(px, py, 0.06, 0.12)))
        targets.append(ClipSequence(cid, tuple(maps), spec.fps))
        features[cid] = np.stack(feats)
        fixations[cid] = np.stack(fix)
        events[cid] = is_event
    return SyntheticCorpus(spec, gazes, targets, features, fixations, detections, events)


def write_corpus(corpus: SyntheticCorpus, out_dir) -> list[Path]:
    """Write the corpus layout used by the CLI; returns the files written."""
    out = Path(out_dir)
    for sub in ("features", "targets", "fixations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    written = [out / "gaze.csv", out / "detections.csv", out / "events.csv"]
    io.write_gazes(written[0], corpus.gazes)
    io.write_detections(written[1], corpus.detections)
    with open(written[2], "w", encoding="utf-8") as fh:
        fh.write("clip_id,frame_idx\n")
        for cid in corpus.clip_ids:
            for t in np.flatnonzero(corpus.events[cid]):
                fh.write(f"{cid},{t}\n")
    for clip in corpus.targets:
        cid = clip.clip_id
        paths = [out / "features" / f"{cid}.atnm", out / "targets" / f"{cid}.atnm",
                 out / "fixations" / f"{cid}.atnm"]
        io.write_tensor(paths[0], corpus.features[cid])
        io.write_clip(paths[1], clip)
        io.write_tensor(paths[2], corpus.fixations[cid].astype(np.float32))
        written.extend(paths)
    return written
