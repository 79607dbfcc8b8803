"""On-disk formats: map tensors, checkpoints and the CSV tables."""

from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hws import FrameWeight, FrameWeightTable
from .maps import ClipSequence, GazeSample, normalize
from .metrics import MetricReport

TENSOR_MAGIC = b"ATNM"
CHECKPOINT_MAGIC = b"ATCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s5I")


class FormatError(ValueError):
    """A file does not match its declared format."""


# -- map tensor files -----------------------------------------------------------


def write_tensor(path, array: np.ndarray) -> None:
    """Write ``(n_frames, n_channels, height, width)`` as little-endian float32."""
    a = np.asarray(array)
    if a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4:
        raise ValueError(f"tensor must be 3-D or 4-D, got shape {a.shape}")
    header = _HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, *a.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a map tensor file into a float64 array ``(frames, channels, height, width)``."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, c, h, w = _HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * c * h * w
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} bytes, header implies {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite values")
    return values.reshape(n, c, h, w)


def write_clip(path, clip: ClipSequence) -> None:
    write_tensor(path, clip.stack)


def read_clip(path, clip_id: str | None = None, fps: float = 3.0) -> ClipSequence:
    """Read a single-channel tensor file as a clip; frames are renormalized after float32 storage."""
    path = Path(path)
    t = read_tensor(path)
    if t.shape[1] != 1:
        raise FormatError(f"{path}: attention maps need n_channels=1, got {t.shape[1]}")
    try:
        maps = tuple(normalize(f) for f in t[:, 0])
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from None
    return ClipSequence(clip_id or path.stem, maps, fps)


# -- checkpoints ------------------------------------------------------------------


def write_checkpoint(path, blocks: dict[str, np.ndarray]) -> None:
    """Named float32 blocks after a ``ATCK`` magic and version word."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, values in blocks.items():
            raw = name.encode("utf-8")
            flat = np.ascontiguousarray(np.asarray(values).ravel(), dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", flat.size))
            fh.write(flat.tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        try:
            (nlen,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (count,) = struct.unpack_from("<I", data, pos)
            pos += 4
        except (struct.error, UnicodeDecodeError) as err:
            raise FormatError(f"{path}: corrupt block header at byte {pos}: {err}") from None
        end = pos + 4 * count
        if end > len(data):
            raise FormatError(f"{path}: block {name!r} runs past end of file")
        out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float64)
        pos = end
    return out


# -- CSV tables -------------------------------------------------------------------

GAZE_HEADER = ["clip_id", "frame_idx", "observer_id", "x", "y"]
WEIGHT_HEADER = ["clip_id", "frame_idx", "d_kl", "weight"]
METRIC_HEADER = ["metric", "clip_id", "frame_idx", "value", "ci_low", "ci_high"]
OBJECT_HEADER = ["category", "n", "proportion", "ci_low", "ci_high"]
DETECTION_HEADER = ["clip_id", "frame_idx", "category", "x_min", "y_min", "x_max", "y_max"]
MANIFEST_HEADER = ["path", "sha256", "bytes"]


def _fmt(x: float) -> str:
    return repr(float(x))


def _rows(path, header: Sequence[str]) -> list[dict[str, str]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        reader = csv.DictReader(lines)
        if reader.fieldnames is None or list(reader.fieldnames)[:len(header)] != list(header):
            raise FormatError(f"{path}: expected header {','.join(header)}, got {reader.fieldnames}")
        return list(reader)


def write_gazes(path, samples: Iterable[GazeSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GAZE_HEADER)
        for s in samples:
            w.writerow([s.clip_id, s.frame_idx, s.observer_id, _fmt(s.x), _fmt(s.y)])


def read_gazes(path) -> list[GazeSample]:
    out = []
    for n, r in enumerate(_rows(path, GAZE_HEADER), start=2):
        try:
            out.append(GazeSample(r["clip_id"], int(r["frame_idx"]), r["observer_id"],
                                  float(r["x"]), float(r["y"])))
        except (TypeError, ValueError) as err:
            raise FormatError(f"{path}:{n}: {err}") from None
    return out


def write_weight_table(path, table: FrameWeightTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WEIGHT_HEADER)
        for e in table.entries:
            w.writerow([e.clip_id, e.frame_idx, _fmt(e.d_kl), _fmt(e.weight)])


def read_weight_table(path) -> FrameWeightTable:
    entries = []
    for n, r in enumerate(_rows(path, WEIGHT_HEADER), start=2):
        try:
            entries.append(FrameWeight(r["clip_id"], int(r["frame_idx"]),
                                       float(r["d_kl"]), float(r["weight"])))
        except (TypeError, ValueError) as err:
            raise FormatError(f"{path}:{n}: {err}") from None
    return FrameWeightTable(entries)


def write_metric_reports(path, reports: Sequence[MetricReport]) -> None:
    """Per-frame rows then one ``ALL`` summary row per metric.

    KL values are in nats; summary means are frame-weighted.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# kl in nats; means are frame-weighted; CI = 95% percentile bootstrap\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for rep in reports:
            for cid, fidx, v in rep.per_frame:
                w.writerow([rep.metric_name, cid, fidx, _fmt(v), "", ""])
            w.writerow([rep.metric_name, "ALL", "", _fmt(rep.mean), _fmt(rep.ci_low), _fmt(rep.ci_high)])


def read_metric_reports(path) -> list[MetricReport]:
    per: dict[str, list[tuple[str, int, float]]] = {}
    summary: dict[str, tuple[float, float, float]] = {}
    for r in _rows(path, METRIC_HEADER):
        if r["clip_id"] == "ALL":
            summary[r["metric"]] = (float(r["value"]), float(r["ci_low"]), float(r["ci_high"]))
        else:
            per.setdefault(r["metric"], []).append((r["clip_id"], int(r["frame_idx"]), float(r["value"])))
    return [MetricReport(m, per.get(m, []), *summary[m]) for m in summary]


def write_object_report(path, rows: dict[str, tuple[int, float, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBJECT_HEADER)
        for cat, (n, prop, lo, hi) in rows.items():
            w.writerow([cat, n, _fmt(prop), _fmt(lo), _fmt(hi)])


def write_detections(path, dets) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_HEADER)
        for d in dets:
            w.writerow([d.clip_id, d.frame_idx, d.category, *(_fmt(v) for v in d.bbox)])


def read_detections(path):
    from .objects import DetectionRecord

    out = []
    for n, r in enumerate(_rows(path, DETECTION_HEADER), start=2):
        try:
            bbox = tuple(float(r[k]) for k in ("x_min", "y_min", "x_max", "y_max"))
            out.append(DetectionRecord(r["clip_id"], int(r["frame_idx"]), r["category"], bbox))
        except (TypeError, ValueError) as err:
            raise FormatError(f"{path}:{n}: {err}") from None
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, root, files: Iterable[Path]) -> list[tuple[str, str, int]]:
    """CSV of ``path,sha256,bytes`` for ``files``, paths relative to ``root``, sorted."""
    root = Path(root)
    rows = sorted(
        (Path(f).relative_to(root).as_posix(), sha256_file(f), Path(f).stat().st_size) for f in files
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return rows


def read_manifest(path) -> list[tuple[str, str, int]]:
    return [(r["path"], r["sha256"], int(r["bytes"])) for r in _rows(path, MANIFEST_HEADER)]


def save_predictor(path, params) -> None:
    """Checkpoint with the layer configuration stored as leading ``config.*`` blocks."""
    cfg = params.config
    blocks = {
        "config.channels": np.asarray(cfg.channels, dtype=np.float64),
        "config.hidden": np.asarray([cfg.hidden], dtype=np.float64),
        "config.sigma": np.asarray([cfg.sigma], dtype=np.float64),
    }
    blocks.update(params.arrays)
    write_checkpoint(path, blocks)


def load_predictor(path):
    from .predictor import PredictorConfig, PredictorParams

    blocks = read_checkpoint(path)
    try:
        cfg = PredictorConfig(
            tuple(int(round(c)) for c in blocks.pop("config.channels")),
            int(round(blocks.pop("config.hidden")[0])),
            float(blocks.pop("config.sigma")[0]),
        )
    except KeyError as err:
        raise FormatError(f"{path}: missing block {err}") from None
    shapes = cfg.shapes()
    arrays = {}
    for name, shape in shapes.items():
        if name not in blocks:
            raise FormatError(f"{path}: missing parameter block {name!r}")
        flat = blocks.pop(name)
        if flat.size != int(np.prod(shape)):
            raise FormatError(f"{path}: block {name!r} has {flat.size} values, expected {shape}")
        arrays[name] = flat.reshape(shape)
    if blocks:
        raise FormatError(f"{path}: unexpected blocks {sorted(blocks)}")
    return PredictorParams(cfg, arrays)
