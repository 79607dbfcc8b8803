"""Run configuration and the end-to-end pipeline.

The configuration is an INI-style file (``key = value`` under ``[section]``
headers).  ``run_all`` chains aggregation, HWS weighting, training with both
samplers, prediction, evaluation and object analysis, then writes a manifest
of every produced file with its SHA-256.
"""

from __future__ import annotations

import configparser
import logging
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .hws import FrameWeightTable, assign_weights, fit_weight_function, frame_divergences
from .maps import ClipSequence, SmoothingConfig, aggregate_clip, group_gazes
from .metrics import METRICS, FixationMask, MetricReport, metric_report, nontrivial_subset, score_frame
from .objects import AttendedCriterion, attended_flags, attended_proportions, selectivity_from_flags
from .predictor import (
    DropoutConfig,
    OptimizerConfig,
    PredictorConfig,
    TrainingClip,
    baseline_mean_predictor,
    forward,
    train,
)
from .synth import SyntheticSpec, synth_generate, write_corpus

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class GridConfig:
    width: int = 16
    height: int = 9
    fps: float = 3.0
    sigma: float = 1.0


@dataclass(frozen=True)
class HWSConfig:
    bin_width: float = 0.1
    w_low: float = 0.2
    w_high: float | None = None
    head_s: float = 1.0
    tail_s: float = 0.5


@dataclass(frozen=True)
class EvalConfig:
    nontrivial_threshold: float = 2.0
    n_resamples: int = 10000
    test_fraction: float = 0.25
    object_threshold: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig = GridConfig()
    hws: HWSConfig = HWSConfig()
    optimizer: OptimizerConfig = OptimizerConfig(learning_rate=0.001, iterations=600)
    dropout: DropoutConfig = DropoutConfig()
    model: PredictorConfig = PredictorConfig()
    eval: EvalConfig = EvalConfig()
    synth: SyntheticSpec | None = SyntheticSpec(n_clips=32)
    seed: int = 0
    corpus: str = "corpus"
    out: str = "run"
    threads: int = 1

    def __post_init__(self):
        if Path(self.corpus).resolve() == Path(self.out).resolve():
            raise ValueError("corpus and output directories must differ")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


_SECTIONS = {
    "grid": GridConfig,
    "hws": HWSConfig,
    "optimizer": OptimizerConfig,
    "dropout": DropoutConfig,
    "model": PredictorConfig,
    "eval": EvalConfig,
    "synth": SyntheticSpec,
}


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(raw: str, current, name: str):
    raw = raw.strip()
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None:
        return None if raw == "" else float(raw)
    return raw


def dump_config(cfg: RunConfig) -> str:
    lines = ["[run]", f"seed = {cfg.seed}", f"corpus = {cfg.corpus}", f"out = {cfg.out}",
             f"threads = {cfg.threads}", ""]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        if obj is None:
            continue
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path=None, text: str | None = None) -> RunConfig:
    """Read a config file; missing keys keep their defaults.

    The corpus is synthesized only when a ``[synth]`` section is present.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    base = RunConfig()
    kwargs = {}
    for section, cls in _SECTIONS.items():
        if not parser.has_section(section):
            if section == "synth":
                kwargs["synth"] = None
            continue
        current = getattr(base, section) or cls()
        known = {f.name for f in fields(current)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            updates[key] = _parse_value(raw, getattr(current, key), key)
        kwargs[section] = replace(current, **updates)
    if parser.has_section("run"):
        run = parser["run"]
        for key in run:
            if key not in ("seed", "corpus", "out", "threads"):
                raise ValueError(f"unknown key {key!r} in section [run]")
        if "seed" in run:
            kwargs["seed"] = int(run["seed"])
        if "threads" in run:
            kwargs["threads"] = int(run["threads"])
        for key in ("corpus", "out"):
            if key in run:
                kwargs[key] = run[key].strip()
    if path is not None:
        root = Path(path).resolve().parent
        for key in ("corpus", "out"):
            value = kwargs.get(key, getattr(base, key))
            if not Path(value).is_absolute():
                kwargs[key] = str(root / value)
    return RunConfig(**kwargs)


# -- corpus loading -------------------------------------------------------------------


def list_tensors(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"missing directory {d}")
    return {p.stem: p for p in sorted(d.glob("*.atnm"))}


def load_clips(directory, fps: float = 3.0, ids: Sequence[str] | None = None) -> list[ClipSequence]:
    files = list_tensors(directory)
    ids = sorted(files) if ids is None else ids
    missing = [i for i in ids if i not in files]
    if missing:
        raise FileNotFoundError(f"missing map files in {directory}: {', '.join(missing)}")
    return [io.read_clip(files[i], i, fps) for i in ids]


def load_features(directory, ids: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    files = list_tensors(directory)
    ids = sorted(files) if ids is None else ids
    missing = [i for i in ids if i not in files]
    if missing:
        raise FileNotFoundError(f"missing feature files in {directory}: {', '.join(missing)}")
    return {i: io.read_tensor(files[i]) for i in ids}


def load_fixations(directory, ids: Sequence[str]) -> dict[str, np.ndarray]:
    files = list_tensors(directory)
    out = {}
    for i in ids:
        if i not in files:
            raise FileNotFoundError(f"missing fixation file {Path(directory) / (i + '.atnm')}")
        t = io.read_tensor(files[i])
        if not np.all((t == 0) | (t == 1)):
            raise io.FormatError(f"{files[i]}: fixation values must be 0.0 or 1.0")
        out[i] = t[:, 0] == 1
    return out


def aggregate_corpus(gaze_csv, grid: GridConfig, threads: int = 1):
    """Gaze CSV -> (clips, fixation masks); clip order is sorted by id."""
    grouped = group_gazes(io.read_gazes(gaze_csv))
    smoothing = SmoothingConfig(grid.sigma)
    ids = sorted(grouped)

    def one(cid):
        clip = aggregate_clip(cid, grouped[cid], grid.width, grid.height, smoothing, grid.fps)
        fix = np.zeros((len(clip), grid.height, grid.width), dtype=bool)
        for t, samples in grouped[cid].items():
            for s in samples:
                fix[t, int(s.y * grid.height), int(s.x * grid.width)] = True
        return clip, fix

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(one, ids))
    return [r[0] for r in results], {cid: r[1] for cid, r in zip(ids, results)}


def split_ids(ids: Sequence[str], test_fraction: float) -> tuple[list[str], list[str]]:
    """Deterministic split: the last ``ceil(fraction * n)`` sorted ids form the test set."""
    ids = sorted(ids)
    n_test = max(1, math.ceil(test_fraction * len(ids)))
    if n_test >= len(ids):
        raise ValueError(f"cannot split {len(ids)} clips with test_fraction {test_fraction}")
    return ids[:-n_test], ids[-n_test:]


def build_weight_table(clips: Sequence[ClipSequence], hws: HWSConfig) -> FrameWeightTable:
    divs = [d for clip in clips for _, d in frame_divergences(clip)]
    wf = fit_weight_function(divs, hws.bin_width, hws.w_low, hws.w_high)
    return assign_weights(clips, wf, hws.head_s, hws.tail_s)


# -- evaluation -------------------------------------------------------------------------


def evaluate_predictions(
    gt_clips: Sequence[ClipSequence],
    predictions: dict[str, np.ndarray],
    fixations: dict[str, np.ndarray] | None = None,
    threshold: float = 2.0,
    n_resamples: int = 10000,
    seed: int = 0,
) -> dict[str, list[MetricReport]]:
    """Metric reports over all frames and over the non-trivial subset.

    ``predictions`` maps clip id to a ``(T, H, W)`` array.  NSS and AUC are
    included only when fixation masks are supplied.  Returns
    ``{"all": [...], "nontrivial": [...]}``; a subset with no frames maps to
    an empty list.
    """
    names = [m for m in METRICS if fixations is not None or m in ("kl", "cc")]
    keep = set(nontrivial_subset(gt_clips, threshold))
    scores: dict[str, dict[str, list]] = {s: {m: [] for m in names} for s in ("all", "nontrivial")}
    keys: dict[str, list] = {"all": [], "nontrivial": []}
    for clip in gt_clips:
        pred = np.asarray(predictions[clip.clip_id], dtype=np.float64)
        if pred.shape != clip.stack.shape:
            raise ValueError(f"clip {clip.clip_id!r}: prediction shape {pred.shape} != {clip.stack.shape}")
        for t, gt in enumerate(clip.maps):
            mask = FixationMask(fixations[clip.clip_id][t]) if fixations is not None else None
            vals = {m: score_frame(m, gt, pred[t], mask) for m in names}
            subsets = ["all"] + (["nontrivial"] if (clip.clip_id, t) in keep else [])
            for s in subsets:
                keys[s].append((clip.clip_id, t))
                for m in names:
                    scores[s][m].append(vals[m])
    out = {}
    for s in ("all", "nontrivial"):
        out[s] = [metric_report(m, keys[s], scores[s][m], n_resamples, 0.95, seed)
                  for m in names] if keys[s] else []
    return out


def write_eval_table(path, results: dict[str, dict[str, list[MetricReport]]]) -> None:
    """Summary grid: one row per (predictor, subset, metric)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# kl in nats; means are frame-weighted; CI = 95% percentile bootstrap\n")
        fh.write("predictor,subset,metric,n_frames,mean,ci_low,ci_high\n")
        for predictor, subsets in results.items():
            for subset, reports in subsets.items():
                for r in reports:
                    fh.write(f"{predictor},{subset},{r.metric_name},{len(r.per_frame)},"
                             f"{r.mean!r},{r.ci_low!r},{r.ci_high!r}\n")


def read_eval_table(path) -> dict[tuple[str, str, str], tuple[float, float, float]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        rows = [line.strip().split(",") for line in fh if not line.startswith("#")]
    for row in rows[1:]:
        out[(row[0], row[1], row[2])] = tuple(float(x) for x in row[4:7])
    return out


def predict_clips(params, features: dict[str, np.ndarray], ids: Sequence[str]) -> dict[str, np.ndarray]:
    return {cid: forward(params, features[cid])[0] for cid in ids}


def pipeline_eval(cfg: RunConfig) -> dict[str, dict[str, list[MetricReport]]]:
    """Evaluate the baseline and every trained model on the run's test clips.

    Expects the layout written by ``run_all``: maps, fixations, split, models.
    """
    out = Path(cfg.out)
    required = [out / "maps", out / "fixations", out / "split.csv"]
    missing = [str(p) for p in required if not p.exists()]
    models = sorted(out.glob("model_*.atck"))
    if not models:
        missing.append(str(out / "model_*.atck"))
    if missing:
        raise FileNotFoundError("missing inputs: " + ", ".join(missing))
    train_ids, test_ids = read_split(out / "split.csv")
    test_clips = load_clips(out / "maps", cfg.grid.fps, test_ids)
    train_clips = load_clips(out / "maps", cfg.grid.fps, train_ids)
    fixations = load_fixations(out / "fixations", test_ids)
    features = load_features(Path(cfg.corpus) / "features", test_ids)
    base = baseline_mean_predictor(train_clips).values
    preds = {"baseline": {c.clip_id: np.broadcast_to(base, c.stack.shape) for c in test_clips}}
    for path in models:
        name = path.stem.removeprefix("model_")
        preds[name] = predict_clips(io.load_predictor(path), features, test_ids)
        pred_dir = out / "predictions" / name
        pred_dir.mkdir(parents=True, exist_ok=True)
        for cid, p in preds[name].items():
            io.write_tensor(pred_dir / f"{cid}.atnm", p)
    results = {}
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    for name, p in preds.items():
        results[name] = evaluate_predictions(test_clips, p, fixations, cfg.eval.nontrivial_threshold,
                                             cfg.eval.n_resamples, cfg.seed)
        for subset, reports in results[name].items():
            if reports:
                io.write_metric_reports(eval_dir / f"{name}_{subset}.csv", reports)
    write_eval_table(eval_dir / "table.csv", results)
    return results


def write_split(path, train_ids, test_ids) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("clip_id,split\n")
        for cid in train_ids:
            fh.write(f"{cid},train\n")
        for cid in test_ids:
            fh.write(f"{cid},test\n")


def read_split(path) -> tuple[list[str], list[str]]:
    train_ids, test_ids = [], []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            cid, split = line.strip().split(",")
            (train_ids if split == "train" else test_ids).append(cid)
    return train_ids, test_ids


# -- run_all ----------------------------------------------------------------------------


def _stage(name: str, fn, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except Exception as err:  # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(name, err) from err


def _write_losses(path, losses: Sequence[float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for i, v in enumerate(losses, start=1):
            fh.write(f"{i},{v!r}\n")


def run_objects(cfg: RunConfig, out: Path) -> None:
    dets = io.read_detections(Path(cfg.corpus) / "detections.csv")
    _, test_ids = read_split(out / "split.csv")
    test = set(test_ids)
    dets = [d for d in dets if d.clip_id in test]
    crit = AttendedCriterion(cfg.eval.object_threshold)
    human = {}
    for clip in load_clips(out / "maps", cfg.grid.fps, test_ids):
        for t, m in enumerate(clip.maps):
            human[(clip.clip_id, t)] = m.values
    sources = {"human": human}
    for pred_dir in sorted((out / "predictions").iterdir()):
        maps = {}
        for cid in test_ids:
            t = io.read_tensor(pred_dir / f"{cid}.atnm")[:, 0]
            for i, frame in enumerate(t):
                maps[(cid, i)] = frame
        sources[pred_dir.name] = maps
    obj_dir = out / "objects"
    obj_dir.mkdir(parents=True, exist_ok=True)
    human_flags = attended_flags(human, dets, crit)
    peds = np.array([d.category == "pedestrian" for d in dets])
    with open(obj_dir / "selectivity.csv", "w", encoding="utf-8") as fh:
        fh.write("source,category,n_total,n_selected,base_rate,selected_rate,ci_low,ci_high\n")
        for name, maps in sources.items():
            rows = attended_proportions(maps, dets, crit, cfg.eval.n_resamples, cfg.seed)
            io.write_object_report(obj_dir / f"{name}.csv", rows)
            if name == "human" or not peds.any():
                continue
            flags = attended_flags(maps, dets, crit)
            try:
                sel = selectivity_from_flags(human_flags[peds], flags[peds], cfg.eval.n_resamples, cfg.seed)
            except ValueError:
                continue
            fh.write(f"{name},pedestrian,{sel.n_total},{sel.n_selected},{sel.base_rate!r},"
                     f"{sel.selected_rate!r},{sel.ci_low!r},{sel.ci_high!r}\n")


def run_all(cfg: RunConfig) -> Path:
    """Execute every stage and return the manifest path."""
    out = Path(cfg.out)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    corpus = Path(cfg.corpus)
    if cfg.synth is not None:
        spec = replace(cfg.synth, width=cfg.grid.width, height=cfg.grid.height,
                       fps=cfg.grid.fps, sigma=cfg.grid.sigma)
        if corpus.exists():
            shutil.rmtree(corpus)
        _stage("synth", lambda: write_corpus(synth_generate(spec), corpus))
    needed = [corpus / "gaze.csv", corpus / "features", corpus / "detections.csv"]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise StageError("inputs", FileNotFoundError("missing inputs: " + ", ".join(missing)))

    def aggregate():
        clips, fix = aggregate_corpus(corpus / "gaze.csv", cfg.grid, cfg.threads)
        for sub in ("maps", "fixations"):
            (out / sub).mkdir()
        for clip in clips:
            io.write_clip(out / "maps" / f"{clip.clip_id}.atnm", clip)
            io.write_tensor(out / "fixations" / f"{clip.clip_id}.atnm", fix[clip.clip_id].astype(np.float32))
        train_ids, test_ids = split_ids([c.clip_id for c in clips], cfg.eval.test_fraction)
        write_split(out / "split.csv", train_ids, test_ids)
        return train_ids

    train_ids = _stage("aggregate", aggregate)

    def weights():
        clips = load_clips(out / "maps", cfg.grid.fps, train_ids)
        table = build_weight_table(clips, cfg.hws)
        io.write_weight_table(out / "weights.csv", table)
        return clips, table

    train_clips, table = _stage("hws", weights)

    def fit(sampler):
        feats = load_features(corpus / "features", train_ids)
        data = [TrainingClip(c.clip_id, feats[c.clip_id], c) for c in train_clips]
        res = train(data, cfg.optimizer, sampler=sampler, table=table, dropout=cfg.dropout,
                    seed=cfg.seed, model_config=cfg.model)
        io.save_predictor(out / f"model_{sampler}.atck", res.params)
        _write_losses(out / f"losses_{sampler}.csv", res.losses)

    _stage("train-uniform", fit, "uniform")
    _stage("train-hws", fit, "hws")
    _stage("eval", pipeline_eval, cfg)
    _stage("objects", run_objects, cfg, out)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    files = [p for p in sorted(out.rglob("*")) if p.is_file()]
    if cfg.synth is not None and not corpus.resolve().is_relative_to(out.resolve()):
        files += [p for p in sorted(corpus.rglob("*")) if p.is_file()]
        root = Path(_common_root([out, corpus]))
    else:
        root = out
    manifest = out / "manifest.csv"
    io.write_manifest(manifest, root, files)
    return manifest


def _common_root(paths: Sequence[Path]) -> str:
    return os.path.commonpath([str(p.resolve()) for p in paths])
