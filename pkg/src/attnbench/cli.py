"""``attnbench`` command line."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import io
from .objects import AttendedCriterion, attended_flags, attended_proportions, selectivity_from_flags
from .pipeline import (
    HWSConfig,
    RunConfig,
    StageError,
    aggregate_corpus,
    build_weight_table,
    dump_config,
    evaluate_predictions,
    load_clips,
    load_config,
    load_features,
    load_fixations,
    predict_clips,
    run_all,
    write_eval_table,
)
from .predictor import TrainingClip, baseline_mean_predictor, train


class _Group(click.Group):
    """Reports data and file errors as one-line messages instead of tracebacks."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (ValueError, OSError, KeyError, StageError) as err:
            raise click.ClickException(str(err)) from err


@click.group(cls=_Group)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Run configuration file; supplies defaults for every subcommand.")
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--threads", type=int, default=None, help="Worker threads for per-clip stages.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, config_path, seed, threads, verbose):
    """Driver-attention maps: aggregation, metrics, HWS and a ConvLSTM predictor."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if threads is not None:
        cfg = replace(cfg, threads=threads)
    ctx.obj = cfg


def _cfg(ctx) -> RunConfig:
    return ctx.obj


@cli.command("config")
@click.option("--dump", is_flag=True, help="Print the effective configuration.")
@click.pass_context
def config_cmd(ctx, dump):
    """Show configuration defaults."""
    click.echo(dump_config(_cfg(ctx)))


@cli.command("synth")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-clips", type=int, default=None)
@click.option("--frames", type=int, default=None, help="Frames per clip.")
@click.option("--event-rate", type=float, default=None)
@click.pass_context
def synth_cmd(ctx, out, n_clips, frames, event_rate):
    """Write a synthetic corpus (gaze CSV, features, targets, detections)."""
    from .synth import SyntheticSpec, synth_generate, write_corpus

    cfg = _cfg(ctx)
    spec = cfg.synth or SyntheticSpec()
    updates = {"seed": cfg.seed, "width": cfg.grid.width, "height": cfg.grid.height,
               "fps": cfg.grid.fps, "sigma": cfg.grid.sigma}
    if n_clips is not None:
        updates["n_clips"] = n_clips
    if frames is not None:
        updates["frames_per_clip"] = frames
    if event_rate is not None:
        updates["event_rate"] = event_rate
    files = write_corpus(synth_generate(replace(spec, **updates)), out)
    click.echo(f"wrote {len(files)} files to {out}")


@cli.command("aggregate")
@click.option("--gaze", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directory for map files.")
@click.option("--fixations-out", type=click.Path(file_okay=False), default=None)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--sigma", type=float, default=None)
@click.pass_context
def aggregate_cmd(ctx, gaze, out, fixations_out, width, height, sigma):
    """Aggregate gaze samples into one attention-map file per clip."""
    cfg = _cfg(ctx)
    grid = cfg.grid
    grid = replace(grid, width=width or grid.width, height=height or grid.height,
                   sigma=sigma or grid.sigma)
    clips, fix = aggregate_corpus(gaze, grid, cfg.threads)
    Path(out).mkdir(parents=True, exist_ok=True)
    for clip in clips:
        io.write_clip(Path(out) / f"{clip.clip_id}.atnm", clip)
    if fixations_out:
        Path(fixations_out).mkdir(parents=True, exist_ok=True)
        for cid, mask in fix.items():
            io.write_tensor(Path(fixations_out) / f"{cid}.atnm", mask.astype(np.float32))
    click.echo(f"aggregated {len(clips)} clips")


@cli.command("hws")
@click.option("--clips", "clips_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--bin-width", type=float, default=None)
@click.option("--w-low", type=float, default=None)
@click.option("--w-high", type=float, default=None)
@click.option("--head-s", type=float, default=None)
@click.option("--tail-s", type=float, default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def hws_cmd(ctx, clips_dir, bin_width, w_low, w_high, head_s, tail_s, out):
    """Compute the per-frame HWS weight table."""
    cfg = _cfg(ctx)
    h = cfg.hws
    h = HWSConfig(
        bin_width if bin_width is not None else h.bin_width,
        w_low if w_low is not None else h.w_low,
        w_high if w_high is not None else h.w_high,
        head_s if head_s is not None else h.head_s,
        tail_s if tail_s is not None else h.tail_s,
    )
    table = build_weight_table(load_clips(clips_dir, cfg.grid.fps), h)
    io.write_weight_table(out, table)
    click.echo(f"wrote {len(table.entries)} frame weights to {out}")


@cli.command("train")
@click.option("--features", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--targets", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--sampler", type=click.Choice(["uniform", "hws"]), default="uniform", show_default=True)
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--iters", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--losses-out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def train_cmd(ctx, features, targets, sampler, weights, iters, lr, out, losses_out):
    """Train the predictor and write an ATCK checkpoint."""
    cfg = _cfg(ctx)
    if sampler == "hws" and weights is None:
        raise click.UsageError("--sampler hws requires --weights")
    clips = load_clips(targets, cfg.grid.fps)
    feats = load_features(features, [c.clip_id for c in clips])
    data = [TrainingClip(c.clip_id, feats[c.clip_id], c) for c in clips]
    opt = cfg.optimizer
    if iters is not None:
        opt = replace(opt, iterations=iters)
    if lr is not None:
        opt = replace(opt, learning_rate=lr)
    model = replace(cfg.model, channels=(feats[clips[0].clip_id].shape[1],) + cfg.model.channels[1:])
    table = io.read_weight_table(weights) if weights else None
    res = train(data, opt, sampler=sampler, table=table, dropout=cfg.dropout, seed=cfg.seed,
                model_config=model)
    io.save_predictor(out, res.params)
    if losses_out:
        with open(losses_out, "w", encoding="utf-8") as fh:
            fh.write("iteration,loss\n")
            for i, v in enumerate(res.losses, start=1):
                fh.write(f"{i},{v!r}\n")
    click.echo(f"trained {opt.iterations} iterations; final loss {res.losses[-1]:.4f}"
               if res.losses else "trained 0 iterations")


@cli.command("predict")
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--features", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def predict_cmd(model, features, out):
    """Write predicted attention maps for every feature file."""
    params = io.load_predictor(model)
    feats = load_features(features)
    Path(out).mkdir(parents=True, exist_ok=True)
    for cid, probs in predict_clips(params, feats, sorted(feats)).items():
        io.write_tensor(Path(out) / f"{cid}.atnm", probs)
    click.echo(f"predicted {len(feats)} clips")


@cli.command("eval")
@click.option("--targets", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--predictions", "pred_dirs", multiple=True, type=click.Path(exists=True, file_okay=False),
              help="Prediction directory; repeatable. The directory name labels the model.")
@click.option("--fixations", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--train-targets", type=click.Path(exists=True, file_okay=False), default=None,
              help="Training maps for the mean-map baseline.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_context
def eval_cmd(ctx, targets, pred_dirs, fixations, train_targets, out):
    """Metric reports for {baseline, models} x {all frames, non-trivial frames}."""
    cfg = _cfg(ctx)
    if not pred_dirs and not train_targets:
        raise click.UsageError("give at least one --predictions directory or --train-targets")
    gt = load_clips(targets, cfg.grid.fps)
    ids = [c.clip_id for c in gt]
    fix = load_fixations(fixations, ids) if fixations else None
    preds = {}
    if train_targets:
        base = baseline_mean_predictor(load_clips(train_targets, cfg.grid.fps)).values
        preds["baseline"] = {c.clip_id: np.broadcast_to(base, c.stack.shape) for c in gt}
    for d in pred_dirs:
        preds[Path(d).name] = {c.clip_id: c.stack for c in load_clips(d, cfg.grid.fps, ids)}
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for name, p in preds.items():
        results[name] = evaluate_predictions(gt, p, fix, cfg.eval.nontrivial_threshold,
                                             cfg.eval.n_resamples, cfg.seed)
        for subset, reports in results[name].items():
            if reports:
                io.write_metric_reports(out_dir / f"{name}_{subset}.csv", reports)
    write_eval_table(out_dir / "table.csv", results)
    for name, subsets in results.items():
        for subset, reports in subsets.items():
            for r in reports:
                click.echo(f"{name:>10} {subset:>10} {r.metric_name:>4} {r.mean:.4f} "
                           f"({r.ci_low:.4f}, {r.ci_high:.4f})")


@cli.command("objects")
@click.option("--detections", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--maps", "maps_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Human attention maps.")
@click.option("--model-maps", type=click.Path(exists=True, file_okay=False), default=None,
              help="Model maps; enables the pedestrian selectivity analysis.")
@click.option("--threshold", type=float, default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def objects_cmd(ctx, detections, maps_dir, model_maps, threshold, out):
    """Attended-object proportions per category."""
    cfg = _cfg(ctx)
    crit = AttendedCriterion(threshold if threshold is not None else cfg.eval.object_threshold)
    dets = io.read_detections(detections)
    ids = sorted({d.clip_id for d in dets})

    def frames(directory):
        out_maps = {}
        for clip in load_clips(directory, cfg.grid.fps, ids):
            for t, m in enumerate(clip.maps):
                out_maps[(clip.clip_id, t)] = m.values
        return out_maps

    src = frames(model_maps) if model_maps else frames(maps_dir)
    rows = attended_proportions(src, dets, crit, cfg.eval.n_resamples, cfg.seed)
    io.write_object_report(out, rows)
    for cat, (n, prop, lo, hi) in rows.items():
        click.echo(f"{cat:>10} n={n:<6d} {prop:.3f} ({lo:.3f}, {hi:.3f})")
    if model_maps:
        peds = [d for d in dets if d.category == "pedestrian"]
        if peds:
            sel = selectivity_from_flags(attended_flags(frames(maps_dir), peds, crit),
                                         attended_flags(src, peds, crit),
                                         cfg.eval.n_resamples, cfg.seed)
            click.echo(f"pedestrian selectivity: base {sel.base_rate:.3f}, selected "
                       f"{sel.selected_rate:.3f} ({sel.ci_low:.3f}, {sel.ci_high:.3f})")


@cli.command("run")
@click.pass_context
def run_cmd(ctx):
    """Run the whole pipeline from the --config file and write a manifest."""
    manifest = run_all(_cfg(ctx))
    click.echo(f"manifest: {manifest}")


def main():
    cli()


if __name__ == "__main__":
    main()
