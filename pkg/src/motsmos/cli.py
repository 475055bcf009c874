"""Command line interface: ``motsmos {synth,train,segment,eval,sweep}``.

Every config key can be given in a ``section.key = value`` file (``--config``)
and overridden with ``--section.key value``. Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from motsmos import autoencoder as ae
from motsmos import pipeline as pl
from motsmos.clustering import load_gmm, save_gmm
from motsmos.config import PipelineConfig, load_config, parse_lines
from motsmos.errors import ConfigError, DataError, NumericError
from motsmos.evaluation import sweep
from motsmos.ingest import save_labels
from motsmos.synthetic import preset, presets, write_scene

log = logging.getLogger("motsmos")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_HELP = {
    "data.frames": "directory of .bin frames (or containing velodyne/)",
    "data.poses": "optional KITTI pose file; frames are aligned to the first pose",
    "data.labels": "label directory (default: <frames>/labels if present)",
    "data.output": "output directory",
    "data.moving_labels": "comma-separated label values that mean 'moving'",
    "grid.m": "voxel edge length in meters",
    "grid.w": "occupancy window length in frames",
    "grid.r": "neighborhood radius in voxels",
    "model.channels": "conv channel plan c1,c2,c3 (default by radius)",
    "model.fc_hidden": "hidden dense layer width",
    "model.e": "embedding size",
    "model.seed": "the single seed all randomness derives from",
    "model.literal_relu": "also apply ReLU to the code and reconstruction layers",
    "train.batch": "minibatch size",
    "train.lr": "Adam learning rate",
    "train.epochs": "passes over the training features",
    "train.max_samples": "subsample training features to this many (0 = all)",
    "train.log_every": "steps per loss-log entry",
    "gmm.k": "mixture components",
    "gmm.sample_target": "embeddings sampled for the GMM fit",
    "gmm.first_n_frames": "frames (after warm-up) pooled for the GMM fit",
    "gmm.threshold": "cluster IoU needed to map a cluster to moving",
    "gmm.max_iter": "EM iteration cap",
    "gmm.tol": "EM stop when mean log-likelihood gains less than this",
    "gmm.var_floor": "lower bound on component variances",
    "gmm.reference_frame": "labeled frame used for the cluster mapping (-1 = first after warm-up)",
    "eval.ground_z": "points with z <= this are removed as ground",
    "eval.lift_rule": "point->voxel label rule: any | majority",
    "eval.warmup": "first frame used for fitting and evaluation (-1 = w-1)",
}


def _config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file of 'section.key = value' lines")
    group = parser.add_argument_group("config overrides")
    for key, value, _ in PipelineConfig().items():
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        group.add_argument(f"--{key}", dest=key, metavar="V", default=None, help=f"{_HELP.get(key, '')} [{value}]")


def _overrides(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if "." in k and v is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motsmos", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    sub_kw = dict(allow_abbrev=False)

    p = sub.add_parser("synth", **sub_kw, help="write a synthetic labeled scene")
    p.add_argument("--preset", default="mixed-intersection", choices=sorted(presets()))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--occlusion", action="store_true", help="cull points shadowed from the sensor")

    p = sub.add_parser("train", **sub_kw, help="train the autoencoder")
    _config_flags(p)
    p.add_argument("--model", help="model output path (default <output>/model.mae)")

    p = sub.add_parser("segment", **sub_kw, help="segment every frame into moving/static voxels")
    _config_flags(p)
    p.add_argument("--model", help="trained model (default <output>/model.mae)")
    p.add_argument("--gmm", help="fitted GMM with mapping; default: fit one (needs labels on the reference frame)")
    p.add_argument("--fit-gmm", action="store_true", help="fit the GMM even if --gmm is given, saving it there")
    p.add_argument("--point-labels", action="store_true", help="also write per-point label files")

    p = sub.add_parser("eval", **sub_kw, help="score voxel predictions against labels")
    _config_flags(p)
    p.add_argument("--predictions", help="prediction CSV (default <output>/predictions.csv)")

    p = sub.add_parser("sweep", **sub_kw, help="run the pipeline over a hyperparameter grid")
    _config_flags(p)
    p.add_argument("--grid", required=True, help="grid file: 'section.key = v1,v2' lines plus sweep.scenes / sweep.presets")
    return parser


def cmd_synth(args) -> int:
    spec = preset(args.preset, args.seed, args.frames)
    if args.occlusion:
        spec = replace(spec, occlusion=True)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        n = write_scene(spec, out)
        (out / "scene.cfg").write_text(f"data.frames = {out}\ndata.moving_labels = 1\n")
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    log.info("wrote %d frames of %s to %s", n, spec.name, out)
    print(n)
    return EXIT_OK


def _require_frames(cfg: PipelineConfig) -> None:
    if not cfg.data.frames:
        raise ConfigError("data.frames is not set")


def _output(cfg: PipelineConfig) -> Path:
    out = Path(cfg.data.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    _require_frames(cfg)
    frames = pl.load_sequence(cfg)
    out = _output(cfg)
    params, curve = pl.train_model(frames, cfg, progress=lambda s, v: log.info("step %d loss %.6f", s, v))
    model_path = Path(args.model) if args.model else out / "model.mae"
    ae.save_model(model_path, params)
    ae.write_loss_curve(out / "loss.txt", curve)
    log.info("model written to %s", model_path)
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    _require_frames(cfg)
    out = _output(cfg)
    model_path = Path(args.model) if args.model else out / "model.mae"
    if not model_path.is_file():
        raise DataError(f"model file {model_path} not found; run train first")
    params = ae.load_model(model_path, np.float32)
    if params.arch != pl.architecture(cfg):
        raise ConfigError(f"model architecture {params.arch} does not match the config")
    frames = pl.load_sequence(cfg)
    gmm_path = Path(args.gmm) if args.gmm else out / "gmm.mgmm"
    if args.gmm and not args.fit_gmm:
        model, mapping = load_gmm(gmm_path)
        if mapping is None:
            raise DataError(f"{gmm_path} holds no cluster mapping")
        fit = pl.ClusterFit(model, mapping)
    else:
        fit = pl.fit_clusters(frames, params, cfg)
        save_gmm(gmm_path, fit.model, fit.mapping)
    preds = pl.segment_frames(frames, params, fit, cfg)
    (out / "predictions.csv").write_text(pl.predictions_csv(preds))
    if args.point_labels:
        (out / "predictions").mkdir(exist_ok=True)
        for fd, pred in zip(frames, preds):
            save_labels(out / "predictions" / f"{fd.index:06d}.label", pl.point_predictions(fd, pred))
    log.info("segmented %d frames; mapped clusters %s", len(preds), sorted(fit.mapping.moving_clusters))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    _require_frames(cfg)
    out = _output(cfg)
    pred_path = Path(args.predictions) if args.predictions else out / "predictions.csv"
    if not pred_path.is_file():
        raise DataError(f"prediction file {pred_path} not found")
    frames = pl.load_sequence(cfg)
    result = pl.evaluate_prediction_table(frames, pl.read_predictions_csv(pred_path), cfg)
    table = pl.eval_csv(result)
    (out / "eval.csv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def _parse_grid(path: str) -> tuple[dict[str, list[str]], list[str], list[str]]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"grid file {path} not found")
    axes: dict[str, list[str]] = {}
    scenes: list[str] = []
    preset_names: list[str] = []
    for key, value in parse_lines(p.read_text(), str(p)):
        values = [v.strip() for v in value.split(",") if v.strip()]
        if key == "sweep.scenes":
            scenes += values
        elif key == "sweep.presets":
            preset_names += values
        else:
            axes[key] = values
    if not scenes and not preset_names:
        raise ConfigError("grid file names no scenes (sweep.scenes or sweep.presets)")
    return axes, scenes, preset_names


def run_sweep(base: PipelineConfig, axes: dict[str, list], scene_dirs: dict[str, str]):
    """Sweep ``axes`` over every scene; returns a :class:`SweepResult`."""
    cache: dict[tuple, list] = {}

    def run_cell(cell: dict) -> dict[str, float]:
        cfg = base.copy()
        for key, value in cell.items():
            cfg.set(key, value)
        cfg.validate()
        scores = {}
        for name, directory in scene_dirs.items():
            cfg.data.frames = directory
            # preprocessing depends only on the data and the grid resolution
            key = (directory, cfg.grid.m, cfg.eval.ground_z, cfg.eval.lift_rule, cfg.data.labels, cfg.data.poses)
            if key not in cache:
                cache[key] = pl.load_sequence(cfg)
            result = pl.run(cache[key], cfg)
            if result.evaluation is None:
                raise DataError(f"scene {name} has no labels")
            scores[name] = result.evaluation.miou
            log.info("%s %s: mIoU %.4f", cell, name, scores[name])
        return scores

    return sweep(axes, run_cell)


def cmd_sweep(args) -> int:
    base = load_config(args.config, _overrides(args))
    axes, scenes, preset_names = _parse_grid(args.grid)
    out = _output(base)
    scene_dirs = {Path(s).name: s for s in scenes}
    for name in preset_names:
        directory = out / "scenes" / name
        if not (directory / "velodyne").is_dir():
            write_scene(preset(name, base.seed), directory)
            (directory / "scene.cfg").write_text(f"data.frames = {directory}\ndata.moving_labels = 1\n")
        scene_dirs[name] = str(directory)
        base.data.moving_labels = (1,)
    result = run_sweep(base, axes, scene_dirs)
    (out / "sweep.csv").write_text(result.to_csv())
    (out / "sweep_summary.csv").write_text(result.summary_csv())
    sys.stdout.write(result.to_csv())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "segment": cmd_segment, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
