"""``caveseg`` command line: train, infer, eval, triangulate and info.

Settings resolve as command-line flags > ``--config`` JSON file > defaults. The
JSON file is a flat object whose keys are :class:`RunConfig` fields or model
config fields (``embed_dim``, ``window_size``, ...).

Exit status: 0 on success, 1 for data/format/training failures, 2 for usage
errors (bad arguments, missing paths, invalid settings).
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import caveline3d as c3d
from .checkpoint import encode_checkpoint, load_checkpoint, read_meta
from .dataset import (DEFAULT_PALETTE, SPLIT_NAMES, ClassPalette, load_palette, load_sample,
                      list_sample_ids, read_image, resize_pair, split_dataset, synthetic_dataset,
                      write_manifest, write_png, encode_mask)
from .errors import CaveSegError, ConfigError, ParameterError
from .metrics import ConfusionMatrix, format_key_values, format_table, summarize
from .model import PRESETS, CaveSegModel, ModelConfig
from .trainer import TrainConfig, evaluate, train

logger = logging.getLogger("caveseg")

DATA_ENV = "CAVESEG_DATA"
MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))


class PathMissing(CaveSegError):
    """A path named on the command line or in the config does not exist."""


@dataclasses.dataclass
class RunConfig:
    command: str = ""
    data_root: Optional[str] = None
    palette: Optional[str] = None
    preset: str = "default"
    model: dict = dataclasses.field(default_factory=dict)
    epochs: int = 1
    learning_rate: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    out: str = "caveseg_out"
    synthetic: Optional[int] = None
    synthetic_size: int = 64
    checkpoint: Optional[str] = None
    split: str = "test"
    oracle: bool = False
    images: list = dataclasses.field(default_factory=list)
    views: list = dataclasses.field(default_factory=list)
    plane_role: str = "longer"
    radius: Optional[float] = None
    match: str = "index"

    def model_config(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return PRESETS[self.preset].with_updates(**self.model)

    def load_palette(self) -> ClassPalette:
        return load_palette(_require(self.palette, "palette")) if self.palette else DEFAULT_PALETTE


RUN_KEYS = tuple(f.name for f in dataclasses.fields(RunConfig) if f.name not in ("command", "model"))


def resolve_config(command: str, flags: dict, config_path: Optional[str] = None,
                   env: Optional[dict] = None) -> RunConfig:
    """Merge defaults, the JSON config file and explicit flags (in that order)."""
    env = os.environ if env is None else env
    values, model = {}, {}
    if env.get(DATA_ENV):
        values["data_root"] = env[DATA_ENV]
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise PathMissing(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        for k, v in doc.items():
            if k in MODEL_KEYS:
                model[k] = v
            elif k in RUN_KEYS:
                values[k] = v
            else:
                raise ConfigError(f"{path}: unknown key {k!r}")
    values.update({k: v for k, v in flags.items() if k in RUN_KEYS})
    cfg = RunConfig(command=command, model=model, **values)
    cfg.seed = int(cfg.seed)
    return cfg


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise PathMissing(f"{what} not found: {p}")
    return p


@contextlib.contextmanager
def staged_output(out: os.PathLike):
    """Yield a temp directory; on success its files are moved into ``out``."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".caveseg-", dir=out.parent))
    try:
        yield tmp
        out.mkdir(parents=True, exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, out / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_samples(cfg: RunConfig, palette: ClassPalette) -> list:
    if cfg.synthetic is not None:
        n = int(cfg.synthetic)
        if n < 1:
            raise ParameterError(f"--synthetic needs a positive count, got {n}")
        return synthetic_dataset(n, cfg.seed, cfg.synthetic_size, cfg.synthetic_size)
    if not cfg.data_root:
        raise ParameterError(f"no dataset: pass --data, --synthetic N or set {DATA_ENV}")
    root = _require(cfg.data_root, "dataset root")
    ids = list_sample_ids(root)
    if not ids:
        raise ParameterError(f"{root}: no image/mask pairs found")
    return [load_sample(root, i, palette) for i in ids]


def _load_model(cfg: RunConfig) -> CaveSegModel:
    if not cfg.checkpoint:
        raise ParameterError("--checkpoint is required")
    return load_checkpoint(_require(cfg.checkpoint, "checkpoint"))


def _check_classes(config: ModelConfig, palette: ClassPalette) -> None:
    if config.num_classes != palette.num_classes:
        raise ConfigError(f"model predicts {config.num_classes} classes but the palette has {palette.num_classes}")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    from .plotting import plot_class_scores, plot_loss_curve

    palette = cfg.load_palette()
    mcfg = cfg.model_config()
    _check_classes(mcfg, palette)
    samples = _load_samples(cfg, palette)
    split = split_dataset(samples, cfg.seed)
    size = (mcfg.input_h, mcfg.input_w)
    train_set = [s if s.shape == size else resize_pair(s, *size) for s in split.train]
    model = CaveSegModel.initialize(mcfg, cfg.seed)
    with staged_output(cfg.out) as tmp:
        tcfg = TrainConfig(epochs=int(cfg.epochs), seed=cfg.seed, learning_rate=float(cfg.learning_rate),
                           momentum=float(cfg.momentum), log_path=str(tmp / "train_log.txt"),
                           checkpoint_path=str(tmp / "checkpoint.ckpt"))
        report = train(model, train_set, split.val, tcfg)
        write_manifest(split, tmp / "split.tsv")
        final = load_checkpoint(tmp / "checkpoint.ckpt")
        scored_name, scored = ("val", split.val) if split.val else ("train", train_set)
        cm = evaluate(final, scored)
        _write_metrics(tmp, f"metrics_{scored_name}", cm, palette, cfg.seed)
        doc = report.to_dict()
        doc.update(model_config=mcfg.to_dict(), preset=cfg.preset, metrics_split=scored_name,
                   split_sizes={k: len(split[k]) for k in SPLIT_NAMES})
        _write_json(tmp / "report.json", doc)
        plot_loss_curve(report.losses, tmp / "loss.png", title=f"training loss (seed {cfg.seed})")
        plot_class_scores(cm.iou_per_class(), cm.accuracy_per_class(), palette.names,
                          tmp / f"class_scores_{scored_name}.png", palette.color_array())
    print(f"trained {len(report.losses)} steps; {scored_name} metrics written to {cfg.out}")
    sys.stdout.write(format_table(cm, palette.names))
    return 0


def _write_metrics(tmp: Path, stem: str, cm: ConfusionMatrix, palette: ClassPalette, seed: int) -> None:
    (tmp / f"{stem}.txt").write_text(f"# seed {seed}\n" + format_table(cm, palette.names))
    (tmp / f"{stem}.tsv").write_text(f"seed\t{seed}\n" + format_key_values(cm, palette.names))


def overlay(image: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Half-and-half blend of an RGB image with a colour map, rounded to uint8."""
    return np.rint(0.5 * image.astype(np.float64) + 0.5 * colors.astype(np.float64)).astype(np.uint8)


def cmd_infer(cfg: RunConfig) -> int:
    palette = cfg.load_palette()
    if not cfg.images:
        raise ParameterError("no input images given")
    paths = [_require(p, "image") for p in cfg.images]
    model = _load_model(cfg)
    _check_classes(model.config, palette)
    summary = {"seed": cfg.seed, "checkpoint": str(cfg.checkpoint), "images": {}}
    with staged_output(cfg.out) as tmp:
        for p in paths:
            image = read_image(p)
            labels = model.predict(image)
            colors = encode_mask(labels, palette)
            write_png(tmp / f"{p.stem}_mask.png", colors)
            write_png(tmp / f"{p.stem}_overlay.png", overlay(image, colors))
            counts = np.bincount(labels.ravel(), minlength=palette.num_classes)
            summary["images"][p.stem] = {n: int(c) for n, c in zip(palette.names, counts)}
            print(f"{p}: {labels.shape[1]}x{labels.shape[0]} -> {p.stem}_mask.png")
        _write_json(tmp / "infer_summary.json", summary)
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    from .plotting import plot_class_scores

    palette = cfg.load_palette()
    if cfg.split not in SPLIT_NAMES + ("all",):
        raise ParameterError(f"split must be one of {SPLIT_NAMES + ('all',)}, got {cfg.split!r}")
    model = None if cfg.oracle else _load_model(cfg)
    if model is not None:
        _check_classes(model.config, palette)
    samples = _load_samples(cfg, palette)
    chosen = samples if cfg.split == "all" else split_dataset(samples, cfg.seed)[cfg.split]
    if not chosen:
        raise ParameterError(f"split {cfg.split!r} is empty ({len(samples)} samples in total)")
    cm = ConfusionMatrix.zeros(palette.num_classes)
    for s in chosen:
        cm.accumulate(s.labels, s.labels if model is None else model.predict(s.image), palette.ignore_index)
    stem = f"metrics_{cfg.split}"
    with staged_output(cfg.out) as tmp:
        _write_metrics(tmp, stem, cm, palette, cfg.seed)
        plot_class_scores(cm.iou_per_class(), cm.accuracy_per_class(), palette.names,
                          tmp / f"class_scores_{cfg.split}.png", palette.color_array())
    sys.stdout.write(format_table(cm, palette.names))
    s = summarize(cm)
    print("\t".join(f"{k}={v:.6f}" for k, v in s.items()))
    return 0


def cmd_triangulate(cfg: RunConfig) -> int:
    from .plotting import plot_caveline_3d

    if len(cfg.views) < 2:
        raise ParameterError(f"triangulate needs at least two view files, got {len(cfg.views)}")
    views = [c3d.read_view(_require(p, "view file")) for p in cfg.views]
    matches = None
    if cfg.match == "heuristic":
        matches = c3d.match_segments(views[0].segments, views[1].segments)
    elif cfg.match != "index":
        raise ParameterError(f"match must be 'index' or 'heuristic', got {cfg.match!r}")
    result = c3d.triangulate_views(views, matches, cfg.plane_role, cfg.radius)
    summary = result.summary()
    summary.update(seed=cfg.seed, views=[str(p) for p in cfg.views], plane_role=cfg.plane_role, match=cfg.match)
    with staged_output(cfg.out) as tmp:
        (tmp / "caveline.ply").write_text(c3d.format_ply(result.polyline))
        _write_json(tmp / "triangulation.json", summary)
        plot_caveline_3d(result.polyline.segments, result.polyline.smoothed_errors, tmp / "caveline3d.png",
                         [v.center for v in views])
    print(f"triangulated {summary['segment_count']} segment(s), rejected {summary['rejected_count']}")
    for r in result.rejected:
        print(f"  rejected {r.index}: {r.reason}")
    return 0


def cmd_info(cfg: RunConfig) -> int:
    if cfg.checkpoint:
        path = _require(cfg.checkpoint, "checkpoint")
        model, meta, size = load_checkpoint(path), read_meta(path), path.stat().st_size
        source = str(path)
    else:
        model = CaveSegModel.initialize(cfg.model_config(), cfg.seed)
        meta, size, source = {}, len(encode_checkpoint(model)), f"preset {cfg.preset!r} (untrained)"
    print(f"source\t{source}")
    for k, v in model.config.to_dict().items():
        print(f"config.{k}\t{v}")
    for k, v in sorted(meta.items()):
        print(f"meta.{k}\t{v}")
    print(f"parameters\t{model.num_parameters()}")
    print(f"bytes\t{size}")
    print(f"megabytes\t{size / 2**20:.3f}")
    return 0


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "triangulate": cmd_triangulate, "info": cmd_info}


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="flat JSON file of settings (flags override it)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--out", help="output directory (default caveseg_out)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    data = argparse.ArgumentParser(add_help=False, argument_default=S)
    data.add_argument("--data", dest="data_root", help=f"dataset root with images/ and masks/ (default ${DATA_ENV})")
    data.add_argument("--synthetic", type=int, metavar="N", help="use N seeded synthetic scenes instead of a dataset")
    data.add_argument("--synthetic-size", dest="synthetic_size", type=int, metavar="PX",
                      help="side length of synthetic scenes (default 64)")
    data.add_argument("--palette", help="palette file (id name r g b per line)")

    parser = argparse.ArgumentParser(prog="caveseg", description="Cave scene segmentation: train, infer, eval, triangulate and info.",
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="Settings resolve as flags > --config file > defaults.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("train", parents=[common, data], argument_default=S,
                       help="train a model and write checkpoint, log and metrics")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model size preset (default 'default')")
    p.add_argument("--epochs", type=int, help="passes over the training split (default 1)")
    p.add_argument("--lr", dest="learning_rate", type=float, help="SGD learning rate (default 1e-4)")
    p.add_argument("--momentum", type=float, help="SGD momentum (default 0.9)")

    p = sub.add_parser("infer", parents=[common], argument_default=S,
                       help="write palette mask and overlay PNGs for images")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--palette", help="palette file (id name r g b per line)")
    p.add_argument("images", nargs="+", help="input images")

    p = sub.add_parser("eval", parents=[common, data], argument_default=S,
                       help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", help="trained checkpoint file (required unless --oracle)")
    p.add_argument("--split", choices=SPLIT_NAMES + ("all",), help="split to score (default test)")
    p.add_argument("--oracle", action="store_true", help="score ground truth against itself")

    p = sub.add_parser("triangulate", parents=[common], argument_default=S,
                       help="triangulate caveline segments from posed view files")
    p.add_argument("views", nargs="+", help="JSON view files (first two are triangulated)")
    p.add_argument("--plane-role", dest="plane_role", choices=c3d.PLANE_ROLES,
                   help="which view supplies the plane (default longer)")
    p.add_argument("--radius", type=float, help="connectivity radius (default 2x median segment length)")
    p.add_argument("--match", choices=("index", "heuristic"), help="segment pairing (default index)")

    p = sub.add_parser("info", parents=[common], argument_default=S,
                       help="print config, parameter count and byte size")
    p.add_argument("--checkpoint", help="checkpoint to describe (overrides --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="describe an untrained preset (default 'default')")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.pop("command")
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(command, args, args.pop("config", None))
        return COMMANDS[command](cfg)
    except (PathMissing, ParameterError, ConfigError) as exc:
        print(f"caveseg {command}: {exc}", file=sys.stderr)
        return 2
    except (CaveSegError, FileNotFoundError) as exc:
        print(f"caveseg {command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
