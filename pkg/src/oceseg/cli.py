"""Command-line front end.

Subcommands: synth, train, predict, segment, eval, sweep, theory.  Every
run that writes artifacts also echoes its effective configuration and seed
as ``config.json`` next to the outputs, so the run can be reproduced
bit-for-bit from that file alone (``--config config.json``).

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import data as dataio
from . import synth as synthmod
from . import theory as theorymod
from .errors import ConfigError, DegenerateError, FormatError, PlacementError, ShapeError
from .loss import LossConfig
from .metrics import format_score_table, seg_score_dataset, threshold_sweep
from .network import (
    ModelConfig,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .segmentation import (
    SegmenterConfig,
    bandwidth_search,
    predict_full,
    segment_image,
)

DEFAULT_CONFIG = {
    "model": {
        "in_channels": 1,
        "base_fmaps": 64,
        "fmap_factor": 3,
        "depth": 1,
        "out_channels": 2,
    },
    "loss": {
        "pair_radius": 10.0,
        "temperature": 10.0,
        "reg_weight": 1e-5,
        "anchor_density": 0.10,
    },
    "train": {
        "epochs": 50,
        "batch_size": 8,
        "crop_size": 252,
        "base_lr": 4e-5,
    },
    "segment": {
        "noise_rounds": 5,
        "noise_fraction": 0.01,
        "bandwidth": 10.0,
        "shrink_distance": 0.0,
        "min_instance_size": 10,
        "connectivity_relabel": False,
    },
    "data": {
        "normalize": True,
        "rescale": 1.0,
    },
}


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {path + key!r} must be an object")
            out[key] = _merge_config(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def _load_run_config(path):
    """Read an effective-config echo (or a bare sections file)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ConfigError("config file must hold a JSON object")
    sections = payload.get("config", payload)
    stored_options = payload.get("options", {}) if "config" in payload else {}
    stored_seed = payload.get("seed") if "config" in payload else None
    extra = {k for k in payload if k not in ("config", "options", "seed", "command")}
    if "config" in payload and extra:
        raise ConfigError(f"unknown config key {sorted(extra)[0]!r}")
    return _merge_config(DEFAULT_CONFIG, sections), stored_options, stored_seed


def _echo_config(out_dir, command, seed, options, config) -> None:
    os.makedirs(out_dir, exist_ok=True)
    dataio.write_json(
        os.path.join(out_dir, "config.json"),
        {"command": command, "seed": seed, "options": options, "config": config},
    )


def _model_config(config) -> ModelConfig:
    return ModelConfig(**config["model"])


def _loss_config(config) -> LossConfig:
    return LossConfig(**config["loss"])


def _segmenter_config(config) -> SegmenterConfig:
    return SegmenterConfig(**config["segment"])


def _prepare_image(arr, config) -> np.ndarray:
    img = np.asarray(arr, np.float32)
    if img.ndim == 2:
        img = img[None]
    if config["data"]["normalize"]:
        img = dataio.normalize_percentile(img)
    factor = config["data"]["rescale"]
    if factor != 1.0:
        img = dataio.rescale_image(img, factor)
    return img


def _load_labels_dir(path):
    """Accept either a dataset root (with labels/) or a flat directory of .ocet."""
    if os.path.isdir(os.path.join(path, "labels")):
        stems, _, labels = dataio.load_dataset(path)
        if labels is None:
            raise FormatError(f"{path} has no labels")
        return dict(zip(stems, labels))
    if not os.path.isdir(path):
        raise FormatError(f"{path} is not a directory")
    stems = sorted(os.path.splitext(f)[0] for f in os.listdir(path) if f.endswith(".ocet"))
    if not stems:
        raise FormatError(f"no .ocet files under {path}")
    return {
        s: dataio.tensor_read(os.path.join(path, s + ".ocet")) for s in stems
    }


# ---------------------------------------------------------------------------
# Subcommands

def _cmd_synth(args, config, seed, options):
    spec = synthmod.SceneSpec(
        height=options["size"],
        width=options["size"],
        n_objects=options["objects"],
        radius_range=(options["radius_min"], options["radius_max"]),
        noise_std=options["noise_std"],
    )
    scenes = synthmod.generate_dataset(spec, options["images"], seed=seed)
    dataio.save_dataset(
        options["out"],
        [img for img, _ in scenes],
        [lab for _, lab in scenes],
    )
    _echo_config(options["out"], "synth", seed, options, config)
    print(f"wrote {len(scenes)} images to {options['out']}")
    return 0


def _cmd_train(args, config, seed, options):
    stems, raw_images, _ = dataio.load_dataset(options["data"])
    images = [_prepare_image(img, config) for img in raw_images]
    tc = TrainConfig(**config["train"])
    resume = None
    if options["resume"]:
        params, adam, next_epoch = load_checkpoint(options["resume"])
        from .network import TrainResult

        resume = TrainResult(params, adam, [], next_epoch)
    os.makedirs(options["out"], exist_ok=True)
    trace_path = os.path.join(options["out"], "loss_trace.tsv")
    log_rows = []

    def log(epoch, loss):
        log_rows.append((epoch, loss))
        print(f"epoch {epoch}: mean loss {loss:.4f}")

    result = train(
        images,
        _model_config(config),
        _loss_config(config),
        tc,
        seed=seed,
        resume=resume,
        log=log,
    )
    save_checkpoint(
        os.path.join(options["out"], "checkpoint.ocec"),
        result.params,
        result.adam,
        result.next_epoch,
    )
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tmean_loss\n")
        for epoch, loss in log_rows:
            fh.write(f"{epoch}\t{loss:.8f}\n")
    _echo_config(options["out"], "train", seed, options, config)
    print(f"checkpoint written to {options['out']}/checkpoint.ocec")
    return 0


def _cmd_predict(args, config, seed, options):
    params, _, _ = load_checkpoint(options["model"])
    stems, raw_images, _ = dataio.load_dataset(options["data"])
    out_dir = os.path.join(options["out"], "fields")
    os.makedirs(out_dir, exist_ok=True)
    for stem, raw in zip(stems, raw_images):
        img = _prepare_image(raw, config)
        field = predict_full(params, img)
        dataio.tensor_write(os.path.join(out_dir, stem + ".ocet"), field)
    _echo_config(options["out"], "predict", seed, options, config)
    print(f"wrote {len(stems)} offset fields to {out_dir}")
    return 0


def _cmd_segment(args, config, seed, options):
    params, _, _ = load_checkpoint(options["model"])
    seg_cfg = _segmenter_config(config)
    stems, raw_images, _ = dataio.load_dataset(options["data"])
    lab_dir = os.path.join(options["out"], "labels")
    os.makedirs(lab_dir, exist_ok=True)
    vis_dir = os.path.join(options["out"], "vis")
    if options["pgm"]:
        os.makedirs(vis_dir, exist_ok=True)
    factor = config["data"]["rescale"]
    for i, (stem, raw) in enumerate(zip(stems, raw_images)):
        img = _prepare_image(raw, config)
        labels = segment_image(params, img, seg_cfg, seed=seed + i)
        if factor != 1.0:
            original = np.asarray(raw)
            target = original.shape[-2:]
            labels = dataio.rescale_labels(labels, 1.0 / factor, out_shape=target)
        dataio.tensor_write(os.path.join(lab_dir, stem + ".ocet"), labels.astype(np.int32))
        if options["pgm"]:
            gray, maxval = dataio.labels_to_gray(labels)
            dataio.pgm_write(os.path.join(vis_dir, stem + ".pgm"), gray, maxval=maxval)
    _echo_config(options["out"], "segment", seed, options, config)
    print(f"wrote {len(stems)} label masks to {lab_dir}")
    return 0


def _cmd_eval(args, config, seed, options):
    gt = _load_labels_dir(options["gt"])
    pred = _load_labels_dir(options["pred"])
    stems = sorted(gt)
    if sorted(pred) != stems:
        raise FormatError("ground truth and prediction stems differ")
    gts = [gt[s] for s in stems]
    preds = [pred[s] for s in stems]
    thresholds = [float(t) for t in options["thresholds"].split(",") if t]
    rows = threshold_sweep(gts, preds, thresholds, per_image=options["per_image"])
    if options["seg"]:
        rows.append(("seg", 0.5, seg_score_dataset(gts, preds)))
    table = format_score_table(rows)
    if options["out"]:
        os.makedirs(options["out"], exist_ok=True)
        with open(os.path.join(options["out"], "scores.tsv"), "w", encoding="utf-8") as fh:
            fh.write(table)
        _echo_config(options["out"], "eval", seed, options, config)
    sys.stdout.write(table)
    return 0


def _cmd_sweep(args, config, seed, options):
    params, _, _ = load_checkpoint(options["model"])
    stems, raw_images, labels = dataio.load_dataset(options["data"])
    if labels is None:
        raise FormatError("sweep needs a dataset with labels/")
    images = [_prepare_image(img, config) for img in raw_images]
    bandwidths = [float(b) for b in options["bandwidths"].split(",") if b]
    best_bw, best_s, rows = bandwidth_search(
        params,
        images,
        labels,
        bandwidths,
        config=_segmenter_config(config),
        metric=options["metric"],
        iou_threshold=options["threshold"],
        seed=seed,
    )
    lines = ["bandwidth\tshrink\tscore"]
    for bw, s, score in rows:
        lines.append(f"{bw:g}\t{s:g}\t{score:.6f}")
    table = "\n".join(lines) + "\n"
    if options["out"]:
        os.makedirs(options["out"], exist_ok=True)
        with open(os.path.join(options["out"], "sweep.tsv"), "w", encoding="utf-8") as fh:
            fh.write(table)
        _echo_config(options["out"], "sweep", seed, options, config)
    sys.stdout.write(table)
    print(f"best bandwidth {best_bw:g}, shrink {best_s:g}")
    return 0


def _cmd_theory(args, config, seed, options):
    template, _ = synthmod.object_template(options["radius"])
    p = options["patch"]
    half = template.shape[0] // 2
    off_a = (half - p + 1, half - p + 1)
    off_b = (half, half)
    pa = template[off_a[0]:off_a[0] + p, off_a[1]:off_a[1] + p]
    pb = template[off_b[0]:off_b[0] + p, off_b[1]:off_b[1] + p]
    samples = theorymod.make_scenes(
        options["scenes"],
        options["objects"],
        options["canvas"],
        template,
        seed=seed,
        boundary=options["boundary"],
    )
    label = f"a@{off_a}/b@{off_b}"
    table = theorymod.offset_report([(label, pa, pb)], samples)
    if options["out"]:
        os.makedirs(options["out"], exist_ok=True)
        with open(os.path.join(options["out"], "theory.tsv"), "w", encoding="utf-8") as fh:
            fh.write(table)
        _echo_config(options["out"], "theory", seed, options, config)
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# Parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


_OPTION_SPECS = {
    "synth": {
        "out": (str, None, "output dataset directory"),
        "images": (int, 50, "number of scenes"),
        "size": (int, 252, "canvas side length"),
        "objects": (int, 20, "objects per scene"),
        "radius_min": (float, 8.0, "smallest object radius"),
        "radius_max": (float, 14.0, "largest object radius"),
        "noise_std": (float, 0.02, "background noise sigma"),
    },
    "train": {
        "data": (str, None, "dataset directory"),
        "out": (str, None, "output directory"),
        "resume": (str, "", "checkpoint to resume from"),
    },
    "predict": {
        "model": (str, None, "checkpoint file"),
        "data": (str, None, "dataset directory"),
        "out": (str, None, "output directory"),
    },
    "segment": {
        "model": (str, None, "checkpoint file"),
        "data": (str, None, "dataset directory"),
        "out": (str, None, "output directory"),
        "pgm": (bool, False, "also write PGM visualizations"),
    },
    "eval": {
        "gt": (str, None, "ground truth labels (dataset root or directory)"),
        "pred": (str, None, "predicted labels (dataset root or directory)"),
        "thresholds": (str, "0.5", "comma-separated IoU thresholds"),
        "per_image": (bool, False, "average scores per image instead of pooling"),
        "seg": (bool, False, "also report the SEG score"),
        "out": (str, "", "optional output directory"),
    },
    "sweep": {
        "model": (str, None, "checkpoint file"),
        "data": (str, None, "labelled validation dataset"),
        "bandwidths": (str, "4,6,8,10,12,14", "comma-separated candidates"),
        "metric": (str, "f1", "f1 or seg"),
        "threshold": (float, 0.5, "IoU threshold for f1"),
        "out": (str, "", "optional output directory"),
    },
    "theory": {
        "scenes": (int, 500, "number of scenes"),
        "objects": (int, 30, "objects per scene"),
        "canvas": (int, 511, "canvas side (odd sides keep wrapped offsets symmetric)"),
        "radius": (float, 7.0, "template radius"),
        "patch": (int, 5, "patch side length"),
        "boundary": (str, "periodic", "periodic or bounded"),
        "out": (str, "", "optional output directory"),
    },
}

_REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out"),
    "predict": ("model", "data", "out"),
    "segment": ("model", "data", "out"),
    "eval": ("gt", "pred"),
    "sweep": ("model", "data"),
    "theory": (),
}

_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "segment": _cmd_segment,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "theory": _cmd_theory,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="oceseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, spec in _OPTION_SPECS.items():
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None)
        for opt, (typ, _default, help_text) in spec.items():
            flag = "--" + opt.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action="store_const", const=True, default=None,
                               help=help_text)
            else:
                p.add_argument(flag, type=typ, default=None, help=help_text)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        config = copy.deepcopy(DEFAULT_CONFIG)
        stored_options: dict = {}
        stored_seed = None
        if args.config:
            config, stored_options, stored_seed = _load_run_config(args.config)
        options = {}
        for opt, (typ, default, _help) in _OPTION_SPECS[args.command].items():
            given = getattr(args, opt)
            if given is not None:
                options[opt] = given
            elif opt in stored_options:
                options[opt] = stored_options[opt]
            else:
                options[opt] = default
        missing = [o for o in _REQUIRED[args.command] if options[o] is None]
        if missing:
            print(
                f"oceseg {args.command}: missing required option "
                f"--{missing[0].replace('_', '-')}",
                file=sys.stderr,
            )
            return 1
        if args.seed is not None:
            seed = args.seed
        elif stored_seed is not None:
            seed = stored_seed
        else:
            seed = 0
        return _COMMANDS[args.command](args, config, seed, options)
    except (
        ConfigError,
        DegenerateError,
        FormatError,
        PlacementError,
        ShapeError,
        ValueError,
        OSError,
        json.JSONDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
