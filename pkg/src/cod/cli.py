"""Command line: cod {train,encode,decode,distill,eval,sweep}.

Every command takes an optional ``--config`` YAML file whose keys are exactly
the command's long flags (dashes become underscores); flags override the file.
Exit codes: 0 ok, 2 configuration, 3 numerical failure, 4 bitstream format.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch
import yaml

from . import codec as codec_mod
from . import data, eval as ev, training
from .core import (CodecConfig, ConfigError, FormatError, NumericalError, StateError, compute_rate,
                   parse_bitstream, serialize_bitstream)
from .features import EVAL_EXTRACTOR_SEED, RandomConvExtractor
from .model import ArchConfig

log = logging.getLogger("cod")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4
BUNDLED = Path(__file__).parent / "configs"


def _csv_ints(s):
    return [int(v) for v in str(s).split(",") if v.strip()]


_TRAIN = {
    "dataset": (str, "toy:16", "PNG directory, or toy:N for N bundled sample crops"),
    "output": (str, "checkpoint.pt", "checkpoint path (relative paths resolve under $COD_CACHE_DIR if set)"),
    "stage": (str, "low_res_pretrain", "one of %s, or 'all'" % ", ".join(training.STAGES)),
    "init_checkpoint": (str, None, "checkpoint of the previous stage"),
    "codebook_size": (int, 16, "VQ codebook size N"),
    "space": (str, "pixel", "pixel or latent"),
    "prediction_target": (str, "V", "V or X"),
    "channel_width": (int, 64, "denoiser hidden width"),
    "depth": (int, 4, "denoiser depth"),
    "steps": (int, None, "optimizer steps (default: stage recipe)"),
    "batch_size": (int, None, "batch size (default: stage recipe)"),
    "lr": (float, None, "learning rate (default: stage recipe)"),
    "alpha_flow_fraction": (float, None, "fraction of flow-matching samples (default: stage recipe)"),
    "lambda_repa": (float, 0.5, "REPA weight"),
    "beta_commit": (float, 0.25, "commitment weight"),
    "gamma_aux": (float, 1.0, "auxiliary-head weight"),
    "uncond_dropout_p": (float, 0.1, "condition dropout probability"),
    "seed": (int, 0, "random seed"),
    "run_log": (str, None, "JSONL run log path"),
}

_CODEC = {
    "checkpoint": (str, None, "trained checkpoint (required)"),
    "input": (str, None, "input file (required)"),
    "output": (str, None, "output file (required)"),
    "preset": (str, None, "preset name to check the model against"),
    "seed": (int, 0, "decoder noise seed stored in the bitstream"),
    "steps": (int, codec_mod.DEFAULT_STEPS, "sampling steps"),
    "solver": (str, "second_order", "euler or second_order"),
    "cfg_scale": (float, None, "guidance scale (default: per space, 1.0 for one step)"),
}

_EVAL = {
    "checkpoint": (str, None, "trained checkpoint (required)"),
    "dataset": (str, "toy:16", "PNG directory, or toy:N"),
    "split": (str, "heldout", "toy split: train or heldout"),
    "output": (str, "runs", "root directory for run outputs"),
    "steps": (int, codec_mod.DEFAULT_STEPS, "sampling steps"),
    "solver": (str, "second_order", "euler or second_order"),
    "cfg_scale": (float, None, "guidance scale"),
    "seed": (int, 0, "base decode seed"),
}

_SWEEP = {
    **_EVAL,
    "axis": (str, "steps", "steps or width"),
    "values": (_csv_ints, None, "comma-separated axis values (required)"),
    "train_steps": (int, 200, "width axis: optimizer steps per model"),
    "train_size": (int, 64, "width axis: toy training images"),
    "batch_size": (int, 16, "width axis: batch size"),
    "lr": (float, 1e-3, "width axis: learning rate"),
    "resolution": (int, 32, "width axis: image size"),
    "downsample_factor": (int, 8, "width axis: token stride"),
    "codebook_size": (int, 16, "width axis: codebook size"),
    "depth": (int, 4, "width axis: denoiser depth"),
}

_DISTILL = {
    "checkpoint": (str, None, "multi-step teacher checkpoint (required)"),
    "dataset": (str, "toy:16", "PNG directory, or toy:N"),
    "output": (str, "onestep.pt", "generator checkpoint path"),
    "steps": (int, 100, "total distillation steps (generator + fake score turns)"),
    "update_ratio": (int, 10, "one generator update per this many steps"),
    "batch_size": (int, 8, "batch size"),
    "lr_generator": (float, 1e-4, "generator learning rate"),
    "lr_fake": (float, 1e-4, "fake score learning rate"),
    "weighting": (str, "dmd", "dmd or score"),
    "seed": (int, 0, "random seed"),
    "run_log": (str, None, "JSONL run log path"),
}

SCHEMAS = {"train": _TRAIN, "encode": _CODEC, "decode": _CODEC, "distill": _DISTILL, "eval": _EVAL, "sweep": _SWEEP}
REQUIRED = {"encode": ("checkpoint", "input", "output"), "decode": ("checkpoint", "input", "output"),
            "eval": ("checkpoint",), "distill": ("checkpoint",), "sweep": ("values",)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cod", description="Conditional diffusion image codec")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=f"{name} command", argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="YAML file with any of the keys below")
        for key, (typ, default, help_) in schema.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ,
                           help=f"{help_} (default: {default})")
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """File values, then flags; unknown keys and wrong types raise ConfigError."""
    schema = SCHEMAS[command]
    cfg = {k: v[1] for k, v in schema.items()}
    given = vars(ns)
    if given.get("config"):
        path = Path(given["config"])
        if not path.is_file() and (BUNDLED / path.name).is_file():
            path = BUNDLED / path.name
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must be a mapping")
        unknown = sorted(set(loaded) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        for k, v in loaded.items():
            typ = schema[k][0]
            try:
                cfg[k] = None if v is None else typ(v)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {k}: {v!r}") from None
    for k in schema:
        if k in given:
            cfg[k] = given[k]
    missing = [k for k in REQUIRED.get(command, ()) if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"{command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def cache_path(p) -> Path:
    path = Path(p)
    root = os.environ.get("COD_CACHE_DIR")
    if root and not path.is_absolute() and not path.exists():
        return Path(root) / path
    return path


def load_images(spec: str, size: int, split: str = "train") -> torch.Tensor:
    if spec.startswith("toy:"):
        return data.desk_images(int(spec[4:]), size, split=split)
    path = Path(spec)
    if not path.is_dir():
        raise ConfigError(f"dataset directory not found: {spec}")
    return data.load_png_dir(path, size)


def _load(path):
    return training.load_checkpoint(cache_path(path))


# -------------------------------------------------------------- commands


def cmd_train(cfg: dict) -> int:
    stages = training.STAGES if cfg["stage"] == "all" else (cfg["stage"],)
    for s in stages:
        training.stage_spec(s)
    codec_base = CodecConfig(32, 32, 8, cfg["codebook_size"], space=cfg["space"],
                             prediction_target=cfg["prediction_target"],
                             channel_width=cfg["channel_width"], depth=cfg["depth"])
    overrides = {k: cfg[k] for k in ("steps", "batch_size", "lr", "alpha_flow_fraction") if cfg[k] is not None}
    overrides.update({k: cfg[k] for k in ("lambda_repa", "beta_commit", "gamma_aux", "uncond_dropout_p", "seed")})
    training.TrainConfig(**overrides)  # validate before loading data
    out = cache_path(cfg["output"])
    init = cache_path(cfg["init_checkpoint"]) if cfg["init_checkpoint"] else None
    for i, s in enumerate(stages):
        spec = training.stage_spec(s)
        images = load_images(cfg["dataset"], spec.resolution)
        target = out if i == len(stages) - 1 else out.with_name(f"{out.stem}.{s}{out.suffix}")
        training.run_stage(s, images, target, codec_base, ArchConfig(), init_checkpoint=init,
                           run_log_path=cfg["run_log"], **overrides)
        init = target
    _, payload = training.load_checkpoint(out)
    print(json.dumps({"checkpoint": str(out), "provenance": payload["provenance"]}, sort_keys=True))
    return EXIT_OK


def cmd_encode(cfg: dict) -> int:
    model, _ = _load(cfg["checkpoint"])
    image = data.read_png(cfg["input"])
    stream = codec_mod.encode(model, image, seed=cfg["seed"], preset=cfg["preset"])
    Path(cfg["output"]).write_bytes(serialize_bitstream(stream))
    r = compute_rate(model.codec)
    print(json.dumps({"total_bits": r.total_bits, "bpp": r.bpp, "height": r.height, "width": r.width}))
    return EXIT_OK


def cmd_decode(cfg: dict) -> int:
    model, _ = _load(cfg["checkpoint"])
    try:
        raw = Path(cfg["input"]).read_bytes()
    except OSError as e:
        raise ConfigError(str(e)) from None
    stream = parse_bitstream(raw)
    x = codec_mod.decode(model, stream, cfg["steps"], cfg["solver"], cfg["cfg_scale"])
    data.write_png(x, cfg["output"])
    r = compute_rate(model.codec)
    print(json.dumps({"total_bits": r.total_bits, "bpp": r.bpp, "height": r.height, "width": r.width}))
    return EXIT_OK


def cmd_distill(cfg: dict) -> int:
    from . import distill

    teacher, payload = _load(cfg["checkpoint"])
    images = load_images(cfg["dataset"], teacher.codec.height)
    dcfg = distill.DistillConfig(update_ratio=cfg["update_ratio"], lr_generator=cfg["lr_generator"],
                                 lr_fake=cfg["lr_fake"], weighting=cfg["weighting"], seed=cfg["seed"])
    state = distill.init_dmd(teacher, dcfg)
    reports = distill.distill(images, state, cfg["steps"], cfg["batch_size"])
    run_log = training.RunLog(cfg["run_log"]) if cfg["run_log"] else None
    if run_log:
        for i, r in enumerate(reports):
            run_log.write({"step": i, **asdict(r)})
    if distill.weight_checksum(state.real_score_model) != state.real_checksum:
        raise StateError("real score model changed during distillation")
    out = cache_path(cfg["output"])
    prov = payload["provenance"] + [{"stage": "distill", "steps": cfg["steps"], "update_ratio": cfg["update_ratio"]}]
    training.save_checkpoint(out, state.generator, provenance=prov)
    last = next((r for r in reversed(reports) if r.updated == "generator"), None)
    print(json.dumps({"checkpoint": str(out), "last_generator_report": asdict(last) if last else None}))
    return EXIT_OK


def _eval_setup(cfg):
    model, _ = _load(cfg["checkpoint"])
    images = load_images(cfg["dataset"], model.codec.height, cfg["split"])
    return model, images, RandomConvExtractor(seed=EVAL_EXTRACTOR_SEED)


def _emit(result, cfg, name):
    out = ev.run_dir(cfg["output"], {k: v for k, v in cfg.items() if k != "output"})
    csv_path, svg_path = ev.write_outputs(result, out, name)
    print(json.dumps({"csv": str(csv_path), "svg": str(svg_path), "rows": len(result.rows)}))


def cmd_eval(cfg: dict) -> int:
    model, images, extractor = _eval_setup(cfg)
    rec = ev.evaluate(model, images, cfg["steps"], cfg["solver"], cfg["seed"], extractor, cfg["cfg_scale"])
    _emit(ev.SweepResult("steps", [(cfg["steps"], rec)]), cfg, "eval")
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    values = cfg["values"]
    if cfg["axis"] == "steps":
        if cfg["checkpoint"] is None:
            raise ConfigError("steps sweep needs --checkpoint")
        model, images, extractor = _eval_setup(cfg)
        result = ev.dp_sweep(model, images, values, extractor, cfg["seed"], cfg["solver"], cfg["cfg_scale"])
    elif cfg["axis"] == "width":
        res = cfg["resolution"]
        train = data.desk_images(cfg["train_size"], res, split="train", seed=cfg["seed"])
        val = data.desk_images(max(8, cfg["train_size"] // 4), res, split="heldout", seed=cfg["seed"])
        codec_cfg = CodecConfig(res, res, cfg["downsample_factor"], cfg["codebook_size"], depth=cfg["depth"])
        tcfg = training.TrainConfig(alpha_flow_fraction=0.9, lr=cfg["lr"], batch_size=cfg["batch_size"],
                                    steps=cfg["train_steps"], seed=cfg["seed"])
        result = ev.scaling_sweep(values, train, val, codec_cfg, ArchConfig(), tcfg,
                                  eval_extractor=RandomConvExtractor(seed=EVAL_EXTRACTOR_SEED), seed=cfg["seed"])
    else:
        raise ConfigError(f"unknown sweep axis {cfg['axis']!r}")
    _emit(result, cfg, f"sweep_{cfg['axis']}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "encode": cmd_encode, "decode": cmd_decode, "distill": cmd_distill,
            "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = ns.command
    try:
        cfg = resolve_config(command, ns)
        return COMMANDS[command](cfg)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, StateError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
