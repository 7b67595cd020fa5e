"""Command-line entry point.

    resattunet <synth|weights|train|evaluate|predict|gradcheck>
        [--config PATH] [--set key=value ...] [--out DIR]

Config files are JSON with optional sections ``model``, ``train``, ``synth``,
``gradcheck`` and top-level keys ``seed``, ``manifest``, ``checkpoint``,
``split``, ``image``, ``counts``. ``--set`` takes dotted keys
(``train.epochs=5``); values parse as JSON when possible. Precedence, lowest
first: file, ``SEED`` environment variable, ``--set``.

Exit status: 0 success, 1 runtime failure, 2 usage error. Failures print one
JSON line ``{"error": kind, "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, loss
from .model import ModelConfig, ResAttUNet
from .train import TrainConfig, evaluate_split, fit, load_model_weights, predict
from .metrics import confusion_csv

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
COMMANDS = ("synth", "weights", "train", "evaluate", "predict", "gradcheck")

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "manifest": None,
    "checkpoint": None,
    "split": "test",
    "image": None,
    "counts": None,
    "model": {},
    "train": {},
    "synth": {
        "n_patches": 10,
        "size": 32,
        "num_classes": 4,
        "bands": 4,
        "noise": 0.0,
        "ignore_fraction": 0.7,
        "val_fraction": 0.2,
        "test_fraction": 0.2,
    },
    "gradcheck": {"seeds": 20, "cases": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="resattunet", description="ResAttUNet segmentation toolkit")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
    return p


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            cfg = _merge(cfg, json.loads(args.config.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
    if os.environ.get("SEED"):
        try:
            cfg["seed"] = int(os.environ["SEED"])
        except ValueError as exc:
            raise UsageError(f"SEED must be an integer, got {os.environ['SEED']!r}") from exc
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {part} is not a section")
        node[parts[-1]] = _parse_value(value)
    if args.out is not None:
        cfg["out"] = str(args.out)
    cfg["train"].setdefault("seed", cfg["seed"])
    return cfg


def _model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(cfg["model"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"model config: {exc}") from exc


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from exc


def _require_file(cfg: dict, key: str) -> Path:
    if not cfg.get(key):
        raise UsageError(f"missing required setting {key!r}")
    path = Path(cfg[key])
    if not path.is_file():
        raise UsageError(f"{key} file not found: {path}")
    return path


def _load_manifest(cfg: dict) -> data.Manifest:
    return data.Manifest.load(_require_file(cfg, "manifest"))


# --- subcommands ---------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path) -> None:
    s = cfg["synth"]
    try:
        manifest = data.synth_dataset(out, seed=cfg["seed"], **s)
    except TypeError as exc:
        raise UsageError(f"synth config: {exc}") from exc
    print(json.dumps({"manifest": str(out / "manifest.json"), "patches": len(manifest.patches)}))


def cmd_weights(cfg: dict, out: Path) -> None:
    counts = cfg["counts"]
    if counts is None:
        counts = data.MARIDA_PIXEL_COUNTS
    elif isinstance(counts, str):
        counts = json.loads(_require_file(cfg, "counts").read_text())
    if not isinstance(counts, dict):
        raise UsageError("counts must map class name to pixel count")
    try:
        weights = loss.class_weights_from_counts(counts)
    except loss.LossError as exc:
        raise UsageError(str(exc)) from exc
    text = weights.to_json()
    (out / "class_weights.json").write_text(text + "\n")
    print(text)


def cmd_train(cfg: dict, out: Path) -> None:
    manifest = _load_manifest(cfg)
    mcfg = _model_config(cfg)
    tcfg = _train_config(cfg)
    if mcfg.in_bands != manifest.band_count or mcfg.num_classes != manifest.num_classes:
        raise UsageError(
            f"model expects {mcfg.in_bands} bands / {mcfg.num_classes} classes, "
            f"manifest has {manifest.band_count} / {manifest.num_classes}"
        )
    if not manifest.split("train"):
        raise UsageError("manifest has no train patches")
    (out / "model_config.json").write_text(mcfg.to_json() + "\n")
    model = ResAttUNet(mcfg, seed=cfg["seed"])
    resume = cfg.get("resume")
    tlog = fit(model, manifest, tcfg, out, resume=resume)
    last = tlog.records[-1] if tlog.records else None
    print(json.dumps({"epochs": len(tlog.records), "final_train_loss": last.train_loss if last else None}))


def _trained_model(cfg: dict):
    mcfg = _model_config(cfg)
    ckpt = _require_file(cfg, "checkpoint")
    model = ResAttUNet(mcfg, seed=cfg["seed"])
    stats = load_model_weights(model, ckpt)
    return model, stats


def cmd_evaluate(cfg: dict, out: Path) -> None:
    manifest = _load_manifest(cfg)
    split = cfg["split"]
    if split not in data.SPLITS:
        raise UsageError(f"unknown split {split!r}")
    if not manifest.split(split):
        raise UsageError(f"split {split!r} is empty")
    model, stats = _trained_model(cfg)
    stats = stats or manifest.stats or data.compute_band_stats(manifest, "train")
    samples = [data.standardize(s, stats.mean, stats.std) for s in data.load_split(manifest, split)]
    report, cm = evaluate_split(model, samples)
    (out / f"metrics_{split}.json").write_text(report.to_json() + "\n")
    (out / f"metrics_{split}.csv").write_text(report.to_csv())
    (out / f"confusion_{split}.csv").write_text(confusion_csv(cm, manifest.classes))
    print(report.to_json())


def cmd_predict(cfg: dict, out: Path) -> None:
    image_path = _require_file(cfg, "image")
    model, stats = _trained_model(cfg)
    image = data.read_image(image_path)
    if stats is not None:
        image = data.standardize(data.PatchSample(image, np.zeros(image.shape[1:], np.uint8)), stats.mean, stats.std).image
    model.check_input((1, *image.shape))
    labels = predict(model, image[None])[0]
    target = Path(cfg.get("output") or out / f"{image_path.stem}.msk")
    data.write_mask(target, labels.astype(np.uint8))
    print(json.dumps({"mask": str(target), "shape": list(labels.shape)}))


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    from .verify import run_suite, suite

    g = cfg["gradcheck"]
    unknown = sorted(set(g.get("cases") or []) - set(suite()))
    if unknown:
        raise UsageError(f"unknown gradcheck cases {unknown}; choose from {sorted(suite())}")
    results = run_suite(
        int(g.get("seeds", 20)),
        g.get("cases"),
        progress=lambda name, err, secs: print(f"{name:28s} max_rel_err={err:.3e} ({secs:.1f}s)", flush=True),
    )
    worst = max(results, key=results.get)
    ok = bool(results[worst] < 1e-4)
    (out / "gradcheck.json").write_text(json.dumps(results, indent=2) + "\n")
    print(json.dumps({"worst_op": worst, "max_rel_err": float(results[worst]), "pass": ok}))
    return EXIT_OK if ok else EXIT_RUNTIME


HANDLERS = {
    "synth": cmd_synth,
    "weights": cmd_weights,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def _fail(kind: str, exc) -> None:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, default=str) + "\n")
        status = HANDLERS[args.command](cfg, out)
        return EXIT_OK if status is None else status
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        _fail(type(exc).__name__, exc)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=os.environ.get("LOGLEVEL", "WARNING"))
    sys.exit(run())


if __name__ == "__main__":
    main()
