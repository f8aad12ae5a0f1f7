"""Command line entry point.

    prunegrad <train|calibrate|attribute|sweep|sanity|perturb|roar>
              [--config FILE] [--seed N] [--out DIR] [--workers N] [--set KEY=VALUE ...]

The config file is JSON. Flags override file values, ``--set`` overrides
any single key (the value is parsed as JSON when possible). Unknown keys are
rejected. Every run writes its resolved ``config.json`` and a
``manifest.json`` with checksums into the output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attribution, evaluation, pruning, report
from .data import (CIFAR_TEST, CIFAR_TRAIN, DataFormatError, Dataset, channel_means,
                   generate_shapes, load_cifar10_binary, write_dataset)
from .models import CheckpointError, build_model, init_weights, load_checkpoint, mlp_spec, \
    resnet8_spec, save_checkpoint
from .trainer import TrainConfig, TrainingDiverged, evaluate_accuracy, train

log = logging.getLogger("prunegrad")

COMMANDS = ("train", "calibrate", "attribute", "sweep", "sanity", "perturb", "roar")
DEFAULT_TARGET_CHANGE = 0.15


class ConfigError(ValueError):
    pass


COMMON = {
    "seed": 0, "out": None, "workers": None,
    "dataset": "shapes", "data_dir": None, "n_train": 3000, "n_test": 500,
    "image_size": 16, "classes": 10, "data_seed": 0,
}
TRAINING = {
    "arch": "resnet8", "epochs": 30, "batch_size": 64, "lr": 0.01, "momentum": 0.9,
    "weight_decay": 5e-4, "lr_milestones": [20], "lr_gamma": 0.1, "hflip": False,
}
METHOD_OPTS = {
    "sparsity": None, "target_change": DEFAULT_TARGET_CHANGE, "n_val": 1000,
    "ig_steps": 50, "rectgrad_q": 90.0, "gradcam_layer": None, "mid_layer": None,
    "pgd_iters": 20, "pgd_step": 0.01, "pgd_bound": 0.1,
}
DEFAULTS = {
    "train": {**COMMON, **TRAINING},
    "calibrate": {**COMMON, "checkpoint": None, "target_change": DEFAULT_TARGET_CHANGE,
                  "n_val": 1000, "depth": 10},
    "attribute": {**COMMON, **METHOD_OPTS, "checkpoint": None, "methods": ["vanilla"],
                  "images": [0, 1, 2, 3]},
    "sweep": {**COMMON, "checkpoint": None, "n_images": 100,
              "sparsities": [round(0.05 * i, 2) for i in range(21)]},
    "sanity": {**COMMON, **METHOD_OPTS, "checkpoint": None, "n_images": 50, "depths": None,
               "methods": ["vanilla", "guided_backprop", "prunegrad"]},
    "perturb": {**COMMON, **METHOD_OPTS, "checkpoint": None, "n_images": 100, "fill": None,
                "fractions": [round(0.1 * i, 1) for i in range(11)], "descending": False,
                "methods": ["vanilla", "prunegrad", "random"]},
    "roar": {**COMMON, **TRAINING, **METHOD_OPTS, "checkpoint": None,
             "methods": ["prunegrad", "vanilla"], "percentiles": [0.1, 0.3, 0.5, 0.7, 0.9],
             "repeats": 3, "fill": None, "save_perturbed": True},
}
ALL_KEYS = frozenset(k for d in DEFAULTS.values() for k in d)


# --------------------------------------------------------------------------
# config handling


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(command: str, config_path=None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS[command])
    layers = []
    if config_path is not None:
        try:
            layers.append(json.loads(Path(config_path).read_text()))
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: invalid JSON ({e})") from None
    layers.append(overrides or {})
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(layer) - ALL_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        # keys that belong to other verbs are allowed so one file can drive a pipeline
        cfg.update({k: v for k, v in layer.items() if k in cfg})
    if cfg["out"] is None:
        cfg["out"] = f"runs/{command}"
    if cfg["workers"] is None:
        cfg["workers"] = os.cpu_count() or 1
    if "checkpoint" in cfg and command != "train" and not cfg["checkpoint"]:
        raise ConfigError(f"{command} needs a checkpoint")
    return cfg


def load_data(cfg) -> tuple[Dataset, Dataset]:
    if cfg["dataset"] == "cifar10":
        if not cfg["data_dir"]:
            raise ConfigError("dataset cifar10 needs data_dir")
        return load_cifar10_binary(cfg["data_dir"], cfg["n_train"], cfg["n_test"])
    if cfg["dataset"] == "shapes":
        s = cfg["image_size"]
        return (generate_shapes(cfg["data_seed"], cfg["n_train"], s, cfg["classes"]),
                generate_shapes(cfg["data_seed"] + 1, cfg["n_test"], s, cfg["classes"],
                                split="test"))
    raise ConfigError(f"unknown dataset {cfg['dataset']!r}")


def data_inputs(cfg):
    if cfg["dataset"] == "cifar10" and cfg["data_dir"]:
        d = Path(cfg["data_dir"])
        return [d / n for n in CIFAR_TRAIN + CIFAR_TEST if (d / n).exists()]
    return []


def train_config(cfg) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                       seed=cfg["seed"], lr_milestones=tuple(cfg["lr_milestones"]),
                       lr_gamma=cfg["lr_gamma"], hflip=cfg["hflip"])


def arch_spec(cfg, train_set: Dataset):
    shape = train_set.images.shape[1:]
    classes = 10 if cfg["dataset"] == "cifar10" else cfg["classes"]
    if cfg["arch"] == "resnet8":
        return resnet8_spec(shape, classes)
    if cfg["arch"] == "mlp":
        return mlp_spec([int(np.prod(shape)), 128, classes], input_shape=shape)
    raise ConfigError(f"unknown arch {cfg['arch']!r}")


def validation_images(cfg, train_set: Dataset):
    n = min(cfg["n_val"], max(1, len(train_set) // 10))
    return train_set.images[len(train_set) - n:]


def resolve_sparsity(cfg, model, train_set) -> float:
    if cfg["sparsity"] is not None:
        return float(cfg["sparsity"])
    s = pruning.calibrate_sparsity(model, validation_images(cfg, train_set),
                                   cfg["target_change"])
    log.info("calibrated sparsity %.4f for target change %.3f", s, cfg["target_change"])
    return s


def method_kwargs(cfg, method: str, sparsity: float | None) -> dict:
    if method in ("prunegrad", "prunegrad_mid", "prune_pgd"):
        kw = {"sparsity": sparsity}
        if method == "prunegrad_mid" and cfg["mid_layer"]:
            kw["layer"] = cfg["mid_layer"]
        if method == "prune_pgd":
            kw.update(iters=cfg["pgd_iters"], step=cfg["pgd_step"], l2_bound=cfg["pgd_bound"])
        return kw
    if method == "integrated_gradients":
        return {"steps": cfg["ig_steps"]}
    if method == "rectgrad":
        return {"q": cfg["rectgrad_q"]}
    if method == "gradcam" and cfg["gradcam_layer"]:
        return {"layer": cfg["gradcam_layer"]}
    if method == "random":
        return {"seed": cfg["seed"]}
    return {}


def _check_methods(methods):
    bad = [m for m in methods if m not in attribution.METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {sorted(attribution.METHODS)}")


def _needs_sparsity(methods):
    return any(m.startswith("prune") for m in methods)


# --------------------------------------------------------------------------
# commands


def cmd_train(cfg, run: report.RunDir):
    train_set, test_set = load_data(cfg)
    spec = arch_spec(cfg, train_set)
    model = init_weights(build_model(spec), cfg["seed"])
    model, hist = train(model, train_set, train_config(cfg), test_set)
    save_checkpoint(model, run.file("model.pgck"))
    run.record("model.pgck")
    report.write_csv(run.file("history.csv"), ["epoch", "loss", "train_acc", "test_acc"],
                     hist.rows())
    run.record("history.csv")
    print(f"test accuracy {hist.test_acc[-1] if hist.test_acc else float('nan'):.4f}")


def cmd_calibrate(cfg, run):
    model = load_checkpoint(cfg["checkpoint"])
    train_set, _ = load_data(cfg)
    trace: list = []
    s = pruning.calibrate_sparsity(model, validation_images(cfg, train_set),
                                   cfg["target_change"], depth=cfg["depth"], trace=trace)
    report.write_csv(run.file("calibration.csv"), ["sparsity", "mean_rel_change"], trace)
    run.record("calibration.csv")
    report.write_csv(run.file("sparsity.csv"), ["target_change", "sparsity"],
                     [(cfg["target_change"], s)])
    run.record("sparsity.csv")
    print(fmt_line("sparsity", s))


def cmd_attribute(cfg, run):
    _check_methods(cfg["methods"])
    model = load_checkpoint(cfg["checkpoint"])
    train_set, test_set = load_data(cfg)
    idx = list(cfg["images"])
    if any(not 0 <= i < len(test_set) for i in idx):
        raise ConfigError(f"image indices must be in [0, {len(test_set)})")
    s = resolve_sparsity(cfg, model, train_set) if _needs_sparsity(cfg["methods"]) else None
    x = test_set.images[idx]
    for method in cfg["methods"]:
        maps = attribution.attribute(method, model, x, **method_kwargs(cfg, method, s))
        for j, i in enumerate(idx):
            stem = f"{method}/img{i:05d}"
            report.write_pgm(run.file(stem + ".pgm"), maps.aggregated[j])
            report.write_raw(run.file(stem + ".raw"), maps.raw[j])
            report.write_grid_csv(run.file(stem + ".csv"), maps.aggregated[j])
            for ext in (".pgm", ".raw", ".csv"):
                run.record(stem + ext)


def cmd_sweep(cfg, run):
    model = load_checkpoint(cfg["checkpoint"])
    _, test_set = load_data(cfg)
    curve = pruning.sparsity_sweep(model, test_set.images[:cfg["n_images"]], cfg["sparsities"])
    report.write_csv(run.file("sweep.csv"), ["sparsity", "mean_rel_change"], curve.rows())
    run.record("sweep.csv")


def cmd_sanity(cfg, run):
    _check_methods(cfg["methods"])
    model = load_checkpoint(cfg["checkpoint"])
    train_set, test_set = load_data(cfg)
    s = resolve_sparsity(cfg, model, train_set) if _needs_sparsity(cfg["methods"]) else None
    depths = cfg["depths"]
    if depths is None:
        depths = list(range(len(model.param_layers) + 1))
    rows = []
    for method in cfg["methods"]:
        for r in evaluation.cascading_randomization(
                model, test_set.images[:cfg["n_images"]], method, depths, cfg["seed"],
                method_kwargs(cfg, method, s)):
            for stat in ("spearman", "abs_spearman", "spearman_signed"):
                rows.append((method, r["depth"], stat, r[stat]))
    report.write_csv(run.file("sanity.csv"), ["method", "depth", "statistic", "value"], rows)
    run.record("sanity.csv")


def cmd_perturb(cfg, run):
    _check_methods(cfg["methods"])
    model = load_checkpoint(cfg["checkpoint"])
    train_set, test_set = load_data(cfg)
    fill = channel_means(train_set) if cfg["fill"] is None else np.asarray(cfg["fill"], float)
    s = resolve_sparsity(cfg, model, train_set) if _needs_sparsity(cfg["methods"]) else None
    rows, aucs = [], []
    for method in cfg["methods"]:
        curve = evaluation.pixel_perturbation_curve(
            model, test_set.images[:cfg["n_images"]], method, cfg["fractions"], fill,
            method_kwargs(cfg, method, s), descending=cfg["descending"])
        rows += [(method, x, y) for x, y in curve.rows()]
        aucs.append((method, curve.auc()))
    report.write_csv(run.file("perturb.csv"), ["method", "fraction", "mean_abs_change"], rows)
    run.record("perturb.csv")
    report.write_csv(run.file("perturb_auc.csv"), ["method", "auc"], aucs)
    run.record("perturb_auc.csv")


def _cell_name(method, p, r):
    return f"cells/{method}_p{p:g}_r{r}.json"


def cmd_roar(cfg, run):
    _check_methods(cfg["methods"])
    model = load_checkpoint(cfg["checkpoint"])
    train_set, test_set = load_data(cfg)
    methods = list(dict.fromkeys(list(cfg["methods"]) + ["random"]))
    percentiles = [float(p) for p in cfg["percentiles"]]
    done = {}
    for m in methods:
        for p in percentiles:
            for r in range(cfg["repeats"]):
                name = _cell_name(m, p, r)
                if run.verified(name):
                    done[(m, p, r)] = json.loads((run.path / name).read_text())["accuracy"]
    s = None
    if _needs_sparsity(methods) and any(
            (m, p, r) not in done for m in methods if m.startswith("prune")
            for p in percentiles for r in range(cfg["repeats"])):
        s = resolve_sparsity(cfg, model, train_set)

    def on_cell(m, p, r, acc):
        name = _cell_name(m, p, r)
        run.file(name).write_text(json.dumps({"method": m, "percentile": p, "run": r,
                                              "accuracy": acc}, sort_keys=True) + "\n")
        run.record(name)

    def on_perturbed(m, p, tr, te):
        if cfg["save_perturbed"]:
            for part, ds in (("train", tr), ("test", te)):
                name = f"perturbed/{m}_p{p:g}_{part}.bin"
                write_dataset(ds, run.file(name))
                run.record(name)

    table = evaluation.roar(
        train_set, test_set, model.spec, methods, percentiles, cfg["repeats"],
        train_config(cfg), model, cfg["fill"],
        {m: method_kwargs(cfg, m, s) for m in methods}, cfg["workers"], done,
        on_cell, on_perturbed)
    report.write_csv(run.file("roar.csv"), ["method", "percentile", "run", "test_accuracy"],
                     table.rows())
    run.record("roar.csv")
    base_acc = evaluate_accuracy(model, test_set)
    report.write_csv(run.file("roar_base.csv"), ["base_test_accuracy"], [(base_acc,)])
    run.record("roar_base.csv")


def fmt_line(key, value):
    return f"{key} {report.fmt(value)}"


HANDLERS = {"train": cmd_train, "calibrate": cmd_calibrate, "attribute": cmd_attribute,
            "sweep": cmd_sweep, "sanity": cmd_sanity, "perturb": cmd_perturb,
            "roar": cmd_roar}

ERROR_CODES = {"config": 2, "missing-input": 3, "format": 4, "diverged": 5, "runtime": 1}


def build_parser():
    p = argparse.ArgumentParser(prog="prunegrad", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--workers", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (JSON value)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run_command(command, config_path=None, overrides=None) -> Path:
    cfg = resolve_config(command, config_path, overrides)
    inputs = data_inputs(cfg)
    if cfg.get("checkpoint"):
        if not Path(cfg["checkpoint"]).exists():
            raise FileNotFoundError(f"checkpoint {cfg['checkpoint']} not found")
        inputs.append(Path(cfg["checkpoint"]))
    run = report.RunDir(cfg["out"], command, cfg, inputs)
    HANDLERS[command](cfg, run)
    return run.path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error: config: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return ERROR_CODES["config"]
        overrides[key] = _parse_value(value)
    for key in ("seed", "out", "workers"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    try:
        run_command(args.command, args.config, overrides)
    except ConfigError as e:
        category, msg = "config", e
    except FileNotFoundError as e:
        category, msg = "missing-input", e
    except (CheckpointError, DataFormatError) as e:
        category, msg = "format", e
    except TrainingDiverged as e:
        category, msg = "diverged", e
    except Exception as e:  # noqa: BLE001 - last-resort category for the CLI contract
        category, msg = "runtime", f"{type(e).__name__}: {e}"
    else:
        return 0
    print(f"error: {category}: {' '.join(str(msg).split())}", file=sys.stderr)
    return ERROR_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
