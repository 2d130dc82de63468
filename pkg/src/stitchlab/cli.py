"""Config-driven experiment runner: ``stitchlab run`` and ``stitchlab render``.

One config file describes one experiment. Configs are YAML (JSON is valid
YAML) validated against a published schema before any compute; unknown keys
are rejected. Every run writes a deterministic ``metrics.json`` (curves,
grids, summaries; no timestamps) plus a ``run_record.json`` with the config
hash, version stamp, wall clock, and a checksummed file manifest. Rendering
works purely from the persisted JSON.

Exit codes: 0 success, 2 schema violation, 3 training failure, 4 missing
artifact during render.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import torch
import yaml

from . import __version__
from .adversarial import EVAL_ATTACK, AttackSpec
from .analysis import (
    build_cross_layer_grid,
    build_stitching_plot,
    penultimate_similarity_probe,
    self_accuracy,
    subset_class_curve,
    CrossLayerGrid,
    StitchingPlot,
)
from .data import DatasetSpec, load_dataset
from .errors import ConfigError, TrainingError
from .nets import load_network, save_network
from .objectives import ATConfig, ObjectiveKind
from .shortcuts import ShortcutSpec
from .trainer import BaseTrainRecipe, StitchTrainRecipe, train_base

DATASET_NAMES = ["synthetic", "synthetic-alt", "cifar10", "cifar100-10"]
SYNTHETIC_SUBSTITUTE = {"cifar10": "synthetic", "cifar100-10": "synthetic-alt",
                        "synthetic": "synthetic", "synthetic-alt": "synthetic-alt"}

_DATASET_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name"],
    "properties": {
        "name": {"enum": DATASET_NAMES},
        "train_size": {"type": ["integer", "null"]},
        "test_size": {"type": ["integer", "null"]},
        "resolution": {"type": "integer", "minimum": 8},
        "normalization": {"type": "string"},
        "class_subset": {"type": ["array", "null"], "items": {"type": "integer"}},
    },
}

_ATTACK_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epsilon": {"type": "number"},
        "step_size": {"type": "number"},
        "iters": {"type": "integer"},
        "random_start": {"type": "boolean"},
    },
}

_AT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "alpha": {"type": "number"},
        "alphas": {"type": "array", "items": {"type": "number"}},
        "attack": _ATTACK_SCHEMA,
    },
}

_BASE_RECIPE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer"},
        "lr": {"type": "number"},
        "momentum": {"type": "number"},
        "batch_size": {"type": "integer"},
        "weight_decay": {"type": "number"},
        "lr_decay_factor": {"type": "number"},
        "augment": {"type": "boolean"},
        "eval_every": {"type": "integer"},
        "at": _AT_SCHEMA,
    },
}

_MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "checkpoint": {"type": "string"},
        "arch_id": {"enum": ["small-residual", "plain-conv"]},
        "seed": {"type": "integer"},
        "width": {"type": "number"},
        "dataset": _DATASET_SCHEMA,
        "recipe": _BASE_RECIPE_SCHEMA,
    },
}

_OBJECTIVE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["tag"],
    "properties": {
        "tag": {"enum": ["SLM", "TLM", "Hint", "FuLA"]},
        "mode": {"enum": ["uniform", "last-only", "cutoff"]},
        "n": {"type": "integer"},
    },
}

_STITCH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer"},
        "lr": {"type": "number"},
        "weight_decay": {"type": "number"},
        "batch_size": {"type": "integer"},
        "n_init": {"type": "integer"},
        "augment": {"type": "boolean"},
        "eval_every": {"type": "integer"},
    },
}

_SHORTCUT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["none", "pattern", "location", "combined"]},
        "marker_size": {"type": "integer"},
        "noise_seed": {"type": "integer"},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment", "seed", "dataset"],
    "properties": {
        "experiment": {"enum": ["train-base", "stitch-plot", "cross-layer",
                                "shortcut", "subset-classes", "probe"]},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "dataset": _DATASET_SCHEMA,
        "model": _MODEL_SCHEMA,
        "front": _MODEL_SCHEMA,
        "end": _MODEL_SCHEMA,
        "stitch": _STITCH_SCHEMA,
        "objectives": {"type": "array", "minItems": 1, "items": _OBJECTIVE_SCHEMA},
        "at": _AT_SCHEMA,
        "shortcut": _SHORTCUT_SCHEMA,
        "taps": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
        "tap": {"type": "integer", "minimum": 0},
        "metrics": {"type": "array", "minItems": 1,
                    "items": {"enum": ["clean_acc", "robust_acc", "shortcut_acc"]}},
        "direction_mode": {"enum": ["directional", "averaged"]},
        "class_counts": {"type": "array", "minItems": 1, "items": {"type": "integer"}},
        "workers": {"type": "integer", "minimum": 1},
    },
}


class SchemaViolation(Exception):
    def __init__(self, path: str, message: str):
        super().__init__(f"config error at {path}: {message}")
        self.path = path


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(raw: dict) -> str:
    """Stable under key reordering: hash of the canonical JSON form."""
    return hashlib.sha256(canonical_json(raw).encode()).hexdigest()


def load_config(path: str | Path) -> dict:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise SchemaViolation("$", "config must be a mapping")
    return raw


def validate_config(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: e.json_path)
    if errors:
        e = errors[0]
        raise SchemaViolation(e.json_path, e.message)
    required = {
        "train-base": ["model"],
        "stitch-plot": ["front", "end", "objectives"],
        "cross-layer": ["front", "end", "objectives"],
        "shortcut": ["front", "end", "objectives", "shortcut"],
        "subset-classes": ["front", "end", "objectives", "class_counts", "tap"],
        "probe": ["front", "end"],
    }
    for key in required[raw["experiment"]]:
        if key not in raw:
            raise SchemaViolation(f"$.{key}", f"required for experiment {raw['experiment']!r}")


def _dataset_specs(block: dict) -> tuple[DatasetSpec, DatasetSpec]:
    common = dict(
        name=block["name"],
        resolution=block.get("resolution", 32),
        normalization=block.get("normalization", "half"),
        class_subset=tuple(block["class_subset"]) if block.get("class_subset") else None,
    )
    train = DatasetSpec(split="train", size=block.get("train_size"), **common)
    test = DatasetSpec(split="test", size=block.get("test_size"), **common)
    return train, test


def _parse_attack(block: dict | None) -> AttackSpec:
    block = block or {}
    return AttackSpec(
        epsilon=block.get("epsilon", 8 / 255),
        step_size=block.get("step_size", 2 / 255),
        iters=block.get("iters", 10),
        random_start=block.get("random_start", True),
    )


def _parse_at(block: dict | None):
    """Returns a list of ATConfig-or-None, one per configured alpha."""
    if block is None:
        return [None]
    attack = _parse_attack(block.get("attack"))
    alphas = block["alphas"] if "alphas" in block else [block.get("alpha", 0.5)]
    return [ATConfig(alpha=a, attack=attack) for a in alphas]


def _parse_objective(block: dict) -> ObjectiveKind:
    if block["tag"] == "FuLA":
        return ObjectiveKind.fula(mode=block.get("mode", "uniform"), n=block.get("n"))
    return ObjectiveKind(block["tag"])


def _parse_shortcut(block: dict | None) -> ShortcutSpec | None:
    if block is None:
        return None
    return ShortcutSpec(kind=block["kind"], marker_size=block.get("marker_size", 4),
                        noise_seed=block.get("noise_seed", 0))


def _parse_base_recipe(block: dict | None) -> BaseTrainRecipe:
    block = dict(block or {})
    at = block.pop("at", None)
    recipe = BaseTrainRecipe(**block)
    if at is not None:
        recipe = replace(recipe, at=ATConfig(alpha=at.get("alpha", 0.5),
                                             attack=_parse_attack(at.get("attack"))))
    return recipe


def _parse_stitch_recipe(block: dict | None) -> StitchTrainRecipe:
    block = dict(block or {})
    block.setdefault("eval_every", 0)
    return StitchTrainRecipe(objective=ObjectiveKind.tlm(), **block)


def _materialize_model(block: dict, default_dataset: dict, root_seed: int, data_dir=None):
    """Load a checkpoint if present, else train per the block's recipe.

    A configured checkpoint path that does not exist yet acts as a cache:
    the model is trained and saved there.
    """
    ckpt = block.get("checkpoint")
    if ckpt and Path(ckpt).with_suffix(".pt").exists():
        return load_network(ckpt)
    if "arch_id" not in block:
        raise ConfigError("model block needs a checkpoint or an arch_id + recipe")
    ds_block = block.get("dataset", default_dataset)
    train_spec, test_spec = _dataset_specs(ds_block)
    train_ds = load_dataset(train_spec, data_dir)
    recipe = _parse_base_recipe(block.get("recipe"))
    net, _log = train_base(block["arch_id"], train_ds, recipe,
                           seed=block.get("seed", root_seed),
                           width=block.get("width", 1.0))
    if ckpt:
        save_network(net, ckpt)
    return net


def _apply_synthetic(raw: dict) -> dict:
    """Swap CIFAR sources for the procedural datasets (offline CI path)."""
    def swap(block):
        if isinstance(block, dict) and block.get("name") in SYNTHETIC_SUBSTITUTE:
            block = dict(block)
            block["name"] = SYNTHETIC_SUBSTITUTE[block["name"]]
        return block

    raw = dict(raw)
    if "dataset" in raw:
        raw["dataset"] = swap(raw["dataset"])
    for key in ("model", "front", "end"):
        if key in raw and "dataset" in raw[key]:
            raw[key] = dict(raw[key])
            raw[key]["dataset"] = swap(raw[key]["dataset"])
    return raw


def _apply_attack_overrides(raw: dict, overrides: dict) -> dict:
    if not overrides:
        return raw
    raw = dict(raw)
    at = dict(raw.get("at") or {})
    attack = dict(at.get("attack") or {})
    attack.update(overrides)
    at["attack"] = attack
    at.setdefault("alpha", 0.5)
    raw["at"] = at
    return raw


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(config_path, output_dir=None, synthetic: bool = False,
        attack_overrides: dict | None = None, workers: int | None = None,
        data_dir=None) -> dict:
    """Execute one experiment config; returns the run record dict."""
    started = time.time()
    raw = load_config(config_path)
    validate_config(raw)
    if synthetic:
        raw = _apply_synthetic(raw)
    raw = _apply_attack_overrides(raw, attack_overrides or {})
    if workers is not None:
        raw["workers"] = workers

    seed = raw["seed"]
    torch.manual_seed(seed)
    out_dir = Path(output_dir or raw.get("output_dir") or f"runs/{raw['experiment']}-{config_hash(raw)[:8]}")
    out_dir.mkdir(parents=True, exist_ok=True)

    experiment = raw["experiment"]
    train_spec, test_spec = _dataset_specs(raw["dataset"])
    handler = _EXPERIMENTS[experiment]
    artifacts, summary = handler(raw, train_spec, test_spec, out_dir, data_dir)

    metrics = {"experiment": experiment, "seed": seed,
               "artifacts": artifacts, "summary": summary}
    _write_json(out_dir / "metrics.json", metrics)
    _write_json(out_dir / "config.json", raw)

    manifest = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "run_record.json":
            manifest[str(path.relative_to(out_dir))] = _sha256_file(path)
    record = {
        "config_hash": config_hash(raw),
        "version": __version__,
        "started_at": datetime.now(timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
        "manifest": manifest,
        "summary": summary,
    }
    _write_json(out_dir / "run_record.json", record)
    return record


def _run_train_base(raw, train_spec, test_spec, out_dir, data_dir):
    block = raw["model"]
    ds_block = block.get("dataset", raw["dataset"])
    train_ds = load_dataset(_dataset_specs(ds_block)[0], data_dir)
    eval_ds = load_dataset(_dataset_specs(ds_block)[1], data_dir)
    recipe = _parse_base_recipe(block.get("recipe"))
    net, log = train_base(block["arch_id"], train_ds, recipe,
                          seed=block.get("seed", raw["seed"]),
                          width=block.get("width", 1.0), eval_data=eval_ds)
    ckpt = block.get("checkpoint") or str(out_dir / "model")
    save_network(net, ckpt, recipe_hash=config_hash(block))
    log.to_jsonl(out_dir / "train_log.jsonl")
    artifacts = {"train_log": log.to_list(), "checkpoint": str(Path(ckpt).with_suffix(".pt"))}
    return artifacts, {"final": log.final}


def _load_pair(raw, data_dir):
    front = _materialize_model(raw["front"], raw["dataset"], raw["seed"], data_dir)
    end = _materialize_model(raw["end"], raw["dataset"], raw["seed"], data_dir)
    return front, end


def _run_stitch_plot(raw, train_spec, test_spec, out_dir, data_dir):
    front, end = _load_pair(raw, data_dir)
    train_ds = load_dataset(train_spec, data_dir)
    eval_ds = load_dataset(test_spec, data_dir)
    objectives = [_parse_objective(o) for o in raw["objectives"]]
    metrics = raw.get("metrics", ["clean_acc"])
    recipe = _parse_stitch_recipe(raw.get("stitch"))
    recipe = replace(recipe, shortcut=_parse_shortcut(raw.get("shortcut")))
    artifacts = {}
    for at in _parse_at(raw.get("at")):
        label = "clean" if at is None else f"alpha={at.alpha:g}"
        plot = build_stitching_plot(front, end, objectives, metrics,
                                    replace(recipe, at=at), train_ds, eval_ds,
                                    taps=raw.get("taps"), seed=raw["seed"],
                                    workers=raw.get("workers", 1))
        artifacts[label] = plot.to_dict()
    summary = {label: {obj: {m: series[m][-1] for m in series}
                       for obj, series in art["curves"].items()}
               for label, art in artifacts.items()}
    return {"stitching_plots": artifacts}, summary


def _run_cross_layer(raw, train_spec, test_spec, out_dir, data_dir):
    front, end = _load_pair(raw, data_dir)
    train_ds = load_dataset(train_spec, data_dir)
    eval_ds = load_dataset(test_spec, data_dir)
    recipe = _parse_stitch_recipe(raw.get("stitch"))
    at_list = _parse_at(raw.get("at"))
    recipe = replace(recipe, at=at_list[0])
    direction_mode = raw.get("direction_mode", "directional")
    artifacts = {}
    summary = {}
    for block in raw["objectives"]:
        objective = _parse_objective(block)
        grid = build_cross_layer_grid(front, end, objective, recipe, "directional",
                                      train_ds, eval_ds, taps=raw.get("taps"),
                                      seed=raw["seed"], workers=raw.get("workers", 1))
        averaged = grid.averaged()
        entry = {
            "grid": grid.to_dict(),
            "self_accuracy": {"directional": self_accuracy(grid),
                              "averaged": self_accuracy(averaged)},
        }
        if direction_mode == "averaged":
            entry["grid_averaged"] = averaged.to_dict()
        artifacts[objective.label()] = entry
        summary[objective.label()] = entry["self_accuracy"]
    return {"cross_layer": artifacts, "direction_mode": direction_mode}, summary


def _run_shortcut(raw, train_spec, test_spec, out_dir, data_dir):
    front, end = _load_pair(raw, data_dir)
    train_ds = load_dataset(train_spec, data_dir)
    eval_ds = load_dataset(test_spec, data_dir)
    objectives = [_parse_objective(o) for o in raw["objectives"]]
    shortcut = _parse_shortcut(raw["shortcut"])
    resolved = shortcut.resolve(train_ds.num_classes, train_ds.resolution)
    metrics = raw.get("metrics", ["clean_acc", "shortcut_acc"])
    recipe = _parse_stitch_recipe(raw.get("stitch"))
    recipe = replace(recipe, shortcut=shortcut, at=_parse_at(raw.get("at"))[0])
    plot = build_stitching_plot(front, end, objectives, metrics, recipe, train_ds,
                                eval_ds, taps=raw.get("taps"), seed=raw["seed"],
                                workers=raw.get("workers", 1))
    artifacts = {
        "stitching_plots": {resolved.kind: plot.to_dict()},
        "shortcut_spec": {
            "kind": resolved.kind,
            "marker_size": resolved.marker_size,
            "pattern_table": resolved.pattern_table,
            "location_table": resolved.location_table,
            "noise_seed": resolved.noise_seed,
        },
    }
    gaps = {}
    for obj, series in plot.curves.items():
        if "shortcut_acc" in series and "clean_acc" in series:
            gaps[obj] = [s - c for s, c in zip(series["shortcut_acc"], series["clean_acc"])]
    return artifacts, {"gap_per_tap": gaps}


def _run_subset_classes(raw, train_spec, test_spec, out_dir, data_dir):
    front, end = _load_pair(raw, data_dir)
    train_ds = load_dataset(train_spec, data_dir)
    eval_ds = load_dataset(test_spec, data_dir)
    recipe = _parse_stitch_recipe(raw.get("stitch"))
    recipe = replace(recipe, at=_parse_at(raw.get("at"))[0])
    artifacts = {}
    for block in raw["objectives"]:
        objective = _parse_objective(block)
        curve = subset_class_curve(front, end, objective, raw["class_counts"], recipe,
                                   train_ds, eval_ds, tap=raw["tap"], seed=raw["seed"])
        artifacts[objective.label()] = {str(k): v for k, v in curve.items()}
    return {"subset_classes": artifacts, "tap": raw["tap"]}, artifacts


def _run_probe(raw, train_spec, test_spec, out_dir, data_dir):
    front, end = _load_pair(raw, data_dir)
    train_ds = load_dataset(train_spec, data_dir)
    eval_ds = load_dataset(test_spec, data_dir)
    recipe = _parse_stitch_recipe(raw.get("stitch"))
    at_list = _parse_at(raw.get("at"))
    attack = at_list[0].attack if at_list[0] is not None else EVAL_ATTACK
    taps = raw.get("taps") or front.tap_indices
    probe = penultimate_similarity_probe(front, end, taps, recipe, train_ds, eval_ds,
                                         attack=attack, seed=raw["seed"])
    return {"probe": probe}, {"cka_adversarial": probe["cka_adversarial"]}


_EXPERIMENTS = {
    "train-base": _run_train_base,
    "stitch-plot": _run_stitch_plot,
    "cross-layer": _run_cross_layer,
    "shortcut": _run_shortcut,
    "subset-classes": _run_subset_classes,
    "probe": _run_probe,
}


# ---------------------------------------------------------------- rendering


def _require_artifact(run_dir: Path, name: str) -> dict:
    path = run_dir / name
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}")
    return json.loads(path.read_text())


def _csv_line(fields) -> str:
    return ",".join(str(f) for f in fields) + "\n"


def _render_plot_csv(plots: dict, out: Path) -> None:
    with out.open("w") as fh:
        fh.write(_csv_line(["condition", "objective", "depth", "metric", "value", "baseline"]))
        for label, art in plots.items():
            plot = StitchingPlot.from_dict(art)
            for obj, series in plot.curves.items():
                for metric, values in series.items():
                    for depth, value in zip(plot.depths, values):
                        fh.write(_csv_line([label, obj, depth, metric, value, "false"]))
            for side, vals in plot.endpoints.items():
                for metric, value in vals.items():
                    fh.write(_csv_line([label, side, "", metric, value, "true"]))


def _render_grid_csv(grid: CrossLayerGrid, out: Path) -> None:
    with out.open("w") as fh:
        fh.write(_csv_line(["front_tap", "end_tap", "value"]))
        for a, row in zip(grid.taps, grid.values):
            for b, value in zip(grid.taps, row):
                fh.write(_csv_line([a, b, value]))


def render(run_dir, fmt: str, out_dir=None) -> list:
    """Emit csv / png / md-table views of a run's persisted artifacts."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "render"
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = _require_artifact(run_dir, "metrics.json")
    experiment = metrics["experiment"]
    artifacts = metrics["artifacts"]
    written = []

    if fmt == "csv":
        if experiment in ("stitch-plot", "shortcut"):
            out = out_dir / "stitching_plot.csv"
            _render_plot_csv(artifacts["stitching_plots"], out)
            written.append(out)
        elif experiment == "cross-layer":
            for label, entry in artifacts["cross_layer"].items():
                grid = CrossLayerGrid.from_dict(entry["grid"])
                if artifacts.get("direction_mode") == "averaged":
                    grid = grid.averaged()
                out = out_dir / f"cross_layer_{label.replace(':', '_')}.csv"
                _render_grid_csv(grid, out)
                written.append(out)
        elif experiment == "subset-classes":
            out = out_dir / "subset_classes.csv"
            with out.open("w") as fh:
                fh.write(_csv_line(["objective", "class_count", "clean_acc"]))
                for obj, curve in artifacts["subset_classes"].items():
                    for count in sorted(curve, key=int):
                        fh.write(_csv_line([obj, count, curve[count]]))
            written.append(out)
        elif experiment == "probe":
            out = out_dir / "probe.csv"
            probe = artifacts["probe"]
            with out.open("w") as fh:
                fh.write(_csv_line(["tap", "fula_last_only_acc", "cka_adversarial"]))
                for tap, acc, cka in zip(probe["taps"], probe["fula_last_only_acc"],
                                         probe["cka_adversarial"]):
                    fh.write(_csv_line([tap, acc, cka]))
            written.append(out)
        elif experiment == "train-base":
            out = out_dir / "train_log.csv"
            records = artifacts["train_log"]
            keys = sorted({k for r in records for k in r})
            with out.open("w") as fh:
                fh.write(_csv_line(keys))
                for r in records:
                    fh.write(_csv_line([r.get(k, "") for k in keys]))
            written.append(out)

    elif fmt == "md-table":
        if experiment == "cross-layer":
            out = out_dir / "self_accuracy.md"
            lines = ["| objective | Self-Accuracy |", "| --- | --- |"]
            for label, entry in artifacts["cross_layer"].items():
                sa = entry["self_accuracy"]
                lines.append(f"| {label} | {sa['directional']:.3f} ({sa['averaged']:.3f}) |")
            out.write_text("\n".join(lines) + "\n")
            written.append(out)
        else:
            out = out_dir / "summary.md"
            summary = metrics["summary"]
            lines = ["| key | value |", "| --- | --- |"]
            for key, value in sorted(_flatten(summary).items()):
                lines.append(f"| {key} | {value} |")
            out.write_text("\n".join(lines) + "\n")
            written.append(out)

    elif fmt == "png":
        written.extend(_render_png(experiment, artifacts, out_dir))
    else:
        raise ConfigError(f"unknown render format {fmt!r}")
    return written


def _flatten(obj, prefix=""):
    flat = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            flat.update(_flatten(v, f"{prefix}{k}." if prefix else f"{k}."))
    elif isinstance(obj, list):
        flat[prefix.rstrip(".")] = " ".join(f"{v:.3f}" if isinstance(v, float) else str(v)
                                            for v in obj)
    else:
        flat[prefix.rstrip(".")] = obj
    return flat


def _render_png(experiment, artifacts, out_dir: Path) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if experiment in ("stitch-plot", "shortcut"):
        plots = artifacts["stitching_plots"]
        for label, art in plots.items():
            plot = StitchingPlot.from_dict(art)
            metrics = sorted({m for s in plot.curves.values() for m in s})
            fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 4),
                                     squeeze=False)
            for ax, metric in zip(axes[0], metrics):
                for obj, series in plot.curves.items():
                    ax.plot(plot.depths, series[metric], marker="o", label=obj)
                for side, style in (("front", "--"), ("end", ":")):
                    ax.axhline(plot.endpoints[side][metric], linestyle=style,
                               color="gray", label=f"{side} baseline")
                ax.set_xlabel("stitching depth")
                ax.set_ylabel(metric)
                ax.set_title(f"{label} / {metric}")
                ax.legend(fontsize=7)
            out = out_dir / f"stitching_plot_{label.replace('=', '')}.png"
            fig.tight_layout()
            fig.savefig(out, dpi=120)
            plt.close(fig)
            written.append(out)
    elif experiment == "cross-layer":
        for label, entry in artifacts["cross_layer"].items():
            grid = CrossLayerGrid.from_dict(entry["grid"])
            fig, ax = plt.subplots(figsize=(5, 4))
            im = ax.imshow(grid.as_array(), vmin=0, vmax=1, cmap="viridis")
            ax.set_xticks(range(len(grid.taps)), grid.taps)
            ax.set_yticks(range(len(grid.taps)), grid.taps)
            ax.set_xlabel("end tap")
            ax.set_ylabel("front tap")
            sa = entry["self_accuracy"]
            ax.set_title(f"{label}: Self-Acc {sa['directional']:.2f} ({sa['averaged']:.2f})")
            fig.colorbar(im)
            out = out_dir / f"cross_layer_{label.replace(':', '_')}.png"
            fig.tight_layout()
            fig.savefig(out, dpi=120)
            plt.close(fig)
            written.append(out)
    elif experiment == "subset-classes":
        fig, ax = plt.subplots(figsize=(5, 4))
        for obj, curve in artifacts["subset_classes"].items():
            counts = sorted(curve, key=int)
            ax.plot([int(c) for c in counts], [curve[c] for c in counts], marker="o", label=obj)
        ax.set_xlabel("classes in training subset")
        ax.set_ylabel("full-distribution accuracy")
        ax.legend()
        out = out_dir / "subset_classes.png"
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    elif experiment == "probe":
        probe = artifacts["probe"]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(probe["taps"], probe["fula_last_only_acc"], marker="o", label="last-Hint accuracy")
        ax.plot(probe["taps"], probe["cka_adversarial"], marker="s", label="CKA (adversarial)")
        ax.set_xlabel("stitching depth")
        ax.legend()
        out = out_dir / "probe.png"
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    return written


# ------------------------------------------------------------------- main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stitchlab",
                                     description="Model-stitching similarity experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--output", default=None, help="override output directory")
    p_run.add_argument("--synthetic", action="store_true",
                       help="substitute procedural data for CIFAR sources")
    p_run.add_argument("--workers", type=int, default=None)
    p_run.add_argument("--data-dir", default=None, help="dataset cache directory")
    p_run.add_argument("--eps", type=float, default=None, help="attack epsilon (pixel units)")
    p_run.add_argument("--step", type=float, default=None, help="attack step size")
    p_run.add_argument("--iters", type=int, default=None, help="attack iterations")
    p_run.add_argument("--random-start", dest="random_start", default=None,
                       action=argparse.BooleanOptionalAction)

    p_render = sub.add_parser("render", help="emit plots/tables from a finished run")
    p_render.add_argument("run_dir")
    p_render.add_argument("--format", required=True, choices=["csv", "png", "md-table"])
    p_render.add_argument("--output", default=None)

    args = parser.parse_args(argv)

    if args.command == "run":
        overrides = {}
        if args.eps is not None:
            overrides["epsilon"] = args.eps
        if args.step is not None:
            overrides["step_size"] = args.step
        if args.iters is not None:
            overrides["iters"] = args.iters
        if args.random_start is not None:
            overrides["random_start"] = args.random_start
        try:
            record = run(args.config, output_dir=args.output, synthetic=args.synthetic,
                         attack_overrides=overrides, workers=args.workers,
                         data_dir=args.data_dir)
        except SchemaViolation as exc:
            print(exc, file=sys.stderr)
            return 2
        except TrainingError as exc:
            print(f"training failed: {exc}", file=sys.stderr)
            return 3
        print(json.dumps(record["summary"], sort_keys=True, indent=2))
        return 0

    try:
        written = render(args.run_dir, args.format, out_dir=args.output)
    except FileNotFoundError as exc:
        print(exc, file=sys.stderr)
        return 4
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
