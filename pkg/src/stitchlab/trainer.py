"""Training loops for base classifiers and stitching layers.

Both loops follow the same recipes at every scale: paper-size and desk-size
runs differ only in epochs, width factor, and dataset size, all of which are
plain config values. All randomness (shuffling, augmentation, attack starts,
shortcut stamping) flows from the run seed through explicit generators.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn.functional as F

from .adversarial import EVAL_ATTACK, accuracy, robust_accuracy
from .data import ImageDataset, augment_batch, normalize, stable_seed
from .errors import ConfigError, TrainingError
from .nets import TappedNetwork, build_network, clone_for_stitching, set_frozen_with_rs_update
from .objectives import ATConfig, ObjectiveKind, at_mixture_loss, stitch_objective_loss
from .shortcuts import ShortcutSpec, apply_shortcut, shortcut_gap
from .stitch import StitchedModel, StitchLayer, dm_init


class MetricsLog:
    """Per-epoch records, serializable as line-delimited JSON."""

    def __init__(self):
        self.records = []

    def append(self, **fields):
        self.records.append(dict(fields))

    @property
    def final(self) -> dict:
        return self.records[-1] if self.records else {}

    def series(self, key: str):
        return [r[key] for r in self.records if key in r]

    def to_jsonl(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def to_list(self):
        return [dict(r) for r in self.records]


@dataclass
class BaseTrainRecipe:
    """SGD recipe for front/end models; defaults follow the full-scale setup."""

    epochs: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    augment: bool = True
    at: ATConfig | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("base training needs epochs >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")


@dataclass
class StitchTrainRecipe:
    """Adam recipe for the stitching layer, starting from the pseudoinverse init."""

    objective: ObjectiveKind
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    n_init: int = 100
    augment: bool = True
    at: ATConfig | None = None
    shortcut: ShortcutSpec | None = None
    class_subset: tuple[int, ...] | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("stitch epochs must be >= 0 (0 = init only)")
        if self.n_init < 1:
            raise ConfigError("n_init must be >= 1")


@dataclass
class StitchTask:
    """Everything one stitching run needs, so grid cells are self-contained jobs."""

    front: TappedNetwork
    end: TappedNetwork
    i: int
    j: int
    recipe: StitchTrainRecipe
    train_data: ImageDataset
    eval_data: ImageDataset | None = None
    seed: int = 0


@dataclass
class StitchResult:
    model: StitchedModel
    layer: StitchLayer
    log: MetricsLog


def _guard_finite(loss, epoch):
    if not torch.isfinite(loss):
        raise TrainingError(f"loss became non-finite at epoch {epoch}", epoch=epoch)


def _epoch_batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train_base(arch_id: str, train_data: ImageDataset, recipe: BaseTrainRecipe, seed: int,
               width: float = 1.0, eval_data: ImageDataset | None = None) -> tuple[TappedNetwork, MetricsLog]:
    """Train a classifier from scratch; returns the net plus per-epoch metrics."""
    net = build_network(arch_id, train_data.num_classes, seed, width,
                        input_hw=train_data.resolution)
    norm = train_data.normalization
    opt = torch.optim.SGD(net.parameters(), lr=recipe.lr, momentum=recipe.momentum,
                          weight_decay=recipe.weight_decay)
    milestones = sorted({max(1, recipe.epochs // 3), max(1, 2 * recipe.epochs // 3)})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones,
                                                 gamma=recipe.lr_decay_factor)
    g = torch.Generator().manual_seed(stable_seed("base", seed))
    log = MetricsLog()

    def batch_loss(xb, yb):
        return F.cross_entropy(net(xb), yb)

    for epoch in range(recipe.epochs):
        net.train()
        losses = []
        for idx in _epoch_batches(len(train_data), recipe.batch_size, g):
            x = train_data.images[idx]
            y = train_data.labels[idx]
            if recipe.augment:
                x = augment_batch(x, g)
            xn = normalize(x, norm)
            if recipe.at is not None:
                loss = at_mixture_loss(batch_loss, net, xn, y, recipe.at,
                                       normalization=norm, generator=g)
            else:
                loss = batch_loss(xn, y)
            _guard_finite(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        sched.step()
        record = {"epoch": epoch, "train_loss": sum(losses) / len(losses),
                  "lr": sched.get_last_lr()[0]}
        last = epoch == recipe.epochs - 1
        if eval_data is not None and recipe.eval_every and (last or epoch % recipe.eval_every == 0):
            record["clean_acc"] = accuracy(net, eval_data.normalized_images(), eval_data.labels)
            if recipe.at is not None:
                record["robust_acc"] = robust_accuracy(
                    net, eval_data.normalized_images(), eval_data.labels,
                    EVAL_ATTACK, normalization=norm, seed=stable_seed("eval", seed, epoch))
        log.append(**record)
    net.eval()
    return net, log


def run_stitch_task(task: StitchTask) -> StitchResult:
    """DM-initialize and train one stitching layer; the result owns RS-updated
    copies of the frozen nets, so its stitched model evaluates correctly."""
    recipe = task.recipe
    front = clone_for_stitching(task.front)
    end = clone_for_stitching(task.end)
    set_frozen_with_rs_update(front, True)
    set_frozen_with_rs_update(end, True)

    data = task.train_data
    if recipe.class_subset is not None:
        data = data.subset_classes(recipe.class_subset)
    norm = data.normalization
    shortcut = None
    if recipe.shortcut is not None and recipe.shortcut.kind != "none":
        shortcut = recipe.shortcut.resolve(data.num_classes, data.resolution)

    weights = recipe.objective.materialize(task.j, end.num_taps)

    g = torch.Generator().manual_seed(stable_seed("stitch", task.seed))
    g_shortcut = torch.Generator().manual_seed(stable_seed("shortcut", task.seed))

    # Closed-form init from the first n_init training samples (no augmentation),
    # drawn from the stitch-training distribution (shortcuts included).
    n_init = min(recipe.n_init, len(data))
    x0 = data.images[:n_init]
    y0 = data.labels[:n_init]
    if shortcut is not None:
        x0 = apply_shortcut(x0, y0, shortcut, generator=g_shortcut, num_classes=data.num_classes)
    xn0 = normalize(x0, norm)
    front.eval()
    end.eval()
    with torch.no_grad():
        fa = front.compose_to(task.i, xn0)
        ea = end.compose_to(task.j, xn0)
    layer = dm_init(fa, ea, in_tap=task.i, out_tap=task.j)
    sm = StitchedModel(front, end, layer, task.i, task.j)
    log = MetricsLog()

    opt = torch.optim.Adam(layer.parameters(), lr=recipe.lr, weight_decay=recipe.weight_decay)

    def batch_loss(xb, yb):
        return stitch_objective_loss(recipe.objective, sm, xb, yb, weights=weights)

    for epoch in range(recipe.epochs):
        front.train()
        end.train()
        layer.train()
        losses = []
        for idx in _epoch_batches(len(data), recipe.batch_size, g):
            x = data.images[idx]
            y = data.labels[idx]
            if recipe.augment:
                x = augment_batch(x, g)
            if shortcut is not None:
                x = apply_shortcut(x, y, shortcut, generator=g_shortcut,
                                   num_classes=data.num_classes)
            xn = normalize(x, norm)
            if recipe.at is not None:
                loss = at_mixture_loss(batch_loss, sm, xn, y, recipe.at,
                                       normalization=norm, generator=g)
            else:
                loss = batch_loss(xn, y)
            _guard_finite(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        record = {"epoch": epoch, "train_loss": sum(losses) / len(losses)}
        last = epoch == recipe.epochs - 1
        if task.eval_data is not None and recipe.eval_every and (last or epoch % recipe.eval_every == 0):
            record.update(evaluate_stitched(sm, task.eval_data, recipe_metrics(recipe),
                                            shortcut=shortcut, seed=task.seed, epoch=epoch))
        log.append(**record)
    front.eval()
    end.eval()
    layer.eval()
    return StitchResult(model=sm, layer=layer, log=log)


def recipe_metrics(recipe: StitchTrainRecipe):
    """Metrics worth logging each epoch given what the recipe trains with."""
    metrics = ["clean_acc"]
    if recipe.at is not None and recipe.at.alpha > 0:
        metrics.append("robust_acc")
    if recipe.shortcut is not None and recipe.shortcut.kind != "none":
        metrics.append("shortcut_acc")
    return metrics


def evaluate_stitched(model, eval_data: ImageDataset, metrics=("clean_acc",),
                      shortcut: ShortcutSpec | None = None,
                      seed: int = 0, epoch: int = 0) -> dict:
    """Evaluate any requested subset of the similarity metrics.

    robust_acc always uses the evaluation attack (PGD-20 with random start),
    regardless of how the stitch was trained; shortcut_acc needs the spec of
    the markers to stamp.
    """
    norm = eval_data.normalization
    out = {}
    for name in metrics:
        if name == "clean_acc":
            out[name] = accuracy(model, eval_data.normalized_images(), eval_data.labels)
        elif name == "robust_acc":
            out[name] = robust_accuracy(
                model, eval_data.normalized_images(), eval_data.labels, EVAL_ATTACK,
                normalization=norm, seed=stable_seed("eval-rob", seed, epoch))
        elif name == "shortcut_acc":
            if shortcut is None or shortcut.kind == "none":
                raise ConfigError("shortcut_acc requested without a shortcut spec")
            _, stamped = shortcut_gap(model, eval_data.images, eval_data.labels, shortcut,
                                      normalization=norm, num_classes=eval_data.num_classes,
                                      seed=stable_seed("eval-sc", seed, epoch))
            out[name] = stamped
        else:
            raise ConfigError(f"unknown metric {name!r}")
    return out


def train_stitch(task: StitchTask) -> tuple[StitchLayer, MetricsLog]:
    """Spec-level surface: the trained layer and its metrics log."""
    result = run_stitch_task(task)
    return result.layer, result.log


def dm_residual(sm: StitchedModel, data: ImageDataset, batch_size: int = 512) -> float:
    """Frobenius distance of the stitch output vs native end activations over a dataset.

    Computed in eval mode; this is the quantity the Hint objective minimizes.
    """
    sm.front.eval()
    sm.end.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            xn = normalize(data.images[start:start + batch_size], data.normalization)
            diff = sm.stitch_activation(xn) - sm.end.compose_to(sm.j, xn)
            total += float((diff ** 2).sum())
    return math.sqrt(total)
