"""Similarity artifacts: stitching plots, cross-layer grids, CKA, probes.

Every artifact is a plain dataclass with dict round-tripping, so runs persist
to JSON and rendering never needs to touch a model again.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import torch

from .adversarial import AttackSpec, EVAL_ATTACK, pgd_attack
from .data import ImageDataset, normalize, stable_seed
from .errors import ConfigError
from .nets import ActivationBatch, TappedNetwork
from .objectives import ObjectiveKind
from .shortcuts import ShortcutSpec
from .stitch import StitchedModel
from .trainer import StitchTask, StitchTrainRecipe, evaluate_stitched, run_stitch_task


@dataclass
class StitchingPlot:
    """Metric-vs-depth curves for i = j stitching, with baseline endpoints."""

    depths: list
    curves: dict  # objective label -> metric name -> list of values
    endpoints: dict  # "front"/"end" -> metric name -> value

    def to_dict(self):
        return {"depths": list(self.depths), "curves": self.curves, "endpoints": self.endpoints}

    @classmethod
    def from_dict(cls, d):
        return cls(depths=d["depths"], curves=d["curves"], endpoints=d["endpoints"])


@dataclass
class CrossLayerGrid:
    """Stitched accuracy over (front tap, end tap) pairs.

    ``values[a][b]`` is the metric when stitching front tap ``taps[a]`` into
    end tap ``taps[b]``. Averaged mode symmetrizes with the transposed cell,
    which is meaningful for self-stitching comparisons.
    """

    values: list  # row-major nested lists
    taps: list
    objective: str
    direction_mode: str = "directional"

    def __post_init__(self):
        if self.direction_mode not in ("directional", "averaged"):
            raise ConfigError(f"unknown direction mode {self.direction_mode!r}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def averaged(self) -> "CrossLayerGrid":
        arr = self.as_array()
        if arr.shape[0] != arr.shape[1]:
            raise ConfigError("averaged mode needs a square grid")
        sym = (arr + arr.T) / 2
        return replace(self, values=sym.tolist(), direction_mode="averaged")

    def to_dict(self):
        return {"values": self.values, "taps": list(self.taps),
                "objective": self.objective, "direction_mode": self.direction_mode}

    @classmethod
    def from_dict(cls, d):
        return cls(values=d["values"], taps=d["taps"], objective=d["objective"],
                   direction_mode=d["direction_mode"])


def _metric_value(metrics: dict, name: str) -> float:
    if name not in metrics:
        raise ConfigError(f"metric {name!r} not produced; have {sorted(metrics)}")
    return metrics[name]


def _map_cells(fn, items, workers: int = 1):
    """Run independent stitch cells, optionally on a thread pool.

    Each cell clones its own nets and seeds its own generators, so results
    are identical regardless of worker count; output order follows input.
    """
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(item) for item in items]


def evaluate_baseline(net, eval_data: ImageDataset, metrics=("clean_acc",),
                      shortcut: ShortcutSpec | None = None, seed: int = 0) -> dict:
    """Baseline metrics through the exact evaluation path used for stitched models."""
    return evaluate_stitched(net, eval_data, metrics, shortcut=shortcut, seed=seed, epoch=-1)


def build_stitching_plot(front: TappedNetwork, end: TappedNetwork,
                         objectives, metrics, recipe: StitchTrainRecipe,
                         train_data: ImageDataset, eval_data: ImageDataset,
                         taps=None, seed: int = 0, workers: int = 1) -> StitchingPlot:
    """Train one stitch per tap per objective (i = j) and assemble the curves."""
    taps = list(taps) if taps is not None else list(front.tap_indices)
    metrics = list(metrics)
    curves = {}
    for objective in objectives:
        recipe_obj = replace(recipe, objective=objective, eval_every=0)

        def cell_at(tap, recipe_obj=recipe_obj, objective=objective):
            task = StitchTask(front, end, tap, tap, recipe_obj, train_data, eval_data=None,
                              seed=stable_seed("plot", seed, objective.label(), tap))
            result = run_stitch_task(task)
            return evaluate_stitched(result.model, eval_data, metrics,
                                     shortcut=recipe.shortcut, seed=task.seed)

        cells = _map_cells(cell_at, taps, workers)
        curves[objective.label()] = {m: [_metric_value(c, m) for c in cells] for m in metrics}
    endpoints = {
        "front": evaluate_baseline(front, eval_data, metrics, recipe.shortcut, seed),
        "end": evaluate_baseline(end, eval_data, metrics, recipe.shortcut, seed),
    }
    return StitchingPlot(depths=taps, curves=curves, endpoints=endpoints)


def build_cross_layer_grid(front: TappedNetwork, end: TappedNetwork,
                           objective: ObjectiveKind, recipe: StitchTrainRecipe,
                           direction_mode: str, train_data: ImageDataset,
                           eval_data: ImageDataset, metric: str = "clean_acc",
                           taps=None, seed: int = 0, workers: int = 1) -> CrossLayerGrid:
    """Full (front tap x end tap) accuracy matrix; cells are independent seeded jobs."""
    taps = list(taps) if taps is not None else list(front.tap_indices)
    recipe_obj = replace(recipe, objective=objective, eval_every=0)

    def cell_at(pair):
        a, b = pair
        task = StitchTask(front, end, a, b, recipe_obj, train_data, eval_data=None,
                          seed=stable_seed("grid", seed, objective.label(), a, b))
        result = run_stitch_task(task)
        cell = evaluate_stitched(result.model, eval_data, [metric],
                                 shortcut=recipe.shortcut, seed=task.seed)
        return _metric_value(cell, metric)

    pairs = [(a, b) for a in taps for b in taps]
    flat = _map_cells(cell_at, pairs, workers)
    values = [flat[r * len(taps):(r + 1) * len(taps)] for r in range(len(taps))]
    grid = CrossLayerGrid(values=values, taps=taps, objective=objective.label())
    if direction_mode == "averaged":
        grid = grid.averaged()
    elif direction_mode != "directional":
        raise ConfigError(f"unknown direction mode {direction_mode!r}")
    return grid


def self_accuracy(grid: CrossLayerGrid) -> float:
    """Fraction of rows whose most-similar column is the row itself.

    Argmax ties break toward the lowest index.
    """
    arr = grid.as_array()
    if arr.shape[0] != arr.shape[1]:
        raise ConfigError("Self-Accuracy needs a square grid")
    hits = sum(int(np.argmax(row) == idx) for idx, row in enumerate(arr))
    return hits / arr.shape[0]


def linear_cka(a, b) -> float:
    """Linear centered kernel alignment on flattened, column-centered features."""
    a = a.values if isinstance(a, ActivationBatch) else a
    b = b.values if isinstance(b, ActivationBatch) else b
    a = torch.as_tensor(a).detach().flatten(1).to(torch.float64)
    b = torch.as_tensor(b).detach().flatten(1).to(torch.float64)
    if a.shape[0] != b.shape[0]:
        raise ConfigError("CKA needs equal sample counts")
    a = a - a.mean(0, keepdim=True)
    b = b - b.mean(0, keepdim=True)
    cross = torch.linalg.matrix_norm(a.T @ b) ** 2
    na = torch.linalg.matrix_norm(a.T @ a)
    nb = torch.linalg.matrix_norm(b.T @ b)
    if float(na) == 0.0 or float(nb) == 0.0:
        warnings.warn("zero-variance input to CKA; returning 0")
        return 0.0
    return float(min(max(cross / (na * nb), 0.0), 1.0))


def subset_class_curve(front: TappedNetwork, end: TappedNetwork, objective: ObjectiveKind,
                       class_counts, recipe: StitchTrainRecipe, train_data: ImageDataset,
                       eval_data: ImageDataset, tap: int, seed: int = 0) -> dict:
    """Train on progressively larger label-index class subsets, evaluate on everything."""
    counts = sorted(int(c) for c in class_counts)
    if counts != list(class_counts):
        raise ConfigError("class_counts must be increasing")
    curve = {}
    for count in counts:
        subset = tuple(range(count))
        recipe_c = replace(recipe, objective=objective, class_subset=subset, eval_every=0)
        task = StitchTask(front, end, tap, tap, recipe_c, train_data, eval_data=None,
                          seed=stable_seed("subset", seed, objective.label(), count))
        result = run_stitch_task(task)
        cell = evaluate_stitched(result.model, eval_data, ["clean_acc"], seed=task.seed)
        curve[count] = cell["clean_acc"]
    return curve


def stitched_penultimate(sm: StitchedModel, x: torch.Tensor) -> torch.Tensor:
    """The stitched model's activation at the end net's penultimate tap."""
    z = sm.stitch_activation(x)
    for seg in sm.end.segments[sm.j:]:
        z = seg(z)
    return z


def penultimate_similarity_probe(front: TappedNetwork, end: TappedNetwork, taps,
                                 recipe: StitchTrainRecipe, train_data: ImageDataset,
                                 eval_data: ImageDataset, attack: AttackSpec = EVAL_ATTACK,
                                 seed: int = 0, cka_samples: int = 256) -> dict:
    """Per-tap penultimate-layer similarity: FuLA restricted to the deepest Hint,
    plus CKA between stitched and native penultimate activations on adversarial
    inputs crafted against the DM-initialized stitched model."""
    taps = list(taps)
    fula_acc = []
    cka_vals = []
    norm = eval_data.normalization
    x_eval = eval_data.images[:cka_samples]
    y_eval = eval_data.labels[:cka_samples]
    for tap in taps:
        last_only = replace(recipe, objective=ObjectiveKind.fula(mode="last-only"), eval_every=0)
        task = StitchTask(front, end, tap, tap, last_only, train_data, eval_data=None,
                          seed=stable_seed("probe", seed, tap))
        result = run_stitch_task(task)
        cell = evaluate_stitched(result.model, eval_data, ["clean_acc"], seed=task.seed)
        fula_acc.append(cell["clean_acc"])

        init_only = replace(last_only, epochs=0)
        sm0 = run_stitch_task(StitchTask(front, end, tap, tap, init_only, train_data,
                                         seed=stable_seed("probe-init", seed, tap))).model
        sm0.eval()
        g = torch.Generator().manual_seed(stable_seed("probe-adv", seed, tap))
        xn = normalize(x_eval, norm)
        x_adv = pgd_attack(sm0, xn, y_eval, attack, normalization=norm, generator=g)
        with torch.no_grad():
            a = stitched_penultimate(sm0, x_adv)
            b = end.compose_to(end.num_taps, x_adv)
        cka_vals.append(linear_cka(a, b))
    return {"taps": taps, "fula_last_only_acc": fula_acc, "cka_adversarial": cka_vals}
