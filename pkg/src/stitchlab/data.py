"""Datasets for stitching runs: CIFAR-10/100 and a procedural substitute.

Images are kept as in-memory float tensors in pixel space [0, 1] (desk scale
fits comfortably); normalization is applied explicitly where models consume
inputs, so attacks and shortcut stamping can operate in pixel space exactly.

The synthetic dataset is a 10-way classification task built from per-class
templates: a strong low-frequency pattern with a wide margin plus a weak
high-frequency cue. Networks trained on clean data latch onto the weak cue
and are adversarially fragile, while robust solutions (using the strong
pattern) exist, which is the regime the adversarial protocols need. The
``synthetic-alt`` variant draws templates from a different task seed and
serves as the cross-task source.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ConfigError

NORMALIZATIONS = {
    "none": None,
    "half": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}

SYNTHETIC_CLASSES = 10
SYNTHETIC_DEFAULT_SIZE = {"train": 2048, "test": 1024}

# Synthetic template amplitudes: the strong pattern carries a wide margin,
# the weak cue sits just above the default attack budget of 8/255. Clean
# training latches onto the weak cue, so PGD at 8/255 collapses accuracy.
STRONG_AMP = 0.25
WEAK_AMP = 0.04
NOISE_STD = 0.15
MAX_SHIFT = 3


def stable_seed(*parts) -> int:
    """Deterministic across sessions (unlike hash()) for seeding generators."""
    return zlib.crc32("/".join(str(p) for p in parts).encode())


@dataclass
class DatasetSpec:
    name: str
    split: str = "train"
    class_subset: tuple[int, ...] | None = None
    resolution: int = 32
    normalization: str | tuple = "half"
    size: int | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be train or test, got {self.split!r}")
        if self.class_subset is not None:
            self.class_subset = tuple(int(c) for c in self.class_subset)
            if not self.class_subset:
                raise ConfigError("class_subset must be nonempty when given")


def resolve_normalization(normalization):
    """Map a named normalization or explicit (mean, std) pair to tensors-ready tuples."""
    if normalization is None:
        return None
    if isinstance(normalization, str):
        if normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {normalization!r}")
        return NORMALIZATIONS[normalization]
    mean, std = normalization
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def normalize(x: torch.Tensor, normalization) -> torch.Tensor:
    norm = resolve_normalization(normalization)
    if norm is None:
        return x
    mean, std = norm
    mean = torch.as_tensor(mean, dtype=x.dtype).reshape(1, -1, 1, 1)
    std = torch.as_tensor(std, dtype=x.dtype).reshape(1, -1, 1, 1)
    return (x - mean) / std


def denormalize(x: torch.Tensor, normalization) -> torch.Tensor:
    norm = resolve_normalization(normalization)
    if norm is None:
        return x
    mean, std = norm
    mean = torch.as_tensor(mean, dtype=x.dtype).reshape(1, -1, 1, 1)
    std = torch.as_tensor(std, dtype=x.dtype).reshape(1, -1, 1, 1)
    return x * std + mean


class ImageDataset:
    """Labeled image tensors in pixel space plus the spec that produced them."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, num_classes: int,
                 spec: DatasetSpec):
        if images.shape[0] != labels.shape[0]:
            raise ConfigError("images and labels disagree on sample count")
        self.images = images
        self.labels = labels
        self.num_classes = num_classes
        self.spec = spec

    def __len__(self):
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    @property
    def normalization(self):
        return resolve_normalization(self.spec.normalization)

    def normalized_images(self) -> torch.Tensor:
        return normalize(self.images, self.spec.normalization)

    def subset_classes(self, classes) -> "ImageDataset":
        """Keep only samples of the given labels; labels are NOT remapped."""
        classes = tuple(int(c) for c in classes)
        bad = [c for c in classes if not 0 <= c < self.num_classes]
        if bad:
            raise ConfigError(f"class_subset entries {bad} outside [0, {self.num_classes})")
        mask = torch.isin(self.labels, torch.tensor(classes))
        return ImageDataset(self.images[mask], self.labels[mask], self.num_classes,
                            replace(self.spec, class_subset=classes))

    def first_n(self, n: int) -> "ImageDataset":
        return ImageDataset(self.images[:n], self.labels[:n], self.num_classes,
                            replace(self.spec, size=min(n, len(self))))


def _stratified_head(images, labels, n, num_classes):
    """First n samples balanced across classes, preserving original order."""
    per_class = [int(t) for t in torch.bincount(labels, minlength=num_classes)]
    want = [n // num_classes + (1 if c < n % num_classes else 0) for c in range(num_classes)]
    if any(w > have for w, have in zip(want, per_class)):
        raise ConfigError(f"cannot draw {n} stratified samples from class counts {per_class}")
    taken = [0] * num_classes
    keep = []
    for idx, lab in enumerate(labels.tolist()):
        if taken[lab] < want[lab]:
            taken[lab] += 1
            keep.append(idx)
        if len(keep) == n:
            break
    keep = torch.tensor(keep)
    return images[keep], labels[keep]


def _synthetic_templates(task_seed: int, resolution: int):
    g = torch.Generator().manual_seed(stable_seed("templates", task_seed))
    low = torch.randn(SYNTHETIC_CLASSES, 3, 4, 4, generator=g)
    strong = F.interpolate(low, size=(resolution, resolution), mode="bilinear",
                           align_corners=False)
    strong = strong / strong.abs().amax(dim=(1, 2, 3), keepdim=True) * STRONG_AMP
    weak = torch.sign(torch.randn(SYNTHETIC_CLASSES, 3, resolution, resolution, generator=g))
    weak = weak * WEAK_AMP
    return strong, weak


def _synthetic(spec: DatasetSpec, task_seed: int) -> ImageDataset:
    n = spec.size if spec.size is not None else SYNTHETIC_DEFAULT_SIZE[spec.split]
    res = spec.resolution
    strong, weak = _synthetic_templates(task_seed, res)
    g = torch.Generator().manual_seed(stable_seed("samples", task_seed, spec.split))
    labels = torch.arange(n) % SYNTHETIC_CLASSES
    shifts = torch.randint(-MAX_SHIFT, MAX_SHIFT + 1, (n, 2), generator=g)
    noise = torch.randn(n, 3, res, res, generator=g) * NOISE_STD
    images = torch.empty(n, 3, res, res)
    for idx in range(n):
        y = int(labels[idx])
        pattern = torch.roll(strong[y] + weak[y], shifts=(int(shifts[idx, 0]), int(shifts[idx, 1])),
                             dims=(1, 2))
        images[idx] = 0.5 + pattern + noise[idx]
    images = images.clamp(0, 1)
    return ImageDataset(images, labels, SYNTHETIC_CLASSES, spec)


def _data_root(data_dir) -> Path:
    if data_dir is not None:
        return Path(data_dir)
    env = os.environ.get("STITCHLAB_DATA_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "stitchlab"


def _cifar(spec: DatasetSpec, data_dir, num_source_classes: int) -> ImageDataset:
    import torchvision

    cls = torchvision.datasets.CIFAR10 if num_source_classes == 10 else torchvision.datasets.CIFAR100
    ds = cls(root=str(_data_root(data_dir)), train=spec.split == "train", download=True)
    images = torch.from_numpy(ds.data).permute(0, 3, 1, 2).float() / 255.0
    labels = torch.tensor(ds.targets, dtype=torch.long)
    num_classes = num_source_classes
    if spec.name == "cifar100-10":
        # Disjoint 10-way task carved from CIFAR-100: first ten classes,
        # labels remapped onto [0, 10).
        mask = labels < 10
        images, labels = images[mask], labels[mask]
        num_classes = 10
    if spec.resolution != images.shape[-1]:
        images = F.interpolate(images, size=(spec.resolution, spec.resolution),
                               mode="bilinear", align_corners=False)
    ds = ImageDataset(images, labels, num_classes, spec)
    return ds


def load_dataset(spec: DatasetSpec, data_dir=None) -> ImageDataset:
    """Materialize a dataset; CIFAR variants hit the on-disk cache, synthetic is pure."""
    if spec.name == "synthetic":
        ds = _synthetic(spec, task_seed=0)
    elif spec.name == "synthetic-alt":
        ds = _synthetic(spec, task_seed=1)
    elif spec.name == "cifar10":
        ds = _cifar(spec, data_dir, 10)
    elif spec.name == "cifar100-10":
        ds = _cifar(spec, data_dir, 100)
    else:
        raise ConfigError(f"unknown dataset {spec.name!r}")

    if spec.class_subset is not None:
        ds = ds.subset_classes(spec.class_subset)
    if spec.size is not None and spec.name.startswith("cifar"):
        images, labels = ds.images, ds.labels
        if spec.class_subset is None:
            images, labels = _stratified_head(images, labels, spec.size, ds.num_classes)
        else:
            images, labels = images[:spec.size], labels[:spec.size]
        ds = ImageDataset(images, labels, ds.num_classes, spec)
    return ds


def augment_batch(x: torch.Tensor, generator: torch.Generator,
                  pad: int = 4, flip: bool = True) -> torch.Tensor:
    """Random horizontal flip + random crop with zero padding, per sample."""
    n, _, h, w = x.shape
    out = x
    if flip:
        mask = torch.rand(n, generator=generator) < 0.5
        out = out.clone()
        out[mask] = torch.flip(out[mask], dims=[-1])
    if pad > 0:
        padded = F.pad(out, (pad, pad, pad, pad))
        offsets = torch.randint(0, 2 * pad + 1, (n, 2), generator=generator)
        out = torch.empty_like(x)
        for idx in range(n):
            r, c = int(offsets[idx, 0]), int(offsets[idx, 1])
            out[idx] = padded[idx, :, r:r + h, c:c + w]
    return out
