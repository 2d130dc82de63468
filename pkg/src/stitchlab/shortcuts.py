"""Class-correlated visual shortcuts stamped into image batches.

Two marker families, both 4x4 by default and unique per class:

  pattern  - a solid class-colored square at a per-sample random location
  location - a fresh uniform-noise patch at the class's fixed border anchor
  combined - both (pattern stamped first, noise may overwrite on overlap)

Stamping operates in pixel space [0, 1]; callers working with normalized
inputs stamp before normalizing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .adversarial import accuracy
from .data import normalize
from .errors import ConfigError

SHORTCUT_KINDS = ("none", "pattern", "location", "combined")

# Ten well-separated RGB values: the cube corners plus two mixed tones.
PALETTE = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (0.0, 0.0, 0.0),
    (1.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (0.0, 0.5, 1.0),
)


def default_pattern_table(num_classes: int):
    if num_classes > len(PALETTE):
        raise ConfigError(
            f"built-in palette covers {len(PALETTE)} classes; pass an explicit pattern_table"
        )
    return PALETTE[:num_classes]


def default_location_table(num_classes: int, image_hw: int, marker_size: int):
    """Non-overlapping anchors in two rows along the top and bottom borders."""
    n_top = (num_classes + 1) // 2
    n_bot = num_classes - n_top
    anchors = []
    for row, count in ((0, n_top), (image_hw - marker_size, n_bot)):
        if count == 0:
            continue
        if count == 1:
            cols = [0]
        else:
            cols = [round(i * (image_hw - marker_size) / (count - 1)) for i in range(count)]
        if any(b - a < marker_size for a, b in zip(cols, cols[1:])):
            raise ConfigError(
                f"{count} markers of size {marker_size} do not fit on a {image_hw}px border"
            )
        anchors.extend((row, c) for c in cols)
    return tuple(anchors[:num_classes])


@dataclass
class ShortcutSpec:
    kind: str = "none"
    marker_size: int = 4
    pattern_table: tuple | None = None
    location_table: tuple | None = None
    noise_seed: int = 0

    def __post_init__(self):
        if self.kind not in SHORTCUT_KINDS:
            raise ConfigError(f"unknown shortcut kind {self.kind!r}")
        if self.marker_size < 1:
            raise ConfigError("marker_size must be >= 1")

    def resolve(self, num_classes: int, image_hw: int) -> "ShortcutSpec":
        """Fill default tables and validate bounds/uniqueness for a concrete dataset."""
        if self.kind == "none":
            return self
        if self.marker_size > image_hw:
            raise ConfigError(f"{self.marker_size}px marker exceeds {image_hw}px image")
        pattern = self.pattern_table
        location = self.location_table
        if self.kind in ("pattern", "combined") and pattern is None:
            pattern = default_pattern_table(num_classes)
        if self.kind in ("location", "combined") and location is None:
            location = default_location_table(num_classes, image_hw, self.marker_size)
        if pattern is not None:
            pattern = tuple(tuple(float(v) for v in rgb) for rgb in pattern)
            if len(pattern) != num_classes or len(set(pattern)) != num_classes:
                raise ConfigError("pattern_table needs one distinct color per class")
        if location is not None:
            location = tuple(tuple(int(v) for v in rc) for rc in location)
            if len(location) != num_classes or len(set(location)) != num_classes:
                raise ConfigError("location_table needs one distinct anchor per class")
            for r, c in location:
                if not (0 <= r <= image_hw - self.marker_size
                        and 0 <= c <= image_hw - self.marker_size):
                    raise ConfigError(f"marker anchor ({r}, {c}) out of bounds")
        return replace(self, pattern_table=pattern, location_table=location)


def apply_shortcut(x: torch.Tensor, y: torch.Tensor, spec: ShortcutSpec,
                   generator: torch.Generator | None = None,
                   num_classes: int | None = None) -> torch.Tensor:
    """Stamp class-correlated markers onto a pixel-space batch.

    Pattern locations and the noise content are resampled per call; pass a
    generator for reproducibility (defaults to one seeded from
    ``spec.noise_seed``). Resolve the spec once against the dataset's class
    count (or pass ``num_classes``) so that per-class tables stay identical
    across batches that do not contain every class.
    """
    if spec.kind == "none":
        return x
    n, _, h, w = x.shape
    if num_classes is None:
        num_classes = _table_len(spec) or (int(y.max()) + 1 if y.numel() else 0)
    spec = spec.resolve(num_classes, h)
    if generator is None:
        generator = torch.Generator().manual_seed(spec.noise_seed)
    ms = spec.marker_size
    out = x.clone()
    if spec.kind in ("pattern", "combined"):
        rows = torch.randint(0, h - ms + 1, (n,), generator=generator)
        cols = torch.randint(0, w - ms + 1, (n,), generator=generator)
        colors = torch.tensor(spec.pattern_table, dtype=x.dtype)
        for idx in range(n):
            r, c = int(rows[idx]), int(cols[idx])
            out[idx, :, r:r + ms, c:c + ms] = colors[int(y[idx])].reshape(3, 1, 1)
    if spec.kind in ("location", "combined"):
        noise = torch.rand(n, 3, ms, ms, generator=generator, dtype=x.dtype)
        for idx in range(n):
            r, c = spec.location_table[int(y[idx])]
            out[idx, :, r:r + ms, c:c + ms] = noise[idx]
    return out


def _table_len(spec: ShortcutSpec) -> int:
    for table in (spec.pattern_table, spec.location_table):
        if table is not None:
            return len(table)
    return 0


def shortcut_gap(model, x: torch.Tensor, y: torch.Tensor, spec: ShortcutSpec,
                 normalization=None, num_classes: int | None = None,
                 batch_size: int = 512, seed: int = 0) -> tuple[float, float]:
    """(clean accuracy, shortcut-stamped accuracy) on pixel-space eval data.

    A positive gap (shortcut above clean) or a depressed clean accuracy both
    signal shortcut reliance in the evaluated model.
    """
    clean = accuracy(model, normalize(x, normalization), y, batch_size)
    if spec.kind == "none":
        return clean, clean
    if num_classes is None:
        num_classes = int(y.max()) + 1
    spec = spec.resolve(num_classes, x.shape[-1])
    g = torch.Generator().manual_seed(seed if seed else spec.noise_seed)
    stamped = apply_shortcut(x, y, spec, generator=g, num_classes=num_classes)
    shortcut = accuracy(model, normalize(stamped, normalization), y, batch_size)
    return clean, shortcut
