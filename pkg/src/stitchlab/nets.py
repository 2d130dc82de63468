"""Small feedforward image classifiers with indexed tap points.

A network is an ordered list of *segments*; segment ``s`` maps the activation
at tap ``s - 1`` to the activation at tap ``s`` (tap 0 is the input image).
Partial compositions are evaluated by running a contiguous slice of segments,
so ``forward_from(i, forward_to(i, x))`` reuses exactly the code path of a
full forward pass and reproduces it bitwise.

Tap placement for both architectures: tap 1 is the first conv stem, taps 2-9
are the eight conv/residual blocks (first and last block of each of the four
stages), giving 9 stitching locations. Tap 9 is the pre-classifier feature
map; the head (global average pool + linear) sits after it.

Channel widths per tap at width factor 1.0 (input 32x32):

    tap        1    2    3    4    5    6    7    8    9
    channels   64   64   64   128  128  256  256  512  512
    spatial    32   32   32   16   16   8    8    4    4
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidTap, NumericsError, ShapeError

ARCH_IDS = ("small-residual", "plain-conv")

# Running-statistics momentum for all normalization layers. The value is the
# conventional default; it is part of the artifact config, not tunable per run.
NORM_MOMENTUM = 0.1

BASE_WIDTHS = (64, 128, 256, 512)


@dataclass
class ActivationBatch:
    """Activations read at a tap point, tagged with their origin."""

    values: torch.Tensor
    tap_index: int
    source_arch: str = ""

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise NumericsError("activation batch contains non-finite entries")


class ConvBlock(nn.Module):
    """conv3x3-bn-relu-conv3x3-bn block, optionally with a residual skip.

    With ``residual=False`` the skip path (including any 1x1 projection) is
    removed entirely, turning the network into a plain CNN.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, residual: bool = True):
        super().__init__()
        self.residual = residual
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch, momentum=NORM_MOMENTUM)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch, momentum=NORM_MOMENTUM)
        self.skip = None
        if residual and (stride != 1 or in_ch != out_ch):
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch, momentum=NORM_MOMENTUM),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.residual:
            out = out + (x if self.skip is None else self.skip(x))
        return F.relu(out)


class ClassifierHead(nn.Module):
    """Global average pool followed by a linear classifier."""

    def __init__(self, in_ch: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_ch, num_classes)

    def forward(self, x):
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class TappedNetwork(nn.Module):
    """Layered classifier exposing indexed tap points for partial composition."""

    def __init__(self, segments, head, arch_id: str, num_classes: int, seed: int,
                 width: float = 1.0, input_hw: int = 32, in_channels: int = 3):
        super().__init__()
        self.segments = nn.ModuleList(segments)
        self.head = head
        self.arch_id = arch_id
        self.num_classes = num_classes
        self.seed = seed
        self.width = width
        self.input_hw = input_hw
        self.in_channels = in_channels
        self._frozen = False
        self._rs_update = False
        self.tap_shapes = self._trace_tap_shapes()
        channels = [s[0] for s in self.tap_shapes[1:]]
        if any(b < a for a, b in zip(channels, channels[1:])):
            raise ConfigError(f"tap channel counts must be non-decreasing, got {channels}")

    @property
    def num_taps(self) -> int:
        return len(self.segments)

    @property
    def tap_indices(self):
        return list(range(1, self.num_taps + 1))

    def _trace_tap_shapes(self):
        # Trace in eval mode: a train-mode pass would overwrite the fresh
        # normalization statistics of a just-built network.
        was_training = self.training
        super().train(False)
        shapes = [(self.in_channels, self.input_hw, self.input_hw)]
        with torch.no_grad():
            z = torch.zeros(1, *shapes[0])
            for seg in self.segments:
                z = seg(z)
                shapes.append(tuple(z.shape[1:]))
        super().train(was_training)
        return shapes

    def _check_tap(self, i: int):
        if not (0 <= i <= self.num_taps):
            raise InvalidTap(f"tap {i} not in [0, {self.num_taps}] for {self.arch_id}")

    def _check_shape(self, tap: int, x: torch.Tensor):
        expected = self.tap_shapes[tap]
        if x.dim() != len(expected) + 1 or tuple(x.shape[1:]) != expected:
            raise ShapeError(
                f"tap {tap} expects batch shape (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}"
            )

    def compose_to(self, i: int, x: torch.Tensor) -> torch.Tensor:
        """f_<=i(x) as a raw tensor; tap 0 returns x unchanged."""
        self._check_tap(i)
        self._check_shape(0, x)
        for seg in self.segments[:i]:
            x = seg(x)
        return x

    def compose_from(self, j: int, a: torch.Tensor) -> torch.Tensor:
        """f_>j(a): run the remaining segments then the classifier head."""
        self._check_tap(j)
        self._check_shape(j, a)
        for seg in self.segments[j:]:
            a = seg(a)
        return self.head(a)

    def forward(self, x):
        return self.compose_from(0, self.compose_to(0, x))

    def forward_to(self, i: int, x: torch.Tensor) -> ActivationBatch:
        return ActivationBatch(self.compose_to(i, x), tap_index=i, source_arch=self.arch_id)

    def forward_from(self, j: int, a) -> torch.Tensor:
        values = a.values if isinstance(a, ActivationBatch) else a
        return self.compose_from(j, values)

    # Frozen nets stay in eval mode unless RS updates were explicitly enabled,
    # so a stray .train() call can never resume parameter-free BN drift.
    def train(self, mode: bool = True):
        if self._frozen and not self._rs_update:
            mode = False
        return super().train(mode)


def forward_to(net: TappedNetwork, i: int, x: torch.Tensor) -> ActivationBatch:
    """Partial composition f_<=i applied to an image batch."""
    return net.forward_to(i, x)


def forward_from(net: TappedNetwork, j: int, a) -> torch.Tensor:
    """Partial composition f_>j applied to an activation batch, yielding logits."""
    return net.forward_from(j, a)


def _scaled_widths(width: float):
    widths = tuple(max(2, int(round(w * width))) for w in BASE_WIDTHS)
    return widths


def build_network(arch_id: str, num_classes: int, seed: int, width: float = 1.0,
                  input_hw: int = 32, in_channels: int = 3) -> TappedNetwork:
    """Construct a tapped classifier deterministically from (arch_id, seed).

    ``width`` scales every channel count (1.0 matches the documented table,
    0.25 is the desk-scale test size).
    """
    if arch_id not in ARCH_IDS:
        raise ConfigError(f"unknown arch_id {arch_id!r}, expected one of {ARCH_IDS}")
    residual = arch_id == "small-residual"
    w1, w2, w3, w4 = _scaled_widths(width)
    torch.manual_seed(seed)
    segments = [
        nn.Sequential(
            nn.Conv2d(in_channels, w1, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(w1, momentum=NORM_MOMENTUM),
            nn.ReLU(),
        ),
        ConvBlock(w1, w1, 1, residual),
        ConvBlock(w1, w1, 1, residual),
        ConvBlock(w1, w2, 2, residual),
        ConvBlock(w2, w2, 1, residual),
        ConvBlock(w2, w3, 2, residual),
        ConvBlock(w3, w3, 1, residual),
        ConvBlock(w3, w4, 2, residual),
        ConvBlock(w4, w4, 1, residual),
    ]
    head = ClassifierHead(w4, num_classes)
    return TappedNetwork(segments, head, arch_id, num_classes, seed, width, input_hw, in_channels)


def set_frozen_with_rs_update(net: TappedNetwork, enabled: bool) -> None:
    """Freeze all parameters; optionally keep normalization running stats live.

    With ``enabled`` the BN layers keep updating their running mean/variance
    from batches flowing through the net (train-mode normalization); without
    it the net is pinned to eval mode and nothing changes under training.
    """
    for p in net.parameters():
        p.requires_grad_(False)
    net._frozen = True
    net._rs_update = enabled
    net.eval()


def clone_for_stitching(net: TappedNetwork) -> TappedNetwork:
    """Deep copy so a stitching run owns its normalization statistics."""
    return copy.deepcopy(net)


def params_checksum(net: nn.Module) -> str:
    """Order-stable digest of all parameter values (not buffers)."""
    h = hashlib.sha256()
    for name, p in sorted(net.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def norm_stats_checksum(net: nn.Module) -> str:
    """Digest of normalization running statistics buffers only."""
    h = hashlib.sha256()
    for name, b in sorted(net.named_buffers()):
        if "running_mean" in name or "running_var" in name:
            h.update(name.encode())
            h.update(b.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def deterministic_mode():
    """Force deterministic kernels for bitwise composition checks."""
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def save_network(net: TappedNetwork, path: str | Path, recipe_hash: str = "") -> Path:
    """Write a checkpoint: binary parameter blob + JSON sidecar metadata.

    ``path`` is a prefix; ``<path>.pt`` and ``<path>.json`` are produced.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), path.with_suffix(".pt"))
    meta = {
        "arch_id": net.arch_id,
        "num_classes": net.num_classes,
        "seed": net.seed,
        "width": net.width,
        "input_hw": net.input_hw,
        "in_channels": net.in_channels,
        "recipe_hash": recipe_hash,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".pt")


def load_network(path: str | Path) -> TappedNetwork:
    """Rebuild a network from its checkpoint prefix (or .pt/.json path)."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    net = build_network(meta["arch_id"], meta["num_classes"], meta["seed"],
                        meta["width"], meta["input_hw"], meta["in_channels"])
    net.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    net.eval()
    return net
