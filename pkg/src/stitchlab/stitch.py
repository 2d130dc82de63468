"""The trainable stitching layer and its closed-form initialization.

The stitching layer is a 1x1 convolution with bias (per-spatial-position
channel mixing), preceded by an optional bilinear resize when the front and
end tap resolutions differ. The whole map is affine, so the least-squares
optimum against target activations has a closed form: one regression row per
(sample, spatial position), channel vector augmented with a constant one for
the bias, solved by Moore-Penrose pseudoinverse.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericsError, RankWarning, ShapeError
from .nets import ActivationBatch, TappedNetwork

# Singular values below this fraction of the largest are truncated, giving
# the standard minimum-norm solution on rank-deficient systems.
PINV_RCOND = 1e-6


class StitchLayer(nn.Module):
    """Affine map between activation spaces: optional resize, then 1x1 conv."""

    def __init__(self, in_channels: int, out_channels: int, resize=None,
                 in_tap: int = -1, out_tap: int = -1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1, bias=True)
        self.resize = tuple(resize) if resize is not None else None
        self.in_tap = in_tap
        self.out_tap = out_tap

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    @property
    def weight(self) -> torch.Tensor:
        """Channel-mixing matrix, shape (out_channels, in_channels)."""
        return self.conv.weight.detach()[:, :, 0, 0]

    @property
    def bias(self) -> torch.Tensor:
        return self.conv.bias.detach()

    def set_affine(self, weight: torch.Tensor, bias: torch.Tensor) -> None:
        with torch.no_grad():
            self.conv.weight.copy_(weight.reshape(self.out_channels, self.in_channels, 1, 1))
            self.conv.bias.copy_(bias.reshape(self.out_channels))

    def forward(self, a):
        if a.dim() == 2:
            a = a[:, :, None, None]
        if self.resize is not None and tuple(a.shape[-2:]) != self.resize:
            a = resize_bilinear(a, self.resize)
        return self.conv(a)


def identity_stitch_layer(channels: int, in_tap: int = -1, out_tap: int = -1,
                          dtype=torch.float32) -> StitchLayer:
    """Stitch layer with weight = I and bias = 0 (exact pass-through)."""
    layer = StitchLayer(channels, channels, in_tap=in_tap, out_tap=out_tap)
    layer.set_affine(torch.eye(channels, dtype=dtype), torch.zeros(channels, dtype=dtype))
    return layer.to(dtype)


class StitchedModel(nn.Module):
    """h = end_>j . T . front_<=i with both networks frozen."""

    def __init__(self, front: TappedNetwork, end: TappedNetwork, layer: StitchLayer,
                 i: int, j: int):
        super().__init__()
        front._check_tap(i)
        end._check_tap(j)
        in_ch = front.tap_shapes[i][0]
        out_ch = end.tap_shapes[j][0]
        if layer.in_channels != in_ch or layer.out_channels != out_ch:
            raise ShapeError(
                f"stitch layer maps {layer.in_channels}->{layer.out_channels} channels, "
                f"taps require {in_ch}->{out_ch}"
            )
        front_hw = front.tap_shapes[i][1:]
        end_hw = end.tap_shapes[j][1:]
        if front_hw != end_hw and layer.resize != tuple(end_hw):
            raise ShapeError(
                f"front tap {i} is {front_hw} but end tap {j} is {end_hw}; "
                f"layer must resize to {tuple(end_hw)}"
            )
        self.front = front
        self.end = end
        self.layer = layer
        self.i = i
        self.j = j

    def stitch_activation(self, x: torch.Tensor) -> torch.Tensor:
        """T(front_<=i(x)): the activation injected into the end model."""
        return self.layer(self.front.compose_to(self.i, x))

    def forward(self, x):
        return self.end.compose_from(self.j, self.stitch_activation(x))


def stitched_forward(sm: StitchedModel, x: torch.Tensor) -> torch.Tensor:
    """Logits of the stitched composition on an image batch."""
    return sm(x)


def resize_bilinear(a, target_hw) -> torch.Tensor:
    """Bilinear spatial resample; channels untouched, identity at equal dims."""
    values = a.values if isinstance(a, ActivationBatch) else a
    target_hw = tuple(int(v) for v in target_hw)
    if tuple(values.shape[-2:]) == target_hw:
        return values
    return F.interpolate(values, size=target_hw, mode="bilinear", align_corners=False)


def _as_rows(values: torch.Tensor) -> torch.Tensor:
    """Flatten (N, C, H, W) to one regression row per (sample, position)."""
    if values.dim() == 2:
        return values
    n, c, h, w = values.shape
    return values.permute(0, 2, 3, 1).reshape(n * h * w, c)


def dm_init(front_acts, end_acts, rcond: float = PINV_RCOND,
            in_tap: int = -1, out_tap: int = -1) -> StitchLayer:
    """Least-squares-optimal affine map from front to end activations.

    Minimizes ||T(a_front) - a_end||_F over the provided samples via
    pseudoinverse on the design matrix of per-(sample, position) channel
    vectors augmented with a constant 1 for the bias. When resolutions
    differ, the front activations are resized to the end resolution first
    and the returned layer carries that resize.
    """
    fa = front_acts.values if isinstance(front_acts, ActivationBatch) else front_acts
    ea = end_acts.values if isinstance(end_acts, ActivationBatch) else end_acts
    if not torch.isfinite(fa).all() or not torch.isfinite(ea).all():
        raise NumericsError("dm_init requires finite activations")

    resize = None
    if fa.dim() == 4 and ea.dim() == 4 and fa.shape[-2:] != ea.shape[-2:]:
        resize = tuple(ea.shape[-2:])
        fa = resize_bilinear(fa, resize)

    x = _as_rows(fa).to(torch.float64)
    y = _as_rows(ea).to(torch.float64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"front/end activations disagree on row count: {x.shape[0]} vs {y.shape[0]}")
    c_in = x.shape[1]
    c_out = y.shape[1]
    if x.shape[0] < c_in + 1:
        warnings.warn(
            f"{x.shape[0]} rows for {c_in + 1} unknowns; returning the minimum-norm solution",
            RankWarning,
        )

    ones = torch.ones(x.shape[0], 1, dtype=torch.float64)
    design = torch.cat([x, ones], dim=1)
    theta = torch.linalg.pinv(design, rtol=rcond) @ y  # (c_in + 1, c_out)

    layer = StitchLayer(c_in, c_out, resize=resize, in_tap=in_tap, out_tap=out_tap)
    dtype = (front_acts.values if isinstance(front_acts, ActivationBatch) else front_acts).dtype
    layer.to(dtype)
    layer.set_affine(theta[:c_in].T.to(dtype), theta[c_in].to(dtype))
    return layer


def save_stitch_layer(layer: StitchLayer, path: str | Path,
                      front_arch: str = "", end_arch: str = "") -> Path:
    """Checkpoint a stitch layer: weights blob + JSON sidecar with tap/arch ids."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(layer.state_dict(), path.with_suffix(".pt"))
    meta = {
        "in_channels": layer.in_channels,
        "out_channels": layer.out_channels,
        "resize": list(layer.resize) if layer.resize else None,
        "in_tap": layer.in_tap,
        "out_tap": layer.out_tap,
        "front_arch": front_arch,
        "end_arch": end_arch,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".pt")


def load_stitch_layer(path: str | Path) -> StitchLayer:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    layer = StitchLayer(meta["in_channels"], meta["out_channels"],
                        resize=meta["resize"], in_tap=meta["in_tap"], out_tap=meta["out_tap"])
    layer.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    return layer
