"""Stitching optimality conditions: SLM, TLM, Hint (direct matching), FuLA.

All losses are pure functions of their inputs and evaluate the frozen
networks in whatever train/eval mode the caller has set. Feature targets are
computed under no_grad: end-model buffers and activations are constants
within a loss evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .adversarial import AttackSpec, pgd_attack
from .errors import ConfigError, LabelError, NumericsError
from .nets import ActivationBatch

log = logging.getLogger(__name__)

# Guard for degenerate all-zero targets in normalized Hint terms.
NORM_EPS = 1e-8

OBJECTIVE_TAGS = ("SLM", "TLM", "Hint", "FuLA")
FULA_MODES = ("uniform", "last-only", "cutoff")


@dataclass
class FuLAWeights:
    """Simplex weights over the structural Hint (tap j) and functional Hints (j+1..k)."""

    c: tuple[float, ...]
    cutoff: int | None = None

    def __post_init__(self):
        self.c = tuple(float(v) for v in self.c)
        if any(v < 0 for v in self.c):
            raise ConfigError("FuLA weights must be nonnegative")
        if abs(sum(self.c) - 1.0) > 1e-6:
            raise ConfigError(f"FuLA weights must sum to 1, got {sum(self.c)}")


def make_fula_weights(j: int, k: int, mode: str = "uniform", n: int | None = None) -> FuLAWeights:
    """Weight vector of length k + 1 - j for stitching at end tap j.

    uniform: every Hint weighted equally. last-only: all mass on the deepest
    Hint (tap k). cutoff: uniform over the structural Hint plus the first n
    functional Hints, zero beyond.
    """
    if j > k:
        raise ConfigError(f"need j <= k, got j={j}, k={k}")
    m = k + 1 - j
    if mode == "uniform":
        c = (1.0 / m,) * m
    elif mode == "last-only":
        c = (0.0,) * (m - 1) + (1.0,)
    elif mode == "cutoff":
        if n is None:
            raise ConfigError("cutoff mode requires n")
        if n > k - j:
            raise ConfigError(f"cutoff n={n} exceeds the {k - j} available functional Hints")
        c = (1.0 / (n + 1),) * (n + 1) + (0.0,) * (m - n - 1)
    else:
        raise ConfigError(f"unknown FuLA weight mode {mode!r}")
    return FuLAWeights(c, cutoff=n if mode == "cutoff" else None)


@dataclass
class ObjectiveKind:
    """Which optimality condition trains the stitch layer.

    For FuLA, either explicit weights are given or a mode that is
    materialized per task once the tap pair (j, k) is known.
    """

    tag: str
    fula_weights: FuLAWeights | None = None
    fula_mode: str = "uniform"
    fula_n: int | None = None

    def __post_init__(self):
        if self.tag not in OBJECTIVE_TAGS:
            raise ConfigError(f"unknown objective tag {self.tag!r}")
        if self.tag != "FuLA" and self.fula_weights is not None:
            raise ConfigError(f"{self.tag} objective takes no FuLA weights")
        if self.tag == "FuLA" and self.fula_mode not in FULA_MODES:
            raise ConfigError(f"unknown FuLA weight mode {self.fula_mode!r}")

    @classmethod
    def slm(cls):
        return cls("SLM")

    @classmethod
    def tlm(cls):
        return cls("TLM")

    @classmethod
    def hint(cls):
        return cls("Hint")

    @classmethod
    def fula(cls, weights: FuLAWeights | None = None, mode: str = "uniform", n: int | None = None):
        return cls("FuLA", fula_weights=weights, fula_mode=mode, fula_n=n)

    def materialize(self, j: int, k: int) -> FuLAWeights | None:
        """Resolve FuLA weights for a concrete tap pair; None for other tags."""
        if self.tag != "FuLA":
            return None
        if self.fula_weights is not None:
            if len(self.fula_weights.c) != k + 1 - j:
                raise ConfigError(
                    f"FuLA weights of length {len(self.fula_weights.c)} do not fit "
                    f"taps j={j}, k={k} (need {k + 1 - j})"
                )
            return self.fula_weights
        return make_fula_weights(j, k, self.fula_mode, self.fula_n)

    def label(self) -> str:
        if self.tag != "FuLA":
            return self.tag
        if self.fula_weights is not None:
            return "FuLA"
        if self.fula_mode == "uniform":
            return "FuLA"
        if self.fula_mode == "cutoff":
            return f"FuLA:cutoff{self.fula_n}"
        return f"FuLA:{self.fula_mode}"


@dataclass
class ATConfig:
    """Mixture of clean and adversarial samples in the training objective."""

    alpha: float = 0.5
    attack: AttackSpec = field(default_factory=AttackSpec)

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


def _values(a):
    return a.values if isinstance(a, ActivationBatch) else a


def slm_loss(stitched_logits: torch.Tensor, end_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of stitched predictions against the end model's soft labels."""
    if not torch.isfinite(stitched_logits).all() or not torch.isfinite(end_logits).all():
        raise NumericsError("non-finite logits in slm_loss")
    soft = F.softmax(end_logits.detach(), dim=1)
    return -(soft * F.log_softmax(stitched_logits, dim=1)).sum(1).mean()


def tlm_loss(stitched_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy against hard labels."""
    num_classes = stitched_logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return F.cross_entropy(stitched_logits, labels)


def hint_loss(t_out, target, normalized: bool = False) -> torch.Tensor:
    """Batch-level Frobenius distance; the unnormalized form is the DM objective.

    With ``normalized`` the distance is divided by the target's own Frobenius
    norm, which removes the scale differences between activation depths.
    """
    t_out = _values(t_out)
    target = _values(target).detach()
    if t_out.shape != target.shape:
        raise ConfigError(f"hint shapes differ: {tuple(t_out.shape)} vs {tuple(target.shape)}")
    dist = torch.linalg.vector_norm(t_out - target)
    if not normalized:
        return dist
    denom = torch.linalg.vector_norm(target)
    if denom < NORM_EPS:
        log.warning("hint target has ~zero norm; denominator epsilon-guarded")
    return dist / denom.clamp_min(NORM_EPS)


def fula_loss(sm, x: torch.Tensor, w: FuLAWeights) -> torch.Tensor:
    """Weighted structural + functional Hints, all normalized by target norms.

    The structural term compares the stitch output with the end model's native
    activation at tap j; each functional term pushes the stitched activation
    through further frozen end segments and compares at tap l, up to the
    penultimate tap k (output-level cues excluded).
    """
    j, k = sm.j, sm.end.num_taps
    if len(w.c) != k + 1 - j:
        raise ConfigError(f"FuLA weights of length {len(w.c)} do not fit j={j}, k={k}")
    z = sm.stitch_activation(x)
    with torch.no_grad():
        native = sm.end.compose_to(j, x)
    total = x.new_zeros(())
    if w.c[0] > 0:
        total = total + w.c[0] * hint_loss(z, native, normalized=True)
    last = max((idx for idx, v in enumerate(w.c) if v > 0), default=0)
    for idx in range(1, last + 1):
        seg = sm.end.segments[j + idx - 1]
        z = seg(z)
        with torch.no_grad():
            native = seg(native)
        if w.c[idx] > 0:
            total = total + w.c[idx] * hint_loss(z, native, normalized=True)
    return total


def stitch_objective_loss(kind: ObjectiveKind, sm, x: torch.Tensor, y: torch.Tensor,
                          weights: FuLAWeights | None = None) -> torch.Tensor:
    """Evaluate one training objective for a stitched model on a prepared batch."""
    if kind.tag == "SLM":
        with torch.no_grad():
            end_logits = sm.end(x)
        return slm_loss(sm(x), end_logits)
    if kind.tag == "TLM":
        return tlm_loss(sm(x), y)
    if kind.tag == "Hint":
        with torch.no_grad():
            target = sm.end.compose_to(sm.j, x)
        return hint_loss(sm.stitch_activation(x), target, normalized=False)
    w = weights if weights is not None else kind.materialize(sm.j, sm.end.num_taps)
    return fula_loss(sm, x, w)


def at_mixture_loss(base_loss_fn, model, x: torch.Tensor, y: torch.Tensor, cfg: ATConfig,
                    normalization=None, generator: torch.Generator | None = None) -> torch.Tensor:
    """(1 - alpha) * loss(clean) + alpha * loss(adversarial).

    Adversarial examples are crafted against the supplied model (for stitching
    runs: the stitched model) with the configured attack; at alpha = 0 no
    attack is run, at alpha = 1 only the adversarial term remains.
    """
    if cfg.alpha == 0:
        return base_loss_fn(x, y)
    x_adv = pgd_attack(model, x, y, cfg.attack, normalization=normalization, generator=generator)
    adv = base_loss_fn(x_adv, y)
    if cfg.alpha == 1:
        return adv
    return (1 - cfg.alpha) * base_loss_fn(x, y) + cfg.alpha * adv
