"""L-inf PGD attacks and clean/robust accuracy evaluation.

Epsilon and step size are given in pixel units. When the model consumes
normalized inputs, pass the dataset normalization so the perturbation budget
and the [0, 1] pixel box are rescaled per channel; the pixel-space ball is
then exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericsError


@dataclass
class AttackSpec:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iters: int = 10
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")


# Evaluation attack: PGD-20 with random start (stands in for a stronger
# attack suite at desk scale).
EVAL_ATTACK = AttackSpec(iters=20, random_start=True)


def _channel_bounds(x, normalization):
    """Per-channel epsilon scale and valid-range box in the model's input space."""
    if normalization is None:
        one = torch.ones(1, dtype=x.dtype)
        return one, torch.zeros(1, dtype=x.dtype), one
    mean, std = normalization
    mean = torch.as_tensor(mean, dtype=x.dtype).reshape(1, -1, 1, 1)
    std = torch.as_tensor(std, dtype=x.dtype).reshape(1, -1, 1, 1)
    return 1.0 / std, (0.0 - mean) / std, (1.0 - mean) / std


def pgd_attack(model, x, y, spec: AttackSpec, normalization=None,
               generator: torch.Generator | None = None) -> torch.Tensor:
    """Iterated signed-gradient ascent on cross-entropy, projected to the eps-ball.

    The model is put in eval mode while crafting (its mode is restored), so
    running statistics are untouched and the attack is deterministic under a
    fixed generator.
    """
    scale, lo, hi = _channel_bounds(x, normalization)
    eps = spec.epsilon * scale
    step = spec.step_size * scale

    was_training = model.training
    model.eval()
    x0 = x.detach()
    x_adv = x0
    if spec.random_start:
        noise = torch.rand(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
        x_adv = x0 + (noise * 2 - 1) * eps
        x_adv = torch.clamp(x_adv, lo, hi)
    for _ in range(spec.iters):
        with torch.enable_grad():
            x_adv = x_adv.detach().requires_grad_(True)
            loss = F.cross_entropy(model(x_adv), y)
            grad = torch.autograd.grad(loss, x_adv)[0]
        if not torch.isfinite(grad).all():
            model.train(was_training)
            raise NumericsError("non-finite attack gradient")
        x_adv = x_adv.detach() + step * grad.sign()
        x_adv = x0 + torch.clamp(x_adv - x0, -eps, eps)
        x_adv = torch.clamp(x_adv, lo, hi)
    model.train(was_training)
    return x_adv.detach()


def accuracy(model, x, y, batch_size: int = 512) -> float:
    """Top-1 accuracy of a model (or stitched model) on already-prepared inputs."""
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = x[start:start + batch_size]
            yb = y[start:start + batch_size]
            correct += int((model(xb).argmax(1) == yb).sum())
    model.train(was_training)
    return correct / x.shape[0]


def robust_accuracy(model, x, y, spec: AttackSpec, normalization=None,
                    batch_size: int = 256, seed: int = 0) -> float:
    """Accuracy on PGD-perturbed inputs, attack crafted per batch on the model."""
    generator = torch.Generator().manual_seed(seed)
    was_training = model.training
    model.eval()
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        xb_adv = pgd_attack(model, xb, yb, spec, normalization=normalization, generator=generator)
        with torch.no_grad():
            correct += int((model(xb_adv).argmax(1) == yb).sum())
    model.train(was_training)
    return correct / x.shape[0]
