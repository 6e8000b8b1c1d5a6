"""Adversarial, identity and self-reconstruction objectives.

All image distances are mean absolute pixel differences, so the weights are
independent of the slice resolution. Expectations are minibatch means.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

Critic = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class CapabilityError(RuntimeError):
    """The critic output is not differentiable with respect to its input."""


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_gan: float = 1.0
    lambda_id: float = 100.0
    lambda_rec: float = 10.0
    lambda_gp: float = 10.0

    def __post_init__(self) -> None:
        for name in ("lambda_gan", "lambda_id", "lambda_rec", "lambda_gp"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise LossInputError(f"{name} must be a finite value >= 0, got {v}")


@dataclass(frozen=True)
class AgeRange:
    a_min: float
    a_max: float

    def __post_init__(self) -> None:
        if not (0 <= self.a_min <= 100 and 0 <= self.a_max <= 100):
            raise LossInputError("age range must lie within [0, 100]")
        if self.a_min == self.a_max:
            raise LossInputError("degenerate age range: a_min == a_max")
        if self.a_min > self.a_max:
            raise LossInputError("age range needs a_min < a_max")

    @property
    def span(self) -> float:
        return abs(self.a_max - self.a_min)


def _tensor(v) -> torch.Tensor:
    return v if torch.is_tensor(v) else torch.as_tensor(v, dtype=torch.float64)


def _per_sample_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise LossInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a - b).abs()
    if diff.dim() <= 2:
        return diff.mean().reshape(1)
    return diff.flatten(1).mean(dim=1)


def interpolate(x_hat: torch.Tensor, y_o: torch.Tensor, epsilon) -> torch.Tensor:
    """z = eps * x_hat + (1 - eps) * y_o, with one eps per sample (or a scalar)."""
    eps = torch.as_tensor(epsilon, dtype=x_hat.dtype, device=x_hat.device)
    if eps.dim() == 1:
        eps = eps.view(-1, *([1] * (x_hat.dim() - 1)))
    if ((eps < 0) | (eps > 1)).any():
        raise LossInputError("epsilon must lie in [0, 1]")
    return eps * x_hat + (1 - eps) * y_o


def critic_input_gradient_norms(D: Critic, z: torch.Tensor, a_o: torch.Tensor, h_o: torch.Tensor,
                                *, create_graph: bool = False) -> torch.Tensor:
    """Per-sample ||grad_z D(z, a_o, h_o)||_2."""
    z = z if z.requires_grad else z.detach().requires_grad_(True)
    score = D(z, a_o, h_o)
    if not score.requires_grad:
        raise CapabilityError("critic output carries no gradient; cannot compute gradient penalty")
    (grad,) = torch.autograd.grad(score.sum(), z, create_graph=create_graph, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(z)
    return grad.flatten(1).norm(2, dim=1) if grad.dim() > 1 else grad.norm(2).reshape(1)


def gradient_penalty(
    D: Critic,
    x_hat: torch.Tensor,
    y_o: torch.Tensor,
    a_o: torch.Tensor,
    h_o: torch.Tensor,
    epsilon,
    *,
    create_graph: bool = True,
) -> torch.Tensor:
    """Mean over the batch of (||grad_z D(z, a_o, h_o)||_2 - 1)^2.

    ``x_hat`` is detached; the penalty only trains the critic.
    """
    z = interpolate(x_hat.detach(), y_o.detach(), epsilon).requires_grad_(True)
    norms = critic_input_gradient_norms(D, z, a_o, h_o, create_graph=create_graph)
    return ((norms - 1) ** 2).mean()


def critic_loss(w_real, w_fake, gp, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Quantity the critic minimizes: -(E[w_real] - E[w_fake]) + lambda_gp * gp."""
    w_real, w_fake, gp = _tensor(w_real), _tensor(w_fake), _tensor(gp)
    loss = -(w_real.mean() - w_fake.mean()) + weights.lambda_gp * gp
    if not torch.isfinite(loss):
        raise FloatingPointError("critic loss is not finite")
    return loss


def generator_adversarial_loss(w_fake) -> torch.Tensor:
    return -_tensor(w_fake).mean()


def identity_weight(a_i, a_o, age_range: AgeRange):
    """exp(-|a_o - a_i| / |a_max - a_min|), elementwise."""
    if torch.is_tensor(a_i) or torch.is_tensor(a_o):
        return torch.exp(-(torch.as_tensor(a_o) - torch.as_tensor(a_i)).abs() / age_range.span)
    return math.exp(-abs(a_o - a_i) / age_range.span)


def identity_loss(x_i: torch.Tensor, x_hat: torch.Tensor, a_i, a_o, age_range: AgeRange) -> torch.Tensor:
    """Age-weighted L1 between the input and its forward-aged synthesis.

    ``a_i``/``a_o`` are scalars or per-sample tensors; every pair must satisfy
    a_o > a_i. Health state plays no part here.
    """
    l1 = _per_sample_l1(x_i, x_hat)
    a_i = torch.as_tensor(a_i, dtype=l1.dtype, device=l1.device).reshape(-1)
    a_o = torch.as_tensor(a_o, dtype=l1.dtype, device=l1.device).reshape(-1)
    if (a_o <= a_i).any():
        raise LossInputError("identity loss requires a_o > a_i for every pair")
    return (l1 * identity_weight(a_i, a_o, age_range)).mean()


def reconstruction_loss(x_i: torch.Tensor, x_hat_same: torch.Tensor) -> torch.Tensor:
    return _per_sample_l1(x_i, x_hat_same).mean()


def total_generator_loss(l_gan, l_id, l_rec, weights: LossWeights = LossWeights()):
    return weights.lambda_gan * l_gan + weights.lambda_id * l_id + weights.lambda_rec * l_rec
