"""Adversarial objectives: relativistic average hinge and WGAN-GP."""
from __future__ import annotations

import torch

from .errors import ConfigurationError

GP_WEIGHT = 10.0


def _check(*batches: torch.Tensor) -> None:
    for b in batches:
        if b.numel() == 0:
            raise ConfigurationError("score batch is empty")


def relativistic_scores(c_real: torch.Tensor, c_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Each class's critic output relative to the other class's mean."""
    return c_real - c_fake.mean(), c_fake - c_real.mean()


def _hinge(x: torch.Tensor) -> torch.Tensor:
    # relu has subgradient 0 at the kink
    return torch.relu(x).mean()


def relativistic_hinge_d(c_real: torch.Tensor, c_fake: torch.Tensor) -> torch.Tensor:
    _check(c_real, c_fake)
    d_real, d_fake = relativistic_scores(c_real, c_fake)
    return _hinge(1.0 - d_real) + _hinge(1.0 + d_fake)


def relativistic_hinge_g(c_real: torch.Tensor, c_fake: torch.Tensor) -> torch.Tensor:
    _check(c_real, c_fake)
    d_real, d_fake = relativistic_scores(c_real, c_fake)
    return _hinge(1.0 - d_fake) + _hinge(1.0 + d_real)


def wgan_gp_d(c_real: torch.Tensor, c_fake: torch.Tensor, penalty: torch.Tensor | float = 0.0,
              weight: float = GP_WEIGHT) -> torch.Tensor:
    """``mean(c_fake) - mean(c_real) + weight * penalty``."""
    _check(c_real, c_fake)
    if weight < 0:
        raise ConfigurationError("gradient-penalty weight must be non-negative")
    return c_fake.mean() - c_real.mean() + weight * penalty


def wgan_g(c_fake: torch.Tensor) -> torch.Tensor:
    _check(c_fake)
    return -c_fake.mean()


def gradient_penalty(critic, real_pyr: list[torch.Tensor], fake_pyr: list[torch.Tensor],
                     seed: int | torch.Generator = 0) -> torch.Tensor:
    """``E[(||grad critic(x_hat)|| - 1)^2]`` over interpolates of the whole pyramid.

    One mixing coefficient per sample is shared by all levels, and the norm
    is taken over the concatenated gradients of every level.
    """
    if len(real_pyr) != len(fake_pyr):
        raise ConfigurationError("real and fake pyramids differ in depth")
    b = real_pyr[0].shape[0]
    if b == 0:
        raise ConfigurationError("score batch is empty")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    alpha = torch.rand(b, 1, 1, 1, generator=gen, dtype=real_pyr[0].dtype)
    mixed = [(alpha * r.detach() + (1 - alpha) * f.detach()).requires_grad_(True)
             for r, f in zip(real_pyr, fake_pyr)]
    scores = critic(mixed)
    grads = torch.autograd.grad(scores.sum(), mixed, create_graph=True)
    norms = torch.cat([g.reshape(b, -1) for g in grads], dim=1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()
