"""Building blocks shared by the generator and discriminator.

Self-attention with a zero-initialised residual gate, pixel normalisation,
minibatch standard deviation and power-iteration spectral normalisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError

PIXEL_NORM_EPS = 1e-8
SIGMA_FLOOR = 1e-12


def reduced_channels(channels: int, k: int) -> int:
    """Channel count of the query/key/value path, never below 1."""
    if k < 1:
        raise ConfigurationError(f"channel reduction factor must be >= 1, got {k}")
    return max(1, channels // k)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# self-attention
# --------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Weights of one attention layer.

    ``w_f``, ``w_g``, ``w_h`` have shape ``[C // k, C, 1, 1]`` and ``w_v`` has
    shape ``[C, C // k, 1, 1]`` (1x1 convolution kernels). ``gamma`` is a
    0-d tensor.
    """

    w_f: torch.Tensor
    w_g: torch.Tensor
    w_h: torch.Tensor
    w_v: torch.Tensor
    gamma: torch.Tensor
    k: int = 8

    @property
    def channels(self) -> int:
        return self.w_f.shape[1]


def attention_map(x: torch.Tensor, w_f: torch.Tensor, w_g: torch.Tensor) -> torch.Tensor:
    """Attention weights ``beta[b, j, i]``: how much output location j reads from i.

    ``s[i, j] = f(x_i) . g(x_j)`` and the softmax runs over i, so every
    ``beta[b, j, :]`` is a probability vector.
    """
    b, _, h, w = x.shape
    n = h * w
    f = F.conv2d(x, w_f).reshape(b, -1, n)  # [B, C', N]
    g = F.conv2d(x, w_g).reshape(b, -1, n)
    scores = torch.bmm(g.transpose(1, 2), f)  # [B, N_j, N_i] = s[i, j]
    return torch.softmax(scores, dim=-1)


def self_attention_forward(x: torch.Tensor, p: AttentionParams) -> torch.Tensor:
    if x.dim() != 4:
        raise ConfigurationError(f"expected [B, C, H, W] feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != p.channels or p.w_v.shape[0] != x.shape[1]:
        raise ConfigurationError(
            f"attention built for {p.channels} channels, input has {x.shape[1]}"
        )
    _check_finite(x, "attention input")
    b, c, h, w = x.shape
    beta = attention_map(x, p.w_f, p.w_g)
    values = F.conv2d(x, p.w_h).reshape(b, -1, h * w)  # [B, C', N_i]
    mixed = torch.bmm(values, beta.transpose(1, 2))  # [B, C', N_j]
    o = F.conv2d(mixed.reshape(b, -1, h, w), p.w_v)
    return p.gamma * o + x


class SelfAttention(nn.Module):
    """Self-attention over all H*W locations, gated by a scalar that starts at 0."""

    def __init__(self, channels: int, k: int = 8, spectral_norm: bool = False):
        super().__init__()
        self.k = k
        inner = reduced_channels(channels, k)
        self.f = NormedConv2d(channels, inner, 1, bias=False, spectral_norm=spectral_norm)
        self.g = NormedConv2d(channels, inner, 1, bias=False, spectral_norm=spectral_norm)
        self.h = NormedConv2d(channels, inner, 1, bias=False, spectral_norm=spectral_norm)
        self.v = NormedConv2d(inner, channels, 1, bias=False, spectral_norm=spectral_norm)
        self.gamma = nn.Parameter(torch.zeros(()))

    def params(self) -> AttentionParams:
        return AttentionParams(
            w_f=self.f.effective_weight(),
            w_g=self.g.effective_weight(),
            w_h=self.h.effective_weight(),
            w_v=self.v.effective_weight(),
            gamma=self.gamma,
            k=self.k,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self_attention_forward(x, self.params())


# --------------------------------------------------------------------------
# normalisation layers
# --------------------------------------------------------------------------


def pixel_norm(x: torch.Tensor, eps: float = PIXEL_NORM_EPS) -> torch.Tensor:
    """Scale every location's channel vector to unit root-mean-square."""
    if eps < 0:
        raise ConfigurationError("pixel_norm eps must be non-negative")
    return x / torch.sqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class PixelNorm(nn.Module):
    def __init__(self, eps: float = PIXEL_NORM_EPS):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return pixel_norm(x, self.eps)


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # exact zero at zero variance, with a zero (not infinite) subgradient there
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def minibatch_stddev(x: torch.Tensor) -> torch.Tensor:
    """Append one channel holding the batch-wide mean of per-position stddevs.

    Population (biased) variance across the batch axis; a batch of one gets 0.
    """
    var = x.var(dim=0, unbiased=False, keepdim=True)
    stat = _safe_sqrt(var).mean(dim=(1, 2, 3), keepdim=True)
    b, _, h, w = x.shape
    return torch.cat([x, stat.expand(b, 1, h, w)], dim=1)


class MinibatchStdDev(nn.Module):
    def forward(self, x):
        return minibatch_stddev(x)


# --------------------------------------------------------------------------
# spectral normalisation
# --------------------------------------------------------------------------


@dataclass
class SpectralNormState:
    u: torch.Tensor
    n_power_iterations: int = 1


def _unit(v: torch.Tensor) -> torch.Tensor:
    norm = v.norm()
    if norm < SIGMA_FLOOR:
        raise NumericError("power iteration collapsed onto the zero vector")
    return v / norm


def power_iteration(w_mat: torch.Tensor, u: torch.Tensor, n_iter: int,
                    tolerance: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Run ``n_iter`` steps; return updated left vector u and right vector v.

    With ``tolerance``, ``n_iter`` is an upper bound and iteration stops once
    the sigma estimate changes by less than ``tolerance`` relative.
    """
    with torch.no_grad():
        v = _unit(w_mat.t() @ u)
        sigma = None
        for _ in range(n_iter):
            u = _unit(w_mat @ v)
            wtu = w_mat.t() @ u
            v = _unit(wtu)
            if tolerance is not None:
                new_sigma = float(wtu.norm())
                if sigma is not None and abs(new_sigma - sigma) <= tolerance * new_sigma:
                    break
                sigma = new_sigma
    return u, v


def spectral_normalize(w: torch.Tensor, s: SpectralNormState) -> tuple[torch.Tensor, SpectralNormState]:
    """Divide ``w`` by its largest singular value as estimated by power iteration.

    ``w`` may be any shape whose leading axis is the output axis; it is viewed
    as ``[out, rest]``. Gradients flow through ``sigma`` but not through the
    singular vectors.
    """
    w_mat = w.reshape(w.shape[0], -1)
    if s.u.shape != (w_mat.shape[0],):
        raise ConfigurationError(f"state u has shape {tuple(s.u.shape)}, weight has {w_mat.shape[0]} rows")
    if s.n_power_iterations < 1:
        raise ConfigurationError("n_power_iterations must be positive")
    if w_mat.detach().abs().max() == 0:
        raise NumericError("spectral norm of a zero matrix is undefined")
    u, v = power_iteration(w_mat.detach(), s.u, s.n_power_iterations)
    sigma = torch.dot(u, w_mat @ v)
    if sigma.abs() < SIGMA_FLOOR:
        raise NumericError(f"spectral norm estimate {float(sigma):.3g} is too small")
    return w / sigma, SpectralNormState(u=u, n_power_iterations=s.n_power_iterations)


class _NormedWeight:
    """Mixin: optional spectral norm and equalised-learning-rate scaling of ``self.weight``.

    The left singular vector is kept as buffer ``sn_u``. It is advanced by one
    power iteration per forward pass in training mode and frozen in eval mode.
    """

    def _init_norms(self, spectral_norm: bool, equalized_lr: bool) -> None:
        self.use_spectral_norm = spectral_norm
        self.equalized_lr = equalized_lr
        fan_in = self.weight[0].numel()
        self.he_scale = math.sqrt(2.0 / fan_in) if equalized_lr else 1.0
        if spectral_norm:
            u = torch.randn(self.weight.shape[0])
            self.register_buffer("sn_u", u / u.norm())

    def effective_weight(self) -> torch.Tensor:
        w = self.weight * self.he_scale if self.equalized_lr else self.weight
        if not self.use_spectral_norm:
            return w
        state = SpectralNormState(self.sn_u, 1)
        if self.training:
            w, state = spectral_normalize(w, state)
            self.sn_u.copy_(state.u)
            return w
        w_mat = w.reshape(w.shape[0], -1)
        with torch.no_grad():
            v = _unit(w_mat.t() @ self.sn_u)
        return w / torch.dot(self.sn_u, w_mat @ v)


class NormedConv2d(nn.Conv2d, _NormedWeight):
    def __init__(self, in_channels, out_channels, kernel_size, *, spectral_norm=False,
                 equalized_lr=False, **kwargs):
        super().__init__(in_channels, out_channels, kernel_size, **kwargs)
        self._init_norms(spectral_norm, equalized_lr)

    def forward(self, x):
        return self._conv_forward(x, self.effective_weight(), self.bias)


class NormedLinear(nn.Linear, _NormedWeight):
    def __init__(self, in_features, out_features, *, spectral_norm=False, equalized_lr=False, **kwargs):
        super().__init__(in_features, out_features, **kwargs)
        self._init_norms(spectral_norm, equalized_lr)

    def forward(self, x):
        return F.linear(x, self.effective_weight(), self.bias)


def normed_modules(module: nn.Module):
    for name, m in module.named_modules():
        if isinstance(m, _NormedWeight):
            yield name, m


def converge_spectral_norm(module: nn.Module, max_iter: int = 20_000, tolerance: float | None = 1e-12) -> None:
    """Iterate every spectral-norm vector in ``module`` to convergence on the current weights.

    Training advances each vector by one step per forward pass, which lags
    the true top singular direction when the leading singular values are
    close. Call this before inspecting or exporting normalised weights.
    """
    for _, m in normed_modules(module):
        if m.use_spectral_norm:
            w = m.weight * m.he_scale if m.equalized_lr else m.weight
            w_mat = w.detach().reshape(w.shape[0], -1).double()
            u, _ = power_iteration(w_mat, m.sn_u.double(), max_iter, tolerance)
            m.sn_u.copy_(u)
