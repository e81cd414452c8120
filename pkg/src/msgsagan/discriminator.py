"""Multi-scale-input critic.

Every pyramid level is concatenated onto the activations arriving at its
resolution, so the score has a direct gradient path to each generator head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .generator import LEAK, initialize_parameters, validate_scales
from .layers import NormedConv2d, NormedLinear, SelfAttention, minibatch_stddev


@dataclass
class DiscriminatorConfig:
    scales: tuple = (4, 8, 16, 32, 64)
    channels_per_scale: tuple = (256, 256, 128, 64, 32)
    use_spectral_norm: bool = False
    use_attention: bool = False
    attention_scales: tuple | None = None
    attention_k: int = 8
    use_minibatch_stddev: bool = True
    equalized_lr: bool = False

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.channels_per_scale = tuple(int(c) for c in self.channels_per_scale)
        if self.attention_scales is not None:
            self.attention_scales = tuple(int(s) for s in self.attention_scales)

    def validate(self) -> None:
        validate_scales(self.scales, self.channels_per_scale)
        if self.attention_scales is not None and not set(self.attention_scales) <= set(self.scales):
            raise ConfigurationError(f"attention_scales {self.attention_scales} not a subset of {self.scales}")

    def attends_at(self, scale: int) -> bool:
        return self.use_attention and (self.attention_scales is None or scale in self.attention_scales)

    def to_dict(self) -> dict:
        return asdict(self)


class _DownBlock(nn.Module):
    def __init__(self, in_ch, out_ch, *, spectral_norm, equalized_lr, attention, attention_k):
        super().__init__()
        self.conv1 = NormedConv2d(in_ch, out_ch, 3, padding=1, spectral_norm=spectral_norm, equalized_lr=equalized_lr)
        self.conv2 = NormedConv2d(out_ch, out_ch, 3, padding=1, spectral_norm=spectral_norm, equalized_lr=equalized_lr)
        self.attn = SelfAttention(out_ch, attention_k, spectral_norm=spectral_norm) if attention else None

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), LEAK)
        x = F.leaky_relu(self.conv2(x), LEAK)
        if self.attn is not None:
            x = self.attn(x)
        return F.avg_pool2d(x, 2)


class _FinalBlock(nn.Module):
    """[minibatch stddev] -> conv3x3 -> [attention] -> conv4x4 (valid) -> dense."""

    def __init__(self, in_ch, ch, *, mbstd, spectral_norm, equalized_lr, attention, attention_k):
        super().__init__()
        self.mbstd = mbstd
        self.conv1 = NormedConv2d(in_ch + int(mbstd), ch, 3, padding=1, spectral_norm=spectral_norm,
                                  equalized_lr=equalized_lr)
        self.attn = SelfAttention(ch, attention_k, spectral_norm=spectral_norm) if attention else None
        self.conv2 = NormedConv2d(ch, ch, 4, spectral_norm=spectral_norm, equalized_lr=equalized_lr)
        self.dense = NormedLinear(ch, 1, spectral_norm=spectral_norm, equalized_lr=equalized_lr)

    def forward(self, x):
        if self.mbstd:
            x = minibatch_stddev(x)
        x = F.leaky_relu(self.conv1(x), LEAK)
        if self.attn is not None:
            x = self.attn(x)
        x = F.leaky_relu(self.conv2(x), LEAK)
        return self.dense(x.flatten(1)).squeeze(1)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        sn, eq, k = cfg.use_spectral_norm, cfg.equalized_lr, cfg.attention_k
        # blocks[i] handles cfg.scales[i]; built finest-first so input widths are known
        blocks = {}
        incoming = 0
        for i in range(len(cfg.scales) - 1, 0, -1):
            ch = cfg.channels_per_scale[i]
            blocks[i] = _DownBlock(incoming + 1, ch, spectral_norm=sn, equalized_lr=eq,
                                   attention=cfg.attends_at(cfg.scales[i]), attention_k=k)
            incoming = ch
        self.final = _FinalBlock(incoming + 1, cfg.channels_per_scale[0], mbstd=cfg.use_minibatch_stddev,
                                 spectral_norm=sn, equalized_lr=eq, attention=cfg.attends_at(4), attention_k=k)
        self.blocks = nn.ModuleList([blocks[i] for i in range(1, len(cfg.scales))])

    def forward(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        scales = self.cfg.scales
        if len(pyramid) != len(scales):
            raise ConfigurationError(f"expected {len(scales)} pyramid levels, got {len(pyramid)}")
        for level, s in zip(pyramid, scales):
            if level.dim() != 4 or level.shape[-2:] != (s, s):
                raise ConfigurationError(f"pyramid level has shape {tuple(level.shape)}, expected [B, 1, {s}, {s}]")
        x = None
        for i in range(len(scales) - 1, 0, -1):
            img = pyramid[i]
            x = self.blocks[i - 1](img if x is None else torch.cat([x, img], dim=1))
        img = pyramid[0]
        return self.final(img if x is None else torch.cat([x, img], dim=1))


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        model = Discriminator(cfg)
    initialize_parameters(model, seed)
    return model


def pyramid_from_real(images: torch.Tensor, scales) -> list[torch.Tensor]:
    """Average-pool a finest-scale batch down to every coarser scale, coarsest first."""
    scales = list(scales)
    if images.dim() != 4 or images.shape[-1] != scales[-1] or images.shape[-2] != scales[-1]:
        raise ConfigurationError(f"real batch must be [B, 1, {scales[-1]}, {scales[-1]}], got {tuple(images.shape)}")
    levels = [images]
    for _ in scales[:-1]:
        levels.append(F.avg_pool2d(levels[-1], 2))
    return levels[::-1]


def criticize(model: Discriminator, pyramid: list[torch.Tensor]) -> torch.Tensor:
    return model(pyramid)
