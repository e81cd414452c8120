"""Multi-scale-output generator.

The trunk grows a 4x4 map up to the target resolution; every block has its
own 1x1 ``tanh`` head, so the discriminator sees (and sends gradients to)
each intermediate resolution.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .layers import NormedConv2d, NormedLinear, PixelNorm, SelfAttention, converge_spectral_norm

LEAK = 0.2
ATTENTION_STREAM_OFFSET = 0x9E3779B1
SN_WARMUP_ITERATIONS = 15


def validate_scales(scales, channels_per_scale) -> None:
    scales = list(scales)
    if not scales or scales[0] != 4:
        raise ConfigurationError(f"scales must start at 4, got {scales}")
    for lo, hi in zip(scales, scales[1:]):
        if hi != 2 * lo:
            raise ConfigurationError(f"scales must double at every step, got {scales}")
    if scales[-1] > 64:
        raise ConfigurationError("resolutions above 64x64 are not supported")
    if len(channels_per_scale) != len(scales):
        raise ConfigurationError("channels_per_scale must have one entry per scale")
    if any(int(c) < 1 for c in channels_per_scale):
        raise ConfigurationError("channel counts must be positive")


@dataclass
class GeneratorConfig:
    latent_dim: int = 512
    scales: tuple = (4, 8, 16, 32, 64)
    channels_per_scale: tuple = (256, 256, 128, 64, 32)
    use_pixel_norm: bool = True
    use_spectral_norm: bool = False
    use_attention: bool = False
    attention_scales: tuple | None = None  # None means every scale
    attention_k: int = 8
    equalized_lr: bool = False

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.channels_per_scale = tuple(int(c) for c in self.channels_per_scale)
        if self.attention_scales is not None:
            self.attention_scales = tuple(int(s) for s in self.attention_scales)

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be positive")
        validate_scales(self.scales, self.channels_per_scale)
        if self.attention_scales is not None and not set(self.attention_scales) <= set(self.scales):
            raise ConfigurationError(f"attention_scales {self.attention_scales} not a subset of {self.scales}")

    def attends_at(self, scale: int) -> bool:
        return self.use_attention and (self.attention_scales is None or scale in self.attention_scales)

    def to_dict(self) -> dict:
        return asdict(self)


class _Block(nn.Module):
    """conv -> lrelu [-> pixnorm] -> conv -> lrelu [-> pixnorm] [-> attention].

    The first block replaces upsample + conv with a dense projection of the
    latent onto a 4x4 map.
    """

    def __init__(self, in_ch, out_ch, *, first, latent_dim, pixel_norm, spectral_norm, equalized_lr,
                 attention, attention_k):
        super().__init__()
        self.first = first
        self.out_ch = out_ch
        if first:
            self.conv1 = NormedLinear(latent_dim, out_ch * 16, spectral_norm=spectral_norm, equalized_lr=equalized_lr)
        else:
            self.conv1 = NormedConv2d(in_ch, out_ch, 3, padding=1, spectral_norm=spectral_norm,
                                      equalized_lr=equalized_lr)
        self.conv2 = NormedConv2d(out_ch, out_ch, 3, padding=1, spectral_norm=spectral_norm,
                                  equalized_lr=equalized_lr)
        self.norm = PixelNorm() if pixel_norm else nn.Identity()
        self.attn = SelfAttention(out_ch, attention_k, spectral_norm=spectral_norm) if attention else None

    def forward(self, x):
        if self.first:
            x = self.conv1(x).view(-1, self.out_ch, 4, 4)
        else:
            x = self.conv1(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.norm(F.leaky_relu(x, LEAK))
        x = self.norm(F.leaky_relu(self.conv2(x), LEAK))
        if self.attn is not None:
            x = self.attn(x)
        return x


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        blocks, heads = [], []
        prev = cfg.latent_dim
        for i, (scale, ch) in enumerate(zip(cfg.scales, cfg.channels_per_scale)):
            blocks.append(_Block(
                prev, ch, first=i == 0, latent_dim=cfg.latent_dim,
                pixel_norm=cfg.use_pixel_norm, spectral_norm=cfg.use_spectral_norm,
                equalized_lr=cfg.equalized_lr, attention=cfg.attends_at(scale),
                attention_k=cfg.attention_k,
            ))
            heads.append(NormedConv2d(ch, 1, 1, spectral_norm=cfg.use_spectral_norm, equalized_lr=cfg.equalized_lr))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.heads = nn.ModuleList(heads)

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def forward(self, z: torch.Tensor) -> list[torch.Tensor]:
        if z.dim() != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ConfigurationError(f"latent batch must be [B, {self.cfg.latent_dim}], got {tuple(z.shape)}")
        pyramid = []
        x = z
        for block, head in zip(self.blocks, self.heads):
            x = block(x)
            pyramid.append(torch.tanh(head(x)))
        return pyramid


def is_attention_name(name: str) -> bool:
    return ".attn." in f".{name}."


def initialize_parameters(model: nn.Module, seed: int) -> None:
    """Seeded init drawn from two independent streams.

    Non-attention tensors come from a stream seeded by ``seed`` and attention
    tensors from a second stream, so adding or removing attention leaves every
    other parameter bitwise unchanged.
    """
    base = torch.Generator().manual_seed(int(seed))
    attn = torch.Generator().manual_seed((int(seed) + ATTENTION_STREAM_OFFSET) % 2**63)
    owners = dict(model.named_modules())
    tensors = list(model.named_parameters()) + [(n, b) for n, b in model.named_buffers() if n.endswith("sn_u")]
    with torch.no_grad():
        for name, t in tensors:
            gen = attn if is_attention_name(name) else base
            owner = owners[name.rpartition(".")[0]]
            leaf = name.rpartition(".")[2]
            if leaf == "gamma" or leaf == "bias":
                t.zero_()
            elif leaf == "sn_u":
                u = torch.randn(t.shape, generator=gen)
                t.copy_(u / u.norm())
            else:
                fan_in = t[0].numel()
                if getattr(owner, "equalized_lr", False):
                    std = 1.0
                else:
                    std = math.sqrt(2.0 / ((1 + LEAK**2) * fan_in))
                t.copy_(torch.randn(t.shape, generator=gen) * std)
        # warm the spectral-norm vectors up on the initial weights
        converge_spectral_norm(model, max_iter=SN_WARMUP_ITERATIONS, tolerance=None)


def build_generator(cfg: GeneratorConfig, seed: int) -> Generator:
    with torch.random.fork_rng(devices=[]):
        model = Generator(cfg)
    initialize_parameters(model, seed)
    return model


def generate(model: Generator, z: torch.Tensor) -> list[torch.Tensor]:
    """Pyramid of images in [-1, 1], coarsest first."""
    return model(z)


def sample_latents(n: int, latent_dim: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return torch.randn(n, latent_dim, generator=generator)
