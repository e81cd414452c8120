"""Evaluation: MS-SSIM diversity, Frechet distance, and the mode-collapse rule."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ExtractorUnavailable, NumericError

CANONICAL_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


# --------------------------------------------------------------------------
# MS-SSIM
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MSSSIMConfig:
    num_scales: int = 3
    weights: tuple | None = None  # defaults to the canonical weights truncated and renormalised
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    value_range: float = 1.0

    def __post_init__(self):
        if self.num_scales < 1 or self.num_scales > len(CANONICAL_WEIGHTS) and self.weights is None:
            raise ConfigurationError(f"num_scales must be in 1..{len(CANONICAL_WEIGHTS)}")
        if self.weights is None:
            w = CANONICAL_WEIGHTS[: self.num_scales]
            object.__setattr__(self, "weights", tuple(x / sum(w) for x in w))
        else:
            object.__setattr__(self, "weights", tuple(float(x) for x in self.weights))
        if len(self.weights) != self.num_scales:
            raise ConfigurationError("need one weight per scale")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigurationError(f"weights must sum to 1, got {sum(self.weights)}")
        if self.window_size % 2 == 0 or self.window_size < 1:
            raise ConfigurationError("window size must be odd")

    @property
    def min_resolution(self) -> int:
        return self.window_size * 2 ** (self.num_scales - 1)

    @classmethod
    def for_resolution(cls, resolution: int, **kwargs) -> "MSSSIMConfig":
        """Largest canonical scale count whose coarsest level still fits the window."""
        window = kwargs.get("window_size", 11)
        if resolution < window:
            raise ConfigurationError(f"{resolution}px images are smaller than the {window}px window")
        m = min(len(CANONICAL_WEIGHTS), int(math.floor(math.log2(resolution / window))) + 1)
        return cls(num_scales=m, **kwargs)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # separable 'valid' Gaussian filter on [B, 1, H, W]
    x = F.conv2d(x, win.view(1, 1, 1, -1))
    return F.conv2d(x, win.view(1, 1, -1, 1))


def _ssim_terms(a: torch.Tensor, b: torch.Tensor, win: torch.Tensor, c1: float, c2: float):
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    mu_ab = mu_a * mu_b
    sq_a, sq_b = mu_a * mu_a, mu_b * mu_b
    var_a = _blur(a * a, win) - sq_a
    var_b = _blur(b * b, win) - sq_b
    cov = _blur(a * b, win) - mu_ab
    luminance = (2 * mu_ab + c1) / (sq_a + sq_b + c1)
    contrast_structure = (2 * cov + c2) / (var_a + var_b + c2)
    return luminance.mean(dim=(1, 2, 3)), contrast_structure.mean(dim=(1, 2, 3))


def ms_ssim_batch(a: torch.Tensor, b: torch.Tensor, cfg: MSSSIMConfig = MSSSIMConfig()) -> torch.Tensor:
    """MS-SSIM for paired batches ``[B, 1, H, W]`` with values in ``[0, value_range]``.

    Contrast/structure enter at every scale, luminance only at the coarsest;
    negative contrast/structure means are floored at 0 before exponentiation.
    """
    if a.shape != b.shape:
        raise ConfigurationError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4 or a.shape[1] != 1:
        raise ConfigurationError(f"expected [B, 1, H, W] grayscale batch, got {tuple(a.shape)}")
    if min(a.shape[-2:]) < cfg.min_resolution:
        raise ConfigurationError(
            f"{tuple(a.shape[-2:])} images are too small for {cfg.num_scales} scales "
            f"with a {cfg.window_size}px window (need >= {cfg.min_resolution})"
        )
    a = a.to(torch.float64)
    b = b.to(torch.float64)
    win = _gaussian_window(cfg.window_size, cfg.sigma)
    c1 = (cfg.k1 * cfg.value_range) ** 2
    c2 = (cfg.k2 * cfg.value_range) ** 2
    result = torch.ones(a.shape[0], dtype=torch.float64)
    for j, weight in enumerate(cfg.weights):
        lum, cs = _ssim_terms(a, b, win, c1, c2)
        result = result * torch.clamp(cs, min=0.0) ** weight
        if j == cfg.num_scales - 1:
            result = result * torch.clamp(lum, min=0.0) ** weight
        else:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
    return torch.clamp(result, 0.0, 1.0)


def ms_ssim_pair(a, b, cfg: MSSSIMConfig = MSSSIMConfig()) -> float:
    """MS-SSIM of two single-channel images (``[H, W]`` arrays or tensors)."""
    ta = torch.as_tensor(np.asarray(a), dtype=torch.float64)
    tb = torch.as_tensor(np.asarray(b), dtype=torch.float64)
    if ta.dim() != 2 or tb.dim() != 2:
        raise ConfigurationError("ms_ssim_pair takes two [H, W] images")
    return float(ms_ssim_batch(ta[None, None], tb[None, None], cfg)[0])


def sample_pairs(n_images: int, n_pairs: int | None, seed: int) -> np.ndarray:
    """``[n_pairs, 2]`` index pairs with distinct members.

    Up to ``n_images // 2`` pairs are disjoint (one shuffled permutation cut
    into consecutive pairs); beyond that, extra pairs are drawn independently.
    """
    if n_images < 2:
        raise ConfigurationError("need at least 2 images to form a pair")
    if n_pairs is None:
        n_pairs = n_images // 2
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_images)
    disjoint = perm[: 2 * (n_images // 2)].reshape(-1, 2)[:n_pairs]
    extra = n_pairs - len(disjoint)
    if extra <= 0:
        return disjoint
    first = rng.integers(0, n_images, size=extra)
    second = (first + rng.integers(1, n_images, size=extra)) % n_images
    return np.concatenate([disjoint, np.stack([first, second], axis=1)])


def ms_ssim_dataset(images, n_pairs: int | None = None, seed: int = 0, cfg: MSSSIMConfig | None = None,
                    chunk: int = 256) -> float:
    """Mean MS-SSIM over random pairs of ``images`` (``[N, 1, H, W]``, values in [0, 1])."""
    images = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    if images.dim() == 3:
        images = images[:, None]
    cfg = cfg or MSSSIMConfig.for_resolution(images.shape[-1])
    pairs = sample_pairs(images.shape[0], n_pairs, seed)
    if len(pairs) == 0:
        raise ConfigurationError("n_pairs must be positive")
    scores = []
    for start in range(0, len(pairs), chunk):
        p = torch.as_tensor(pairs[start:start + chunk])
        scores.append(ms_ssim_batch(images[p[:, 0]], images[p[:, 1]], cfg))
    return float(torch.cat(scores).mean())


# --------------------------------------------------------------------------
# feature extraction
# --------------------------------------------------------------------------


class FeatureExtractor(Protocol):
    dim: int | None

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        """``[N, 1, H, W]`` images in [0, 1] -> ``[N, dim]`` float64 features."""


class IdentityExtractor:
    """Raw pixels as features; optionally average-pooled to ``pool_to`` pixels first."""

    def __init__(self, pool_to: int | None = None):
        self.pool_to = pool_to
        self.dim = None

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        x = images.to(torch.float64)
        if self.pool_to is not None and x.shape[-1] > self.pool_to:
            x = F.adaptive_avg_pool2d(x, self.pool_to)
        return x.flatten(1).numpy()


class InceptionExtractor:
    """2048-d pool features from torchvision's ImageNet Inception-V3."""

    dim = 2048

    def __init__(self, batch_size: int = 64):
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3

            weights = Inception_V3_Weights.IMAGENET1K_V1
            net = inception_v3(weights=weights, aux_logits=True, transform_input=False)
        except Exception as exc:  # download failures surface as many different types
            raise ExtractorUnavailable(
                "could not load pretrained Inception-V3 weights "
                f"({type(exc).__name__}: {exc}). Place inception_v3_google-0cc3c7bd.pth in "
                "$TORCH_HOME/hub/checkpoints or run with a network connection, or use --extractor identity."
            ) from exc
        net.fc = torch.nn.Identity()
        self.net = net.eval()
        self.batch_size = batch_size
        self.mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self.std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        out = []
        for start in range(0, images.shape[0], self.batch_size):
            x = images[start:start + self.batch_size].to(torch.float32).repeat(1, 3, 1, 1)
            x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
            out.append(self.net((x - self.mean) / self.std).to(torch.float64).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.dim))


EXTRACTORS: dict[str, Callable[[], FeatureExtractor]] = {
    "standard": InceptionExtractor,
    "identity": IdentityExtractor,
}


def get_extractor(name: str) -> FeatureExtractor:
    try:
        return EXTRACTORS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown extractor {name!r}; choose from {sorted(EXTRACTORS)}") from None


def extract_features(images, extractor: FeatureExtractor) -> np.ndarray:
    images = torch.as_tensor(images)
    if images.dim() == 3:
        images = images[:, None]
    feats = np.asarray(extractor(images), dtype=np.float64)
    if feats.shape[0] != images.shape[0]:
        raise ConfigurationError(f"extractor returned {feats.shape[0]} rows for {images.shape[0]} images")
    return feats


# --------------------------------------------------------------------------
# Frechet distance
# --------------------------------------------------------------------------


def _psd_sqrt(sigma: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def trace_sqrt_product(sigma_r: np.ndarray, sigma_s: np.ndarray) -> float:
    """``Tr((sigma_r sigma_s)^(1/2))`` for symmetric PSD inputs.

    ``sigma_r sigma_s`` is similar to the symmetric PSD matrix
    ``A sigma_s A`` with ``A = sigma_r^(1/2)``, so the trace is the sum of
    square roots of that matrix's eigenvalues.
    """
    a = _psd_sqrt(sigma_r)
    m = a @ sigma_s @ a
    vals = np.linalg.eigvalsh((m + m.T) / 2)
    if not np.all(np.isfinite(vals)):
        raise NumericError("matrix square root produced non-finite eigenvalues")
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(mu_r, sigma_r, mu_s, sigma_s) -> float:
    diff = np.asarray(mu_r) - np.asarray(mu_s)
    value = diff @ diff + np.trace(sigma_r) + np.trace(sigma_s) - 2.0 * trace_sqrt_product(sigma_r, sigma_s)
    if value < -1e-6 * max(1.0, np.trace(sigma_r) + np.trace(sigma_s)):
        raise NumericError(f"Frechet distance came out negative ({value:.3g})")
    return max(float(value), 0.0)


def feature_moments(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ConfigurationError("need a [N, dim] feature matrix with N >= 2")
    if not np.all(np.isfinite(feats)):
        raise ConfigurationError("feature matrix contains non-finite values")
    if feats.shape[0] <= feats.shape[1]:
        warnings.warn(f"{feats.shape[0]} samples for {feats.shape[1]}-d features: covariance is singular",
                      stacklevel=3)
    return feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False))


def fid(real: np.ndarray, gen: np.ndarray) -> float:
    """Frechet distance between Gaussian fits (unbiased covariance) of two feature sets."""
    real, gen = np.asarray(real), np.asarray(gen)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ConfigurationError(f"feature matrices disagree: {real.shape} vs {gen.shape}")
    mu_r, sigma_r = feature_moments(real)
    mu_s, sigma_s = feature_moments(gen)
    return frechet_distance(mu_r, sigma_r, mu_s, sigma_s)


# --------------------------------------------------------------------------
# mode collapse
# --------------------------------------------------------------------------


def detect_mode_collapse(ms_ssim_real: float, ms_ssim_gen: float) -> bool:
    """Generated images more self-similar than real ones signal collapse (ties do not)."""
    return bool(ms_ssim_gen > ms_ssim_real)


@dataclass
class MetricReport:
    ms_ssim_real: float
    ms_ssim_gen: float
    fid: float
    mode_collapse: bool
    n_real: int
    n_gen: int
    seed: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def evaluate_images(real: torch.Tensor, gen: torch.Tensor, extractor: FeatureExtractor, *,
                    n_pairs: int | None = None, seed: int = 0, cfg: MSSSIMConfig | None = None) -> MetricReport:
    """Full protocol on two image sets in [0, 1]."""
    mr = ms_ssim_dataset(real, n_pairs, seed, cfg)
    mg = ms_ssim_dataset(gen, n_pairs, seed, cfg)
    score = fid(extract_features(real, extractor), extract_features(gen, extractor))
    return MetricReport(
        ms_ssim_real=mr, ms_ssim_gen=mg, fid=score, mode_collapse=detect_mode_collapse(mr, mg),
        n_real=int(real.shape[0]), n_gen=int(gen.shape[0]), seed=int(seed),
    )
