"""Corpus ingestion, preprocessing and the seeded epoch iterator."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, IngestionError

CORPUS_ENV = "MSGSAGAN_CORPUS"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
RANGES = {"tanh": (-1.0, 1.0), "unit": (0.0, 1.0)}
MANIFEST_SIDECAR = ".msgsagan_manifest.json"


@dataclass
class ImageBatch:
    """Grayscale images ``[B, 1, H, W]`` tagged with their value range ("tanh" or "unit")."""

    data: torch.Tensor
    range_tag: str = "tanh"

    def __post_init__(self):
        if self.range_tag not in RANGES:
            raise ConfigurationError(f"unknown range tag {self.range_tag!r}")
        if self.data.dim() != 4 or self.data.shape[1] != 1:
            raise ConfigurationError(f"ImageBatch data must be [B, 1, H, W], got {tuple(self.data.shape)}")

    def __len__(self):
        return self.data.shape[0]

    @property
    def resolution(self) -> int:
        return self.data.shape[-1]

    def to_range(self, tag: str) -> "ImageBatch":
        if tag == self.range_tag:
            return self
        if tag == "unit":
            return ImageBatch((self.data + 1.0) / 2.0, "unit")
        return ImageBatch(self.data * 2.0 - 1.0, "tanh")

    def check_range(self) -> None:
        lo, hi = RANGES[self.range_tag]
        if not torch.isfinite(self.data).all():
            raise ConfigurationError("ImageBatch contains non-finite values")
        if self.data.numel() and (self.data.min() < lo or self.data.max() > hi):
            raise ConfigurationError(f"values outside the {self.range_tag} range [{lo}, {hi}]")


@dataclass
class DatasetManifest:
    root: str
    files: list[str]
    count: int
    checksum: str
    unreadable: list[str] = field(default_factory=list)

    def paths(self) -> list[Path]:
        return [Path(self.root) / f for f in self.files]

    def to_dict(self) -> dict:
        return {"root": self.root, "files": self.files, "count": self.count,
                "checksum": self.checksum, "unreadable": self.unreadable}


def resolve_root(root: str | os.PathLike | None) -> Path:
    if root is None:
        root = os.environ.get(CORPUS_ENV)
        if not root:
            raise ConfigurationError(f"no corpus directory given and ${CORPUS_ENV} is unset")
    return Path(root)


def scan_corpus(root: str | os.PathLike | None = None, *, verify: bool = True,
                write_sidecar: bool = False) -> DatasetManifest:
    """Sorted, checksummed listing of the image files under ``root``.

    Files that fail to open are listed in ``unreadable`` and excluded from
    ``files``; they are never dropped silently.
    """
    root = resolve_root(root)
    if not root.is_dir():
        raise IngestionError(f"corpus directory {root} does not exist")
    candidates = sorted(
        p.relative_to(root).as_posix() for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    good, bad = [], []
    for rel in candidates:
        if verify:
            try:
                with Image.open(root / rel) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError, SyntaxError):
                bad.append(rel)
                continue
        good.append(rel)
    if not good:
        raise IngestionError(f"no readable images found in {root}" + (f" ({len(bad)} unreadable)" if bad else ""))
    digest = hashlib.sha256("\n".join(good).encode()).hexdigest()
    manifest = DatasetManifest(str(root), good, len(good), digest, bad)
    if write_sidecar:
        (root / MANIFEST_SIDECAR).write_text(json.dumps(manifest.to_dict(), indent=1))
    return manifest


def to_range(pixels: np.ndarray | torch.Tensor, range_tag: str) -> torch.Tensor:
    """Map 8-bit values (as floats in [0, 255]) to the tagged range."""
    x = torch.as_tensor(pixels, dtype=torch.float32)
    if range_tag == "tanh":
        return x / 127.5 - 1.0
    if range_tag == "unit":
        return x / 255.0
    raise ConfigurationError(f"unknown range tag {range_tag!r}")


def decode_gray(path: Path) -> np.ndarray:
    """8-bit grayscale pixels; colour inputs use the unweighted channel mean."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float32)
            elif im.mode.startswith("I;16") or im.mode == "I":
                arr = np.clip(np.asarray(im, dtype=np.float32) / 257.0, 0, 255)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32).mean(axis=2)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise IngestionError(f"cannot decode {path}: {exc}") from exc
    return arr


def resize(pixels: torch.Tensor, target: int) -> torch.Tensor:
    """Bilinear, half-pixel-centre (align_corners=False) resize of ``[N, 1, H, W]``."""
    if pixels.shape[-2:] == (target, target):
        return pixels
    return F.interpolate(pixels, size=(target, target), mode="bilinear", align_corners=False)


def load_and_preprocess(manifest: DatasetManifest, indices=None, target: int = 64,
                        range_tag: str = "tanh") -> ImageBatch:
    paths = manifest.paths()
    if indices is None:
        indices = range(len(paths))
    out = []
    for i in indices:
        if not 0 <= int(i) < len(paths):
            raise ConfigurationError(f"index {i} outside corpus of {len(paths)} images")
        arr = torch.from_numpy(decode_gray(paths[int(i)]))[None, None]
        out.append(resize(arr, target))
    data = torch.cat(out) if out else torch.zeros(0, 1, target, target)
    data = to_range(data.clamp(0, 255), range_tag)
    return ImageBatch(data, range_tag)


def augment_hflip(batch: ImageBatch, enabled: bool, rng: np.random.Generator | None = None,
                  decisions=None) -> ImageBatch:
    """Mirror each sample left-right with probability 0.5.

    ``decisions`` (a boolean per sample) overrides the coin flips.
    """
    if not enabled:
        return batch
    if decisions is None:
        if rng is None:
            raise ConfigurationError("augment_hflip needs an rng or explicit decisions")
        decisions = rng.random(len(batch)) < 0.5
    mask = torch.as_tensor(np.asarray(decisions, dtype=bool)).view(-1, 1, 1, 1)
    return ImageBatch(torch.where(mask, batch.data.flip(-1), batch.data), batch.range_tag)


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    if batch_size < 1:
        raise ConfigurationError("batch_size must be positive")
    if batch_size > n_images:
        raise ConfigurationError(f"batch size {batch_size} exceeds corpus size {n_images}")
    return n_images // batch_size


def epoch_order(n_images: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n_images)


def epoch_iterator(corpus: ImageBatch | torch.Tensor, batch_size: int = 16, seed: int = 0, flip: bool = False,
                   epoch: int = 0, start_batch: int = 0) -> Iterator[ImageBatch]:
    """Batches of one epoch in an order fixed by ``(seed, epoch)``; the partial tail is dropped."""
    if isinstance(corpus, DatasetManifest):
        corpus = load_and_preprocess(corpus)
    data = corpus.data if isinstance(corpus, ImageBatch) else corpus
    tag = corpus.range_tag if isinstance(corpus, ImageBatch) else "tanh"
    n_batches = steps_per_epoch(data.shape[0], batch_size)
    order = epoch_order(data.shape[0], seed, epoch)
    flip_rng = np.random.default_rng([int(seed), int(epoch), 1])
    flips = flip_rng.random(n_batches * batch_size) < 0.5
    for b in range(start_batch, n_batches):
        idx = order[b * batch_size:(b + 1) * batch_size]
        batch = ImageBatch(data[torch.as_tensor(idx)], tag)
        yield augment_hflip(batch, flip, decisions=flips[b * batch_size:(b + 1) * batch_size])


# --------------------------------------------------------------------------
# synthetic corpus for smoke runs
# --------------------------------------------------------------------------


def blob_corpus(n: int = 500, resolution: int = 16, seed: int = 0) -> ImageBatch:
    """Two-mode toy corpus: one bright Gaussian blob, left or right of centre.

    Half the images use each mode; position and width jitter slightly.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) + 0.5
    images = np.empty((n, resolution, resolution))
    for i in range(n):
        side = 0.28 if i % 2 == 0 else 0.72
        cx = (side + rng.normal(0, 0.03)) * resolution
        cy = (0.5 + rng.normal(0, 0.05)) * resolution
        width = resolution * (0.12 + rng.uniform(-0.02, 0.02))
        images[i] = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2))
    images = np.round(images * 255.0)
    return ImageBatch(to_range(images[:, None], "tanh"), "tanh")


def write_pngs(images: ImageBatch, out_dir: str | os.PathLike, prefix: str = "") -> list[Path]:
    """Write each image as an 8-bit grayscale PNG, ``{prefix}{index:05d}.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(images)
    paths = []
    for i, arr in enumerate(pixels):
        p = out / f"{prefix}{i:05d}.png"
        Image.fromarray(arr, mode="L").save(p)
        paths.append(p)
    return paths


def to_uint8(images: ImageBatch) -> np.ndarray:
    unit = images.to_range("unit").data.clamp(0, 1)
    return np.round(unit[:, 0].double().numpy() * 255.0).astype(np.uint8)


def load_dir(path: str | os.PathLike, target: int | None = None, range_tag: str = "unit") -> ImageBatch:
    """Every image of a directory, in sorted order, at ``target`` (or native) resolution."""
    manifest = scan_corpus(path)
    if target is None:
        target = decode_gray(manifest.paths()[0]).shape[-1]
    return load_and_preprocess(manifest, target=target, range_tag=range_tag)
