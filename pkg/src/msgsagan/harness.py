"""Training loop, checkpoints, ablation runner and run evaluation."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import pickle
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import torch

from . import plotting
from .data import (ImageBatch, blob_corpus, epoch_iterator, load_and_preprocess, scan_corpus,
                   steps_per_epoch, to_uint8, write_pngs)
from .discriminator import Discriminator, DiscriminatorConfig, build_discriminator, pyramid_from_real
from .errors import CheckpointError, ConfigurationError, MSGSAGANError, TrainingDiverged
from .generator import Generator, GeneratorConfig, build_generator
from .losses import gradient_penalty, relativistic_hinge_d, relativistic_hinge_g, wgan_g, wgan_gp_d
from .metrics import (MetricReport, MSSSIMConfig, detect_mode_collapse, extract_features, feature_moments,
                      frechet_distance, get_extractor, ms_ssim_dataset)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "msgsagan-checkpoint"
CHECKPOINT_VERSION = 1
GRID_LEARNING_RATES = (0.003, 0.0003, 0.0002, 0.0001)
LOSSES = ("rl_hinge", "wgan_gp")
OPTIMIZERS = ("adam", "rmsprop")
TABLE_COLUMNS = ("GAN", "PN", "SN", "MBD", "AM", "FA", "Opt", "LR", "Loss", "FID", "MR", "MG")
OPT_LABELS = {"adam": "Adam", "rmsprop": "RMSprop"}
LOSS_LABELS = {"rl_hinge": "RLHinge", "wgan_gp": "WGAN-GP"}


@dataclass
class RunConfig:
    name: str = "msg-sagan"
    # architecture
    latent_dim: int = 512
    scales: tuple = (4, 8, 16, 32, 64)
    g_channels: tuple = (256, 256, 128, 64, 32)
    d_channels: tuple = (256, 256, 128, 64, 32)
    pixel_norm: bool = True
    spectral_norm: bool = False
    minibatch_stddev: bool = True
    attention: bool = False
    attention_scales: tuple | None = None
    attention_k: int = 8
    equalized_lr: bool = False
    # optimisation
    loss: str = "rl_hinge"
    optimizer: str = "adam"
    learning_rate: float = 0.003
    adam_betas: tuple = (0.0, 0.99)
    rmsprop_alpha: float = 0.99
    optimizer_eps: float = 1e-8
    gp_weight: float = 10.0
    epochs: int = 500
    max_steps: int | None = None
    batch_size: int = 16
    flip_augment: bool = True
    seed: int = 0
    # evaluation and output
    eval_every: int | None = None  # None: once per epoch
    eval_samples: int | None = None  # None: as many as the corpus holds
    n_pairs: int | None = None
    extractor: str = "standard"
    out_dir: str = "runs"
    corpus: str | None = None  # directory, "blobs:<n>", or None for $MSGSAGAN_CORPUS

    def __post_init__(self):
        for name in ("scales", "g_channels", "d_channels", "adam_betas"):
            setattr(self, name, tuple(getattr(self, name)))
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.attention_scales is not None:
            self.attention_scales = tuple(self.attention_scales)
        self.learning_rate = float(self.learning_rate)

    def validate(self) -> None:
        if self.loss not in LOSSES:
            raise ConfigurationError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be positive and epochs non-negative")
        if self.gp_weight < 0:
            raise ConfigurationError("gp_weight must be non-negative")
        self.generator_config().validate()
        self.discriminator_config().validate()

    @property
    def resolution(self) -> int:
        return self.scales[-1]

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            latent_dim=self.latent_dim, scales=self.scales, channels_per_scale=self.g_channels,
            use_pixel_norm=self.pixel_norm, use_spectral_norm=self.spectral_norm,
            use_attention=self.attention, attention_scales=self.attention_scales,
            attention_k=self.attention_k, equalized_lr=self.equalized_lr,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            scales=self.scales, channels_per_scale=self.d_channels, use_spectral_norm=self.spectral_norm,
            use_attention=self.attention, attention_scales=self.attention_scales,
            attention_k=self.attention_k, use_minibatch_stddev=self.minibatch_stddev,
            equalized_lr=self.equalized_lr,
        )

    def total_steps(self, n_images: int) -> int:
        per_epoch = steps_per_epoch(n_images, self.batch_size)
        return self.max_steps if self.max_steps is not None else self.epochs * per_epoch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


def load_run_config(path: str | os.PathLike) -> RunConfig:
    """Read a flat TOML file of RunConfig fields."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigurationError(f"config must be flat; found tables {nested}")
    cfg = RunConfig.from_dict(raw)
    cfg.validate()
    return cfg


def bundled_config(name: str) -> Path:
    return Path(str(resources.files("msgsagan") / "configs" / name))


def load_corpus(spec: str | None, resolution: int) -> ImageBatch:
    """Training images in [-1, 1] from a directory, or ``blobs:<n>[:<seed>]`` for the toy corpus."""
    if spec is not None and spec.startswith("blobs"):
        parts = spec.split(":")
        n = int(parts[1]) if len(parts) > 1 else 500
        seed = int(parts[2]) if len(parts) > 2 else 0
        return blob_corpus(n, resolution, seed)
    manifest = scan_corpus(spec)
    if manifest.unreadable:
        log.warning("%d unreadable files skipped: %s", len(manifest.unreadable), manifest.unreadable[:5])
    return load_and_preprocess(manifest, target=resolution, range_tag="tanh")


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _atomic_torch_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(path, *, cfg: RunConfig, step: int, generator: Generator, discriminator: Discriminator,
                    opt_g=None, opt_d=None, rng: dict | None = None) -> Path:
    """One file holding both models, optimiser states, RNG states and the step counter.

    Written to a temporary name and renamed into place, so an interrupted
    write never replaces the previous checkpoint.
    """
    path = Path(path)
    state = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "step": int(step),
        "generator": {k: v.detach().clone() for k, v in generator.state_dict().items()},
        "discriminator": {k: v.detach().clone() for k, v in discriminator.state_dict().items()},
        "opt_g": opt_g.state_dict() if opt_g is not None else None,
        "opt_d": opt_d.state_dict() if opt_d is not None else None,
        "rng": rng or {},
    }
    _atomic_torch_save(state, path)
    return path


def load_checkpoint(path) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a msgsagan checkpoint")
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {state.get('version')}, this build reads version {CHECKPOINT_VERSION}"
        )
    return state


def parameter_payload(state: dict) -> bytes:
    """Canonical byte serialisation of both models' tensors, keyed by stable names."""
    buf = io.BytesIO()
    for model in ("generator", "discriminator"):
        for name in sorted(state[model]):
            t = state[model][name].contiguous()
            buf.write(f"{model}.{name}|{t.dtype}|{tuple(t.shape)}\n".encode())
            buf.write(t.numpy().tobytes())
    return buf.getvalue()


def models_from_checkpoint(state: dict) -> tuple[RunConfig, Generator, Discriminator]:
    cfg = RunConfig.from_dict(state["config"])
    g = Generator(cfg.generator_config())
    d = Discriminator(cfg.discriminator_config())
    g.load_state_dict(state["generator"])
    d.load_state_dict(state["discriminator"])
    return cfg, g, d


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    steps: list = field(default_factory=list)
    loss_d: list = field(default_factory=list)
    loss_g: list = field(default_factory=list)
    metrics: list = field(default_factory=list)  # MetricReport dicts, each with its "step"
    wall_clock: float = 0.0
    checkpoint: str | None = None
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @property
    def final_metrics(self) -> dict | None:
        return self.metrics[-1] if self.metrics else None


def make_optimizer(cfg: RunConfig, params):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.optimizer_eps)
    return torch.optim.RMSprop(params, lr=cfg.learning_rate, alpha=cfg.rmsprop_alpha, eps=cfg.optimizer_eps)


def grad_norm(model: torch.nn.Module) -> float:
    sq = sum(float(p.grad.detach().pow(2).sum()) for p in model.parameters() if p.grad is not None)
    return math.sqrt(sq)


class Evaluator:
    """Scores the generator on a fixed latent set against a fixed real set."""

    def __init__(self, cfg: RunConfig, real: ImageBatch, n_samples: int | None = None, extractor=None):
        self.cfg = cfg
        self.extractor = extractor if extractor is not None else get_extractor(cfg.extractor)
        n = n_samples or cfg.eval_samples or len(real)
        self.real = real.to_range("unit").data[:n]
        self.n = n
        self.latents = torch.randn(n, cfg.latent_dim, generator=torch.Generator().manual_seed(cfg.seed + 4))
        self.ssim_cfg = MSSSIMConfig.for_resolution(cfg.resolution)
        self.ms_ssim_real = ms_ssim_dataset(self.real, cfg.n_pairs, cfg.seed, self.ssim_cfg)
        self.real_moments = feature_moments(extract_features(self.real, self.extractor))

    @torch.no_grad()
    def __call__(self, generator: Generator) -> MetricReport:
        gen = sample_images(generator, self.latents)
        mg = ms_ssim_dataset(gen, self.cfg.n_pairs, self.cfg.seed, self.ssim_cfg)
        score = frechet_distance(*self.real_moments, *feature_moments(extract_features(gen, self.extractor)))
        return MetricReport(
            ms_ssim_real=self.ms_ssim_real, ms_ssim_gen=mg, fid=score,
            mode_collapse=detect_mode_collapse(self.ms_ssim_real, mg),
            n_real=int(self.real.shape[0]), n_gen=int(gen.shape[0]), seed=self.cfg.seed,
        )


@torch.no_grad()
def sample_images(generator: Generator, latents: torch.Tensor, batch: int = 256) -> torch.Tensor:
    """Finest pyramid level in [0, 1], generated in eval mode (spectral-norm state frozen)."""
    was_training = generator.training
    generator.eval()
    try:
        out = [generator(latents[i:i + batch])[-1] for i in range(0, latents.shape[0], batch)]
    finally:
        generator.train(was_training)
    if not out:
        return torch.zeros(0, 1, generator.cfg.scales[-1], generator.cfg.scales[-1])
    return ((torch.cat(out) + 1.0) / 2.0).clamp(0.0, 1.0)


class Trainer:
    """Owns the models, optimisers and RNG streams of one run."""

    def __init__(self, cfg: RunConfig, corpus: ImageBatch):
        cfg.validate()
        if corpus.resolution != cfg.resolution:
            raise ConfigurationError(f"corpus is {corpus.resolution}px, config expects {cfg.resolution}px")
        self.cfg = cfg
        self.corpus = corpus
        self.per_epoch = steps_per_epoch(len(corpus), cfg.batch_size)
        self.total = cfg.total_steps(len(corpus))
        self.generator = build_generator(cfg.generator_config(), cfg.seed)
        self.discriminator = build_discriminator(cfg.discriminator_config(), cfg.seed + 1)
        self.opt_g = make_optimizer(cfg, self.generator.parameters())
        self.opt_d = make_optimizer(cfg, self.discriminator.parameters())
        self.latent_rng = torch.Generator().manual_seed(cfg.seed + 2)
        self.gp_rng = torch.Generator().manual_seed(cfg.seed + 3)
        self.step = 0

    # -- persistence -------------------------------------------------------

    def rng_state(self) -> dict:
        return {"latent": self.latent_rng.get_state(), "gp": self.gp_rng.get_state()}

    def save(self, path) -> Path:
        return save_checkpoint(path, cfg=self.cfg, step=self.step, generator=self.generator,
                               discriminator=self.discriminator, opt_g=self.opt_g, opt_d=self.opt_d,
                               rng=self.rng_state())

    def restore(self, state: dict) -> None:
        self.generator.load_state_dict(state["generator"])
        self.discriminator.load_state_dict(state["discriminator"])
        if state.get("opt_g") is not None:
            self.opt_g.load_state_dict(state["opt_g"])
            self.opt_d.load_state_dict(state["opt_d"])
        self.latent_rng.set_state(state["rng"]["latent"])
        self.gp_rng.set_state(state["rng"]["gp"])
        self.step = int(state["step"])

    # -- one iteration -----------------------------------------------------

    def _latents(self) -> torch.Tensor:
        return torch.randn(self.cfg.batch_size, self.cfg.latent_dim, generator=self.latent_rng)

    def d_loss(self, real_pyr, fake_pyr) -> torch.Tensor:
        c_real, c_fake = self.discriminator(real_pyr), self.discriminator(fake_pyr)
        if self.cfg.loss == "rl_hinge":
            return relativistic_hinge_d(c_real, c_fake)
        penalty = gradient_penalty(self.discriminator, real_pyr, fake_pyr, self.gp_rng)
        return wgan_gp_d(c_real, c_fake, penalty, self.cfg.gp_weight)

    def train_step(self, real: torch.Tensor) -> tuple[float, float, float, float]:
        """One discriminator update followed by one generator update."""
        g, d = self.generator, self.discriminator
        real_pyr = pyramid_from_real(real, self.cfg.scales)

        with torch.no_grad():
            fake_pyr = g(self._latents())
        loss_d = self.d_loss(real_pyr, fake_pyr)
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        gn_d = grad_norm(d)
        if torch.isfinite(loss_d):
            self.opt_d.step()

        d.requires_grad_(False)
        try:
            fake_pyr = g(self._latents())
            c_fake = d(fake_pyr)
            if self.cfg.loss == "rl_hinge":
                loss_g = relativistic_hinge_g(d(real_pyr), c_fake)
            else:
                loss_g = wgan_g(c_fake)
            self.opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            gn_g = grad_norm(g)
            if torch.isfinite(loss_g):
                self.opt_g.step()
        finally:
            d.requires_grad_(True)
        return float(loss_d.detach()), float(loss_g.detach()), gn_d, gn_g

    def batches(self):
        """Real batches from the current step onward, resuming mid-epoch if needed."""
        while True:
            epoch, offset = divmod(self.step, self.per_epoch)
            for batch in epoch_iterator(self.corpus, self.cfg.batch_size, self.cfg.seed,
                                        self.cfg.flip_augment, epoch=epoch, start_batch=offset):
                yield batch.data


def train(cfg: RunConfig, corpus: ImageBatch, *, resume: str | os.PathLike | None = None,
          evaluator: Evaluator | None = None, emit_figures: bool = True) -> RunRecord:
    """Alternate D and G updates for the configured number of steps.

    Every ``eval_every`` steps (and at step 0 and the final step) the run is
    checkpointed, scored and, with ``emit_figures``, a sample grid is written.
    A non-finite loss aborts the run with a diagnostic snapshot; the last
    checkpoint on disk stays valid.
    """
    started = time.perf_counter()
    trainer = Trainer(cfg, corpus)
    out = Path(cfg.out_dir)
    ckpt_path = out / "checkpoint.pt"
    record = RunRecord(config=cfg.to_dict(), checkpoint=str(ckpt_path))
    if resume is not None:
        trainer.restore(load_checkpoint(resume))
    eval_every = cfg.eval_every or trainer.per_epoch
    if evaluator is None and eval_every > 0:
        evaluator = Evaluator(cfg, corpus)

    def checkpoint_and_score():
        trainer.save(ckpt_path)
        if evaluator is not None:
            report = evaluator(trainer.generator)
            record.metrics.append({"step": trainer.step, **report.to_dict()})
            log.info("%s step %d: FID %.3f, MS-SSIM real %.4f gen %.4f", cfg.name, trainer.step,
                     report.fid, report.ms_ssim_real, report.ms_ssim_gen)
        if emit_figures:
            latents = torch.randn(64, cfg.latent_dim, generator=torch.Generator().manual_seed(cfg.seed + 5))
            grid = to_uint8(ImageBatch(sample_images(trainer.generator, latents), "unit"))
            plotting.sample_grid(grid, out / "samples" / f"step{trainer.step:07d}.png",
                                 title=f"{cfg.name} step {trainer.step}")

    if trainer.step == 0:
        checkpoint_and_score()
    batches = trainer.batches()
    while trainer.step < trainer.total:
        loss_d, loss_g, gn_d, gn_g = trainer.train_step(next(batches))
        if not (math.isfinite(loss_d) and math.isfinite(loss_g)):
            snapshot = {"step": trainer.step, "loss_d": loss_d, "loss_g": loss_g,
                        "grad_norm_d": gn_d, "grad_norm_g": gn_g}
            out.mkdir(parents=True, exist_ok=True)
            (out / "abort.json").write_text(json.dumps(snapshot, indent=1))
            record.status, record.error = "failed", f"non-finite loss at step {trainer.step}"
            record.wall_clock = time.perf_counter() - started
            record.save(out / "record.json")
            raise TrainingDiverged(record.error, snapshot)
        trainer.step += 1
        record.steps.append(trainer.step)
        record.loss_d.append(loss_d)
        record.loss_g.append(loss_g)
        if (eval_every > 0 and trainer.step % eval_every == 0) or trainer.step == trainer.total:
            checkpoint_and_score()

    record.wall_clock = time.perf_counter() - started
    record.save(out / "record.json")
    if emit_figures and record.steps:
        plotting.loss_curves(record.steps, record.loss_d, record.loss_g, out / "loss_curves.png")
        if record.metrics:
            plotting.metric_curves(record.metrics, out / "metrics.png")
    return record


# --------------------------------------------------------------------------
# ablation matrix
# --------------------------------------------------------------------------

_TRUE = {"y", "yes", "true", "1", "✓", "on"}
_FALSE = {"n", "no", "false", "0", "x", "off"}
_MATRIX_FIELDS = {"PN": "pixel_norm", "SN": "spectral_norm", "MBD": "minibatch_stddev", "AM": "attention",
                  "FA": "flip_augment"}


def _flag(value: str, column: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ConfigurationError(f"column {column}: cannot read {value!r} as a flag")


def _coerce(template, value: str, annotation: str = ""):
    if template is None:
        # optional fields: fall back on the declared type
        if annotation.startswith("int"):
            return int(value)
        if annotation.startswith("tuple"):
            return _coerce((), value)
        return value
    if isinstance(template, bool):
        return _flag(value, "override")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, tuple):
        return tuple(int(v) for v in value.replace(";", ",").split(",") if v.strip())
    return value


_ANNOTATIONS = {f.name: str(f.type) for f in dataclasses.fields(RunConfig)}


def read_matrix(path, base: RunConfig, *, reference_grid: bool = False) -> list[RunConfig]:
    """Rows of ``GAN, PN, SN, MBD, AM, FA, Opt, LR, Loss`` (plus optional RunConfig overrides).

    Each row becomes ``base`` with that row's toggles; its output goes to
    ``<base.out_dir>/<GAN>``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigurationError(f"ablation matrix {path} has no rows")
    labels_opt = {v.lower(): k for k, v in OPT_LABELS.items()}
    labels_loss = {v.lower(): k for k, v in LOSS_LABELS.items()}
    defaults = base.to_dict()
    configs = []
    for row in rows:
        row = {k.strip(): (v or "").strip() for k, v in row.items() if k}
        missing = [c for c in TABLE_COLUMNS[:9] if c not in row]
        if missing:
            raise ConfigurationError(f"ablation matrix is missing columns {missing}")
        changes = {field_: _flag(row[col], col) for col, field_ in _MATRIX_FIELDS.items()}
        opt = row["Opt"].lower()
        loss = row["Loss"].lower()
        if opt not in labels_opt or loss not in labels_loss:
            raise ConfigurationError(f"row {row['GAN']}: unknown optimizer {row['Opt']!r} or loss {row['Loss']!r}")
        changes.update(name=row["GAN"], optimizer=labels_opt[opt], loss=labels_loss[loss],
                       learning_rate=float(row["LR"]), out_dir=str(Path(base.out_dir) / row["GAN"]))
        for key, value in row.items():
            if key in TABLE_COLUMNS or value == "":
                continue
            if key not in defaults:
                raise ConfigurationError(f"unknown matrix column {key!r}")
            changes[key] = _coerce(defaults[key], value, _ANNOTATIONS[key])
        if reference_grid and changes["learning_rate"] not in GRID_LEARNING_RATES:
            raise ConfigurationError(f"row {row['GAN']}: learning rate {row['LR']} is not on the reference grid")
        cfg = base.replace(**changes)
        cfg.validate()
        configs.append(cfg)
    return configs


def reference_grid_path() -> Path:
    return bundled_config("reference_grid.csv")


def _yn(flag: bool) -> str:
    return "yes" if flag else "no"


def table_row(cfg: RunConfig, record: RunRecord) -> dict:
    m = record.final_metrics if record.status == "ok" else None
    return {
        "GAN": cfg.name, "PN": _yn(cfg.pixel_norm), "SN": _yn(cfg.spectral_norm),
        "MBD": _yn(cfg.minibatch_stddev), "AM": _yn(cfg.attention), "FA": _yn(cfg.flip_augment),
        "Opt": OPT_LABELS[cfg.optimizer], "LR": f"{cfg.learning_rate:g}", "Loss": LOSS_LABELS[cfg.loss],
        "FID": m["fid"] if m else None, "MR": m["ms_ssim_real"] if m else None,
        "MG": m["ms_ssim_gen"] if m else None,
    }


def format_table(rows: list[dict]) -> str:
    """ablation table CSV; the best (lowest) FID and MG values carry a trailing ``*``."""
    def best(key):
        vals = [r[key] for r in rows if r[key] is not None]
        return min(vals) if vals else None

    best_fid, best_mg = best("FID"), best("MG")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for r in rows:
        cells = [r[c] for c in TABLE_COLUMNS[:9]]
        for key, fmt, top in (("FID", "{:.2f}", best_fid), ("MR", "{:.4f}", None), ("MG", "{:.4f}", best_mg)):
            v = r[key]
            if v is None:
                cells.append("failed")
            else:
                cells.append(fmt.format(v) + ("*" if top is not None and v == top else ""))
        writer.writerow(cells)
    return buf.getvalue()


def run_ablation(matrix: list[RunConfig], corpus: ImageBatch, csv_path=None, *,
                 emit_figures: bool = True) -> tuple[list[RunRecord], Path]:
    """Run every config in order; a failing run is recorded and the rest continue."""
    if not matrix:
        raise ConfigurationError("ablation matrix is empty")
    csv_path = Path(csv_path) if csv_path is not None else Path(matrix[0].out_dir).parent / "ablation.csv"
    records, rows = [], []
    for cfg in matrix:
        try:
            record = train(cfg, corpus, emit_figures=emit_figures)
        except (MSGSAGANError, RuntimeError) as exc:
            log.error("run %s failed: %s", cfg.name, exc)
            record = RunRecord(config=cfg.to_dict(), status="failed", error=f"{type(exc).__name__}: {exc}")
        records.append(record)
        rows.append(table_row(cfg, record))
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(format_table(rows), encoding="utf-8")
    if emit_figures:
        plotting.ablation_chart(rows, csv_path.with_suffix(".png"))
    return records, csv_path


# --------------------------------------------------------------------------
# sampling and evaluation of a checkpoint
# --------------------------------------------------------------------------


def generate_samples(checkpoint, n: int, seed: int, out_dir, *, grid: bool = True) -> list[Path]:
    """Write ``n`` PNGs from the finest pyramid level, plus an 8x8 ``grid.png`` montage."""
    if n < 0:
        raise ConfigurationError("n must be non-negative")
    _, g, _ = models_from_checkpoint(load_checkpoint(checkpoint))
    latents = torch.randn(n, g.cfg.latent_dim, generator=torch.Generator().manual_seed(int(seed)))
    images = ImageBatch(sample_images(g, latents), "unit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = write_pngs(images, out, prefix="sample_")
    if grid and n > 0:
        plotting.sample_grid(to_uint8(images), out / "grid.png")
    return paths


def evaluate_run(checkpoint, real: ImageBatch, seed: int = 0, *, extractor=None, n_pairs: int | None = None,
                 out=None) -> MetricReport:
    """Generate as many images as ``real`` holds and score them against it."""
    from .metrics import evaluate_images

    cfg, g, _ = models_from_checkpoint(load_checkpoint(checkpoint))
    if real.resolution != cfg.resolution:
        raise ConfigurationError(f"real images are {real.resolution}px, checkpoint generates {cfg.resolution}px")
    extractor = extractor if extractor is not None else get_extractor(cfg.extractor)
    latents = torch.randn(len(real), cfg.latent_dim, generator=torch.Generator().manual_seed(int(seed)))
    gen = sample_images(g, latents)
    report = evaluate_images(real.to_range("unit").data, gen, extractor, n_pairs=n_pairs, seed=seed,
                             cfg=MSSSIMConfig.for_resolution(cfg.resolution))
    if out is not None:
        write_report(report, out)
    return report


def write_report(report: MetricReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=1))
    return path


def read_report(path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))
