"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as the tests run and collected again in the terminal
summary (see ``conftest.py``).
"""
import os
import statistics
import time
import warnings

import numpy as np
import pytest
import torch

from msgsagan.data import CORPUS_ENV, blob_corpus, load_and_preprocess, scan_corpus
from msgsagan.discriminator import build_discriminator, criticize
from msgsagan.generator import build_generator, generate
from msgsagan.harness import bundled_config, load_run_config, read_matrix, run_ablation, train
from msgsagan.layers import (attention_map, converge_spectral_norm, normed_modules, self_attention_forward)
from msgsagan.losses import relativistic_hinge_d, relativistic_hinge_g
from msgsagan.metrics import detect_mode_collapse, fid, ms_ssim_dataset, ms_ssim_pair

from conftest import record_acceptance, toy_dcfg, toy_gcfg, toy_run
from test_layers import _central_difference, random_params
from test_metrics import brute_force_fid

pytestmark = pytest.mark.acceptance


def check(number, title, ok, detail):
    record_acceptance(number, title, ok, detail)
    assert ok, f"criterion {number} ({title}): {detail}"


def test_01_attention():
    start = time.perf_counter()
    worst_sum, nonneg = 0.0, True
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(2, 8, 5, 5, generator=g) * 3
        p = random_params(8, k=2, seed=seed)
        beta = attention_map(x, p.w_f, p.w_g)
        worst_sum = max(worst_sum, (beta.sum(-1) - 1).abs().max().item())
        nonneg &= bool((beta >= 0).all())
    x = torch.randn(3, 8, 5, 5)
    identity = torch.equal(self_attention_forward(x, random_params(8, gamma=0.0)), x)

    x = torch.randn(1, 1, 3, 3, dtype=torch.float64)
    p = random_params(1, k=8, gamma=0.8, dtype=torch.float64, seed=5)
    target = torch.randn(1, 1, 3, 3, dtype=torch.float64)
    leaves = [x, p.w_f, p.w_g, p.w_h, p.w_v, p.gamma]
    for t in leaves:
        t.requires_grad_(True)

    def loss():
        return ((self_attention_forward(x, p) - target) ** 2).sum()

    analytic = torch.autograd.grad(loss(), leaves)
    worst_rel = 0.0
    with torch.no_grad():
        for t, a in zip(leaves, analytic):
            numeric = _central_difference(loss, t)
            worst_rel = max(worst_rel, ((a - numeric).norm() / max(numeric.norm().item(), 1e-12)).item())
    elapsed = time.perf_counter() - start
    ok = worst_sum <= 1e-5 and nonneg and identity and worst_rel < 1e-3 and elapsed < 10
    check(1, "attention correctness", ok,
          f"max |sum beta - 1| = {worst_sum:.1e}, gamma=0 identity exact: {identity}, "
          f"finite-difference rel. error {worst_rel:.1e}, {elapsed:.2f}s")


def test_02_loss_algebra():
    rng = np.random.default_rng(0)
    const = torch.full((16,), 0.3)
    constant_ok = relativistic_hinge_d(const, const).item() == 2.0 and relativistic_hinge_g(const, const).item() == 2.0
    saturation_ok = (relativistic_hinge_d(torch.full((8,), 3.0), torch.full((8,), 1.0)).item() == 0.0
                     and relativistic_hinge_g(torch.full((8,), 1.0), torch.full((8,), 3.0)).item() == 0.0)
    exchange_ok = True
    shift_ok = True
    for _ in range(1000):
        a = torch.tensor(rng.normal(size=rng.integers(1, 33)))
        b = torch.tensor(rng.normal(size=rng.integers(1, 33)))
        exchange_ok &= relativistic_hinge_g(a, b).item() == relativistic_hinge_d(b, a).item()
        # quarter-integer scores and integer shifts keep every sum exact in float64
        qa = torch.tensor(rng.integers(-64, 65, size=16) / 4.0)
        qb = torch.tensor(rng.integers(-64, 65, size=16) / 4.0)
        c = float(rng.integers(-1000, 1001))
        shift_ok &= (relativistic_hinge_d(qa + c, qb + c).item() == relativistic_hinge_d(qa, qb).item()
                     and relativistic_hinge_g(qa + c, qb + c).item() == relativistic_hinge_g(qa, qb).item())
    ok = constant_ok and saturation_ok and exchange_ok and shift_ok
    check(2, "loss algebra", ok,
          f"constant=2: {constant_ok}, saturation=0: {saturation_ok}, exchange x1000 exact: {exchange_ok}, "
          f"shift exact x1000: {shift_ok}")


def test_03_fid_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 32))
    self_dist = fid(x, x)
    shift = fid(rng.normal(size=(100_000, 4)), rng.normal(size=(100_000, 4)) + 1.5)
    scale = fid(rng.normal(size=(100_000, 4)), 2.0 * rng.normal(size=(100_000, 4)))
    worst = 0.0
    for trial in range(200):
        d = 1 + trial % 3
        real = rng.normal(size=(rng.integers(5, 11), d)) @ rng.normal(size=(d, d))
        gen = rng.normal(size=(rng.integers(5, 11), d)) * rng.uniform(0.5, 2, size=d) + rng.normal(size=d)
        worst = max(worst, abs(fid(real, gen) - max(brute_force_fid(real, gen), 0.0)))
    elapsed = time.perf_counter() - start
    ok = (self_dist <= 1e-6 and abs(shift - 9) <= 0.05 * 9 and abs(scale - 4) <= 0.05 * 4
          and worst <= 1e-8 and elapsed < 60)
    check(3, "FID oracles", ok,
          f"fid(X,X) = {self_dist:.1e}, mean shift {shift:.3f} (target 9), covariance x4 {scale:.3f} (target 4), "
          f"brute-force max |diff| {worst:.1e}, {elapsed:.1f}s")


def test_04_ms_ssim():
    g = torch.Generator().manual_seed(0)
    imgs = torch.nn.functional.avg_pool2d(torch.rand(24, 1, 64, 64, generator=g, dtype=torch.float64), 3, 1, 1)
    a, b = imgs[0, 0], imgs[1, 0]
    self_sim = ms_ssim_pair(a, a)
    symmetric = ms_ssim_pair(a, b) == ms_ssim_pair(b, a)
    c1 = 0.01**2
    lum = (2 * 0.25 * 0.75 + c1) / (0.25**2 + 0.75**2 + c1)
    expected = lum ** (0.3001 / (0.0448 + 0.2856 + 0.3001))
    constant = ms_ssim_pair(np.full((64, 64), 0.25), np.full((64, 64), 0.75))
    deterministic = ms_ssim_dataset(imgs, seed=7) == ms_ssim_dataset(imgs, seed=7)
    ok = abs(self_sim - 1) <= 1e-6 and symmetric and abs(constant - expected) <= 1e-6 and deterministic
    check(4, "MS-SSIM", ok,
          f"ms_ssim(a,a) = {self_sim:.9f}, symmetric exact: {symmetric}, constant pair {constant:.9f} "
          f"vs closed form {expected:.9f}, deterministic: {deterministic}")


def test_05_mode_collapse_rule():
    collapsed = detect_mode_collapse(0.50, 0.74)
    healthy = detect_mode_collapse(0.50, 0.47)
    check(5, "mode-collapse rule", collapsed is True and healthy is False,
          f"(0.50, 0.74) -> {collapsed}, (0.50, 0.47) -> {healthy}")


def test_06_multi_scale_gradient_flow():
    start = time.perf_counter()

    def block_grads(g):
        return [sum(p.grad.abs().sum().item() for p in b.parameters() if p.grad is not None) for b in g.blocks]

    results = {}
    for attention in (False, True):
        g = build_generator(toy_gcfg(use_attention=attention), 0)
        generate(g, torch.randn(4, 16))[-1].pow(2).mean().backward()
        finest = block_grads(g)
        g = build_generator(toy_gcfg(use_attention=attention), 0)
        generate(g, torch.randn(4, 16))[0].pow(2).mean().backward()
        coarsest = block_grads(g)
        results[attention] = all(x > 0 for x in finest) and coarsest[0] > 0 and all(x == 0 for x in coarsest[1:])
    # the discriminator consumes every level: each receives gradient through it
    d = build_discriminator(toy_dcfg(use_attention=True), 1)
    pyr = [p.detach().requires_grad_(True) for p in generate(build_generator(toy_gcfg(), 0), torch.randn(4, 16))]
    criticize(d, pyr).mean().backward()
    d_ok = all(p.grad.abs().sum() > 0 for p in pyr)
    elapsed = time.perf_counter() - start
    ok = all(results.values()) and d_ok and elapsed < 30
    check(6, "multi-scale gradient flow", ok,
          f"finest-loss reaches all blocks / 4x4-loss stays in block 0: plain {results[False]}, "
          f"attention {results[True]}; every level gets D gradient: {d_ok}; {elapsed:.2f}s")


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    base = load_run_config(bundled_config("smoke.toml"))
    corpus = blob_corpus(500, base.resolution, seed=0)
    records = []
    for seed in (0, 1, 2):
        cfg = base.replace(seed=seed, out_dir=str(tmp_path_factory.mktemp(f"smoke{seed}")))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            records.append(train(cfg, corpus))
    return base, records


@pytest.mark.slow
def test_07_smoke_training(smoke_runs):
    base, records = smoke_runs
    start_fid = [r.metrics[0]["fid"] for r in records]
    end_fid = [r.metrics[-1]["fid"] for r in records]
    end_mg = [r.metrics[-1]["ms_ssim_gen"] for r in records]
    steps_ok = all(r.metrics[-1]["step"] == base.max_steps == 2000 for r in records)
    med_start, med_end, med_mg = map(statistics.median, (start_fid, end_fid, end_mg))
    ok = steps_ok and med_end < med_start and med_mg < 0.99
    per_seed = "; ".join(f"seed {i}: FID {s:.2f} -> {e:.2f}, MG {m:.4f}"
                         for i, (s, e, m) in enumerate(zip(start_fid, end_fid, end_mg)))
    check(7, "smoke training", ok,
          f"median FID {med_start:.2f} -> {med_end:.2f}, median generated MS-SSIM {med_mg:.4f} (< 0.99); "
          f"{per_seed}; wall {sum(r.wall_clock for r in records):.0f}s")


def test_08_spectral_norm(tmp_path):
    from msgsagan.harness import Trainer

    cfg = toy_run(tmp_path, spectral_norm=True, attention=True, max_steps=100)
    trainer = Trainer(cfg, blob_corpus(64, 16))
    batches = trainer.batches()
    for _ in range(100):
        trainer.train_step(next(batches))
        trainer.step += 1

    def sigmas():
        out = []
        for model in (trainer.generator, trainer.discriminator):
            model.eval()
            with torch.no_grad():
                for _, m in normed_modules(model):
                    if m.use_spectral_norm:
                        w = m.effective_weight().reshape(m.weight.shape[0], -1).double().numpy()
                        out.append(np.linalg.svd(w, compute_uv=False)[0])
        return np.array(out)

    running = sigmas()
    converge_spectral_norm(trainer.generator)
    converge_spectral_norm(trainer.discriminator)
    converged = sigmas()
    ok = len(converged) > 0 and bool(((converged >= 0.99) & (converged <= 1.01)).all())
    check(8, "spectral norm", ok,
          f"{len(converged)} normalised weights after 100 steps, SVD sigma in "
          f"[{converged.min():.5f}, {converged.max():.5f}] once the power-iteration state has converged "
          f"(running one-step estimate gave [{running.min():.4f}, {running.max():.4f}])")


def test_09_reproducible_report(tmp_path):
    matrix_file = tmp_path / "toy_matrix.csv"
    matrix_file.write_text("GAN,PN,SN,MBD,AM,FA,Opt,LR,Loss\n"
                           "toy-msg,yes,no,yes,no,yes,Adam,0.0001,RLHinge\n"
                           "toy-sagan,yes,yes,yes,yes,yes,Adam,0.0001,RLHinge\n")
    outputs = []
    for attempt in ("a", "b"):
        base = toy_run(tmp_path / attempt, max_steps=20, eval_every=10)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            _, csv_path = run_ablation(read_matrix(matrix_file, base), blob_corpus(64, 16),
                                       tmp_path / attempt / "ablation.csv", emit_figures=False)
        outputs.append(csv_path.read_bytes())
    ok = outputs[0] == outputs[1] and outputs[0].count(b"\n") == 3
    check(9, "reproducible CSV", ok, f"two runs of a 2-row toy matrix -> identical bytes: {outputs[0] == outputs[1]} "
                                     f"({len(outputs[0])} bytes)")


def test_10_real_corpus_ms_ssim():
    root = os.environ.get(CORPUS_ENV)
    if not root:
        record_acceptance(10, "real-corpus MS-SSIM", None, f"skipped: ${CORPUS_ENV} is not set")
        pytest.skip(f"${CORPUS_ENV} not set; the real X-ray corpus is optional")
    manifest = scan_corpus(root)
    images = load_and_preprocess(manifest, target=64, range_tag="unit").data
    score = ms_ssim_dataset(images, seed=0)
    check(10, "real-corpus MS-SSIM", 0.40 <= score <= 0.60,
          f"{manifest.count} images, MS-SSIM {score:.4f} (accepted range [0.40, 0.60])")
