import pytest
import torch

from msgsagan.discriminator import DiscriminatorConfig
from msgsagan.generator import GeneratorConfig
from msgsagan.harness import RunConfig

TOY_SCALES = (4, 8, 16)
TOY_CHANNELS = (16, 16, 8)


def toy_gcfg(**kw) -> GeneratorConfig:
    base = dict(latent_dim=16, scales=TOY_SCALES, channels_per_scale=TOY_CHANNELS, attention_k=4)
    base.update(kw)
    return GeneratorConfig(**base)


def toy_dcfg(**kw) -> DiscriminatorConfig:
    base = dict(scales=TOY_SCALES, channels_per_scale=TOY_CHANNELS, attention_k=4)
    base.update(kw)
    return DiscriminatorConfig(**base)


def toy_run(tmp_path, **kw) -> RunConfig:
    base = dict(name="toy", latent_dim=16, scales=TOY_SCALES, g_channels=TOY_CHANNELS, d_channels=TOY_CHANNELS,
                attention_k=4, learning_rate=1e-4, max_steps=20, batch_size=8, eval_every=10,
                eval_samples=64, extractor="identity", out_dir=str(tmp_path / "run"), corpus="blobs:64")
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, title: str, ok, detail: str) -> None:
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"{status} criterion {number:2d} {title}: {detail}"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
