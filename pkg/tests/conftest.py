import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kamnet.datasets import normalized, synth_generate  # noqa: E402
from kamnet.model import ModelConfig  # noqa: E402
from kamnet.trainer import TrainConfig  # noqa: E402

TINY_ELECTRODES = ("FP1", "FZ", "F8", "C3", "CZ", "C4", "POZ", "O1")
TINY_FS = 48

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def tiny_config(variant="none", **kw) -> ModelConfig:
    base = dict(n_channels=len(TINY_ELECTRODES), n_samples=TINY_FS, F1=4, F2=8, temporal_kernel_len=9,
                separable_kernel_len=4, electrodes=TINY_ELECTRODES)
    base.update(kw)
    extra = {"reduction": 2} if variant in ("se", "cbam") else {}
    return ModelConfig(**base).with_attention(variant, **extra)


def tiny_data(n_per_class=30, seed=0, subject="T01", snr=3.0):
    return normalized(synth_generate(n_per_class, fs=TINY_FS, seed=seed, snr=snr, subject=subject,
                                     electrodes=TINY_ELECTRODES))


TINY_TRAIN = TrainConfig(max_epochs=4, batch_size=16, seed=3)


@pytest.fixture(scope="session")
def tiny_epochs():
    return tiny_data()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
