import numpy as np
import pytest
import torch

from darkadapt.pipeline import TrainConfig, prepare
from darkadapt.toybench import BenchConfig, generate_dataset

torch.set_num_threads(1)


def tiny_bench(**over):
    base = dict(n_classes=4, clips_per_class=8, val_per_class=1, test_per_class=6, unlabeled_pool_size=12,
                frame_geometry=(4, 16, 16), dark_fraction_train=0.25, seed=3)
    base.update(over)
    return BenchConfig(**base)


def tiny_train(**over):
    base = dict(d_in=16, fusion_layers=1, probe_layers=1, heads=2, probe_heads=2, ffn_mult=2, d_v=8, d_a=8,
                patch=(2, 8, 8), audio_grid=(2, 2), K=3, prompt_len=4, epochs_stage1=2, epochs_stage2=2,
                backbone_epochs=2, ae_epochs=20, batch_size=8, filter_pool=False, seed=0)
    base.update(over)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_bench())


@pytest.fixture(scope="session")
def tiny_prep(tiny_dataset):
    return prepare(tiny_train(), tiny_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE = {}


def record(n, passed, detail):
    ACCEPTANCE[n] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
