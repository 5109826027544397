import numpy as np
import pytest
import torch

from segssl.config import config_from_dict
from segssl.encoder import EncoderConfig
from segssl.objective import HeadConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_enc_cfg():
    return EncoderConfig(n_blocks=2, n_heads=2, dim=16, inner_dim=32, stack_frames=4, input_bins=8, max_tokens=12)


@pytest.fixture
def tiny_head_cfg():
    return HeadConfig(hidden_dim=12, out_dim=8)


def tiny_config(**sections):
    """A complete run config small enough for unit tests."""
    base = {
        "preset": "custom",
        "mel": {"n_bins": 16},
        "views": {"pair": {"segment_len_s": 0.6, "clip_len_s": 1.0},
                  "augment": {"memory_size": 16}},
        "encoder": {"n_blocks": 2, "n_heads": 2, "dim": 16, "inner_dim": 32},
        "heads": {"hidden_dim": 32, "out_dim": 8},
        "schedules": {"peak_lr": 1e-3, "warmup_epochs": 1, "m0": 0.9},
        "data": {"batch_size": 4, "epochs": 3, "seed": 7},
        "eval": {"epochs": 20, "lr_grid": [1e-2, 1e-1], "chunk_s": 0.6},
    }
    for key, value in sections.items():
        base[key] = {**base.get(key, {}), **value} if isinstance(value, dict) else value
    return config_from_dict(base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_specs(rng):
    # 8 normalized log-mel matrices of 100 frames (1 s) x 16 bins
    return [rng.random((98, 16)).astype(np.float32) for _ in range(8)]


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        ok, detail = module.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
