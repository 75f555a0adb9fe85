import json

import pytest
import torch
import torch.nn as nn

from promptprune.corpus import gen_corpus
from promptprune.diffusion import make_schedule
from promptprune.models import build_toy_unet, default_spec
from promptprune.numerics import RngStream
from promptprune.schemas import CorpusConfig, RunConfig


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run the long end-to-end checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end run, needs --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# =========================
# Tiny Instances
# =========================

TINY_CONFIG = {
    "seed": 3,
    "corpus": {"n_clusters": 4, "embed_dim": 4, "prompts_per_cluster": 10, "data_dim": 8,
               "max_frequency": 4, "seed": 3},
    "schedule": {"steps": 10},
    "model": {"feature_dim": 6, "hidden": 4, "t_embed_dim": 2},
    "pruning": {"pretrain_iters": 5, "warmup_iters": 4, "joint_iters": 4, "batch_size": 8, "n_experts": 2,
                "kmeans_batches": 2, "kmeans_restarts": 2, "lr_warmup": 2},
    "finetune": {"iters": 3, "batch_size": 4},
    "eval": {"loss_repeats": 1, "reference_iters": 3},
}


@pytest.fixture(autouse=True)
def no_progress_bars(monkeypatch):
    monkeypatch.setenv("PROMPTPRUNE_PROGRESS", "false")
    from promptprune.settings import get_settings
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def tiny_spec():
    # D = 4 * 4 + 4 = 20; under 600 parameters
    return default_spec(data_dim=8, embed_dim=4, feature_dim=6, hidden=4, t_embed_dim=2)


@pytest.fixture
def tiny_model(tiny_spec):
    return build_toy_unet(tiny_spec, RngStream(11))


@pytest.fixture
def tiny_schedule():
    return make_schedule(10, "linear", 1e-4, 0.2)


@pytest.fixture
def tiny_run_config():
    return RunConfig.model_validate(TINY_CONFIG)


@pytest.fixture
def tiny_corpus(tiny_run_config):
    return gen_corpus(tiny_run_config.corpus)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


class LookupDenoiser(nn.Module):
    """Returns a fixed noise tensor per row, matched by x_t; no blocks."""

    def __init__(self, xt, eps, spec=None):
        super().__init__()
        self.xt = xt
        self.eps = eps
        if spec is not None:
            self.spec = spec
        self.dummy = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, xt, z, t, masks=None):
        dist = torch.cdist(xt, self.xt)
        return self.eps[dist.argmin(dim=1)] + 0 * self.dummy, []


class ConstantDenoiser(nn.Module):
    """Predicts a constant noise value everywhere."""

    def __init__(self, value=0.0):
        super().__init__()
        self.value = value

    def forward(self, xt, z, t, masks=None):
        return torch.full_like(xt, self.value), []
