from unittest.mock import MagicMock

import numpy as np
import pytest
from click.testing import CliRunner

from smdm import cli_app, denoiser
from smdm.cli import cli
from smdm.config import RunConfig
from smdm.denoiser import DenoiserConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def cli_invoker():
    cli_runner = CliRunner()
    return lambda *x: cli_runner.invoke(cli, [str(a) for a in x], catch_exceptions=False)


@pytest.fixture
def mock_output_to_terminal(mocker):
    tty_mock = MagicMock()

    tty_mock.is_tty = True
    tty_mock.side_effect = lambda *a, **kw: tty_mock.is_tty

    mocker.patch("smdm.cli_app_util.is_output_to_terminal", new=tty_mock)

    return tty_mock


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_model(**overrides) -> DenoiserConfig:
    values = dict(
        d_model=8,
        n_layers=1,
        n_heads=2,
        dropout=0.0,
        fsq_levels=[5, 4],
        cfg_dropout=0.1,
        lipschitz_weight=0.0,
    )
    values.update(overrides)
    return DenoiserConfig(**values)


@pytest.fixture
def tiny_model_config():
    return make_tiny_model()


@pytest.fixture
def tiny_params(tiny_model_config):
    return denoiser.init_params(tiny_model_config, 4, np.random.default_rng(7))


@pytest.fixture
def tiny_config(tmp_path):
    config = RunConfig(
        out=str(tmp_path / "run"),
        n_per_class=2,
        n_frames=12,
        joints=3,
        arity=2,
        model=make_tiny_model(),
        diffusion_steps=4,
        train_steps=3,
        batch_size=2,
        checkpoint_every=2,
        log_every=1,
        samples_per_class=1,
        eval_pairs=2,
    )
    return config.validate()


@pytest.fixture
def tiny_config_file(tiny_config, tmp_path):
    return tiny_config.save(tmp_path / "config.json")


@pytest.fixture
def tiny_dataset(tiny_config):
    return cli_app.gen_data(tiny_config)


@pytest.fixture
def tiny_trained(tiny_config, tiny_dataset):
    return cli_app.train(tiny_config)
