import pytest

from einconv import config as config_module
from einconv.config import Config


@pytest.fixture
def saved_config():
    yield config_module._CONFIG_PATH
    config_module._CONFIG_PATH.unlink(missing_ok=True)


def test_defaults_without_saved_file(saved_config):
    saved_config.unlink(missing_ok=True)
    config = Config.load_or_default()
    assert config.rank_dim == 2
    assert config.default_optimizer == "adam"
    with pytest.raises(FileNotFoundError):
        Config.load()


def test_save_and_load(saved_config):
    Config(jobs=3, candidate_cap=1000, rank_dim=4, default_optimizer="sgd").save()
    loaded = Config.load()
    assert (loaded.jobs, loaded.candidate_cap, loaded.rank_dim, loaded.default_optimizer) == (3, 1000, 4, "sgd")


def test_invalid_optimizer():
    with pytest.raises(ValueError):
        Config(default_optimizer="lbfgs")


def test_jobs_floor():
    assert Config(jobs=0).jobs == 1
