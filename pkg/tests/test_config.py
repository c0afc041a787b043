import logging

import pytest

from src.config import Config, setup_logging
from src.errors import ConfigError


@pytest.fixture
def restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text(
        "search:\n"
        "  grid_per_dim: 64\n"
        "solver:\n"
        "  tol: 1.0e-10\n"
        "bench:\n"
        "  out_dir: ./results\n"
    )
    return path


def test_dot_notation(config_file):
    config = Config(config_file)
    assert config.get('search.grid_per_dim') == 64
    assert config.get('solver.tol') == 1e-10
    assert config.get('solver.max_outer', 10000) == 10000
    assert config.get('search.grid_per_dim.deeper', 'x') == 'x'
    assert config['bench'] == {'out_dir': './results'}


def test_missing_file_gives_empty_config(tmp_path):
    config = Config(tmp_path / 'absent.yaml')
    assert config.config == {}
    assert config.get('logging.level', 'INFO') == 'INFO'


def test_environment_overrides(config_file, monkeypatch):
    monkeypatch.setenv('LAZYSPARSE_OUT_DIR', '/tmp/elsewhere')
    monkeypatch.setenv('LAZYSPARSE_LOG_LEVEL', 'DEBUG')
    config = Config(config_file)
    assert config.get('bench.out_dir') == '/tmp/elsewhere'
    assert config.get('logging.level') == 'DEBUG'


def test_top_level_must_be_a_mapping(tmp_path):
    path = tmp_path / 'list.yaml'
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        Config(path)


def test_set_creates_sections():
    config = Config.from_dict({})
    config.set('solver.tol', 1e-6)
    assert config.get('solver.tol') == 1e-6


def test_setup_logging_writes_file(tmp_path, restore_logging):
    log_file = tmp_path / 'logs' / 'bench.log'
    setup_logging('debug', str(log_file))
    logging.getLogger('src.test').debug("hello from the test")
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert "hello from the test" in log_file.read_text()
    assert logging.getLogger().level == logging.DEBUG


def test_setup_logging_rejects_unknown_level(restore_logging):
    with pytest.raises(ConfigError):
        setup_logging('LOUD')
