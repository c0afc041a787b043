"""Configuration loading and logging setup."""

import logging
import os
from pathlib import Path

import yaml

from src.errors import ConfigError

LOG_FORMAT = '%(asctime)s [%(name)s] %(levelname)s %(message)s'

# Environment variable -> dotted config key
ENV_OVERRIDES = {
    'LAZYSPARSE_LOG_LEVEL': 'logging.level',
    'LAZYSPARSE_OUT_DIR': 'bench.out_dir',
    'LAZYSPARSE_CACHE_DIR': 'bench.cache_dir',
}


class Config:
    """Load and manage configuration."""

    def __init__(self, config_file='config.yaml'):
        """Load config from a YAML file.

        A missing file gives an empty configuration, so every consumer falls
        back to its dataclass defaults.

        Args:
            config_file: Path to config file
        """
        self.path = Path(config_file) if config_file else None
        self.config = {}
        if self.path is not None and self.path.exists():
            with open(self.path, 'r') as f:
                loaded = yaml.safe_load(f)
            if loaded is not None and not isinstance(loaded, dict):
                raise ConfigError(f"{self.path}: top level must be a mapping")
            self.config = loaded or {}

        # Apply environment variable overrides
        for env, key in ENV_OVERRIDES.items():
            if value := os.getenv(env):
                self.set(key, value)

    @classmethod
    def from_dict(cls, data):
        config = cls(None)
        config.config = dict(data)
        return config

    def get(self, key, default=None):
        """Get config value by dot notation.

        Args:
            key: Config key like 'solver.tol'
            default: Default value if not found

        Returns:
            Config value
        """
        value = self.config
        for k in key.split('.'):
            if isinstance(value, dict):
                value = value.get(k)
                if value is None:
                    return default
            else:
                return default
        return value

    def set(self, key, value):
        """Set a value by dot notation, creating sections as needed."""
        *sections, last = key.split('.')
        node = self.config
        for k in sections:
            node = node.setdefault(k, {})
        node[last] = value

    def __getitem__(self, key):
        """Dictionary-style access."""
        return self.config[key]


def setup_logging(level='INFO', file=None):
    """Configure the root logger with a console handler and an optional file.

    Args:
        level: Level name such as 'DEBUG' or 'INFO'
        file: Log file path; its directory is created on demand
    """
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level {level!r}")
    handlers = [logging.StreamHandler()]
    if file:
        Path(file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(file))
    logging.basicConfig(level=numeric, format=LOG_FORMAT, handlers=handlers, force=True)
