"""
Global Configuration for the testbed

Module level names are the defaults (loaded into Flask with from_object).
A declarative settings file in the workspace overrides them per run and
command line flags override the settings file.
"""
import os
import json
import hashlib
import logging
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path
from typing import Optional
from dotenv import load_dotenv, dotenv_values

load_dotenv()

# The workspace root and the catalog database are taken from the environment
WORKSPACE = os.getenv("EVASIONLAB_WORKSPACE", "workspace")
SETTINGS_FILE = "evasionlab.env"

# Catalog database lives in the workspace unless DATABASE_URI points at Postgres
DATABASE_URI = os.getenv(
    "DATABASE_URI",
    f"sqlite:///{os.path.abspath(os.path.join(WORKSPACE, 'catalog.db'))}"
)
SQLALCHEMY_DATABASE_URI = DATABASE_URI
SQLALCHEMY_TRACK_MODIFICATIONS = False

SECRET_KEY = os.getenv("SECRET_KEY", "evasionlab-catalog")
LOGGING_LEVEL = logging.INFO
TOOL_VERSION = "1.0.0"

# Environment
THRESHOLD = 0.80
MAX_STEPS = 10
STALL_LIMIT = 3
MAX_IMPORTS_PER_STEP = 8
SECTION_CONTENT_LIMIT = 4096
DLL_WHITELIST = "kernel32,user32,advapi32,shell32,ole32"

# Detectors
RF_ESTIMATORS = 100
RF_MAX_DEPTH = 16
RF_MAX_FEATURES = 0  # 0 means sqrt(feature_dim)
GBM_ESTIMATORS = 100
GBM_MAX_DEPTH = 6
GBM_LEARNING_RATE = 0.1

# GAN
GAN_EPOCHS = 100
GAN_BATCH_SIZE = 32
GAN_LEARNING_RATE = 1e-3
GAN_NOISE_DIM = 64
GAN_OPTIMIZER = "sgd"

# Evolution strategy agent
ES_POPULATION = 32
ES_SIGMA = 0.05
ES_ALPHA = 0.01
ES_GENERATIONS = 100
ES_EPISODES = 3
ES_EVAL_EVERY = 10
ES_SUCCESS_THRESHOLD = 0.75
ES_UPDATE_RULE = "nes_shaped"
ES_PATIENCE = 0  # 0 disables the no-progress watchdog
ES_WORKERS = 1

SEED = 1337


class ConfigError(ValueError):
    """Used for invalid or unknown settings"""


@dataclass(frozen=True)
class Settings:
    """One run's worth of settings"""

    workspace: str = WORKSPACE
    seed: int = SEED
    threshold: float = THRESHOLD
    max_steps: int = MAX_STEPS
    stall_limit: int = STALL_LIMIT
    max_imports_per_step: int = MAX_IMPORTS_PER_STEP
    section_content_limit: int = SECTION_CONTENT_LIMIT
    dll_whitelist: str = DLL_WHITELIST
    rf_estimators: int = RF_ESTIMATORS
    rf_max_depth: int = RF_MAX_DEPTH
    rf_max_features: int = RF_MAX_FEATURES
    gbm_estimators: int = GBM_ESTIMATORS
    gbm_max_depth: int = GBM_MAX_DEPTH
    gbm_learning_rate: float = GBM_LEARNING_RATE
    gan_epochs: int = GAN_EPOCHS
    gan_batch_size: int = GAN_BATCH_SIZE
    gan_learning_rate: float = GAN_LEARNING_RATE
    gan_noise_dim: int = GAN_NOISE_DIM
    gan_optimizer: str = GAN_OPTIMIZER
    es_population: int = ES_POPULATION
    es_sigma: float = ES_SIGMA
    es_alpha: float = ES_ALPHA
    es_generations: int = ES_GENERATIONS
    es_episodes: int = ES_EPISODES
    es_eval_every: int = ES_EVAL_EVERY
    es_success_threshold: float = ES_SUCCESS_THRESHOLD
    es_update_rule: str = ES_UPDATE_RULE
    es_patience: int = ES_PATIENCE
    es_workers: int = ES_WORKERS

    @property
    def whitelist(self) -> tuple:
        """DLL base names allowed for add_imports"""
        return tuple(sorted(name.strip().lower() for name in self.dll_whitelist.split(",") if name.strip()))

    def override(self, **changes) -> "Settings":
        """Returns a copy with the non-None changes applied"""
        return replace(self, **{key: value for key, value in changes.items() if value is not None})

    def serialize(self) -> dict:
        """Serializes the settings into a dictionary"""
        return asdict(self)

    def digest(self) -> str:
        """sha256 of the canonical JSON form, excluding the workspace path"""
        data = self.serialize()
        data.pop("workspace")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_settings(workspace: Optional[str] = None, path: Optional[str] = None) -> Settings:
    """Loads the declarative settings file of a workspace

    :param workspace: the workspace root, defaults to EVASIONLAB_WORKSPACE
    :param path: an explicit settings file, defaults to <workspace>/evasionlab.env

    """
    workspace = workspace or WORKSPACE
    settings_path = Path(path) if path else Path(workspace) / SETTINGS_FILE
    settings = Settings(workspace=workspace)
    if not settings_path.exists():
        return settings

    types = {f.name: f.type for f in fields(Settings)}
    changes = {}
    for key, raw in dotenv_values(settings_path).items():
        name = key.lower()
        if name not in types or name == "workspace":
            raise ConfigError(f"Unknown setting {key} in {settings_path}")
        if raw is None:
            raise ConfigError(f"Setting {key} has no value")
        try:
            changes[name] = _coerce(types[name], raw)
        except ValueError as error:
            raise ConfigError(f"Invalid value for {key}: {raw}") from error
    return replace(settings, **changes)


def _coerce(kind, raw: str):
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw.strip()
