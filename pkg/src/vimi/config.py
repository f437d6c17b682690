"""Run configuration: defaults, TOML files, flag overrides, seeds.

Precedence for every value is flag > config file > built-in default; the
seed additionally consults the VIMI_SEED environment variable between the
config file and the default. The configuration hash covers every field so
two runs with identical settings report identical hashes, and no filesystem
paths live in the config, so the hash is stable across working directories.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diffusion import DiffusionConfig
from .encoder import EncoderSpec
from .retrieval import BM25Params

SEED_ENV_VAR = "VIMI_SEED"


class ConfigError(Exception):
    """Unreadable or malformed configuration."""


@dataclass(frozen=True)
class RetrievalSection:
    k1: float = 1.2
    b: float = 0.75
    k: int = 3

    def params(self) -> BM25Params:
        return BM25Params(k1=self.k1, b=self.b)


@dataclass(frozen=True)
class VideoSection:
    frames: int = 16
    framerate: float = 24.0
    height: int = 9
    width: int = 16
    channels: int = 3
    stage2_height: int = 36
    stage2_width: int = 64

    def stage1_shape(self) -> tuple[int, int, int, int]:
        return self.frames, self.height, self.width, self.channels

    def stage2_shape(self) -> tuple[int, int, int, int]:
        return self.frames, self.stage2_height, self.stage2_width, self.channels


@dataclass(frozen=True)
class TrainingSection:
    lr: float = 5e-3
    batch_size: int = 256
    stage1_steps: int = 2000
    stage2_steps: int = 500
    freeze_steps: int = -1  # -1 -> 10% of steps
    hidden: int = 64
    # Stage-2 task mixture; any non-negative weights, at least one positive.
    subject_weight: float = 1.0
    predict_weight: float = 1.0
    t2v_weight: float = 1.0


@dataclass(frozen=True)
class SamplingSection:
    steps1: int = 256
    steps2: int = 40
    cfg_scale: float = 7.5


@dataclass(frozen=True)
class RunConfig:
    # None means "not set anywhere yet"; resolve_seed turns it into an int.
    seed: int | None = None
    retrieval: RetrievalSection = RetrievalSection()
    diffusion: DiffusionConfig = DiffusionConfig()
    encoder: EncoderSpec = EncoderSpec()
    video: VideoSection = VideoSection()
    training: TrainingSection = TrainingSection()
    sampling: SamplingSection = SamplingSection()


_SECTION_TYPES = {
    "retrieval": RetrievalSection,
    "diffusion": DiffusionConfig,
    "encoder": EncoderSpec,
    "video": VideoSection,
    "training": TrainingSection,
    "sampling": SamplingSection,
}


def _build_section(cls, table: dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{where}]")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in [{where}]: {exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults overlaid with the TOML file when one is given."""
    if path is None:
        return RunConfig()
    raw = Path(path).read_bytes()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    top_known = {"seed"} | set(_SECTION_TYPES)
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    sections = {
        name: _build_section(cls, doc.get(name, {}), name)
        for name, cls in _SECTION_TYPES.items()
    }
    seed = doc.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool)):
        raise ConfigError("seed must be an integer")
    return RunConfig(seed=seed, **sections)


def resolve_seed(flag_seed: int | None, file_seed: int | None, default: int = 0) -> int:
    """flag > config file > VIMI_SEED environment variable > default."""
    if flag_seed is not None:
        return flag_seed
    if file_seed is not None:
        return file_seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
    return default


def override(config: RunConfig, section: str, **values: Any) -> RunConfig:
    """Replace fields inside one section (or 'seed' at the top level),
    dropping None values so unset flags leave the config alone."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return config
    if section == "":
        return replace(config, **values)
    return replace(config, **{section: replace(getattr(config, section), **values)})


def config_hash(config: RunConfig) -> str:
    """sha256 over the canonical JSON rendering of every field."""
    payload = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
