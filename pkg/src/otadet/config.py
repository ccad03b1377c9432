"""Application configuration: JSON file, flag overrides, then env overrides.

Precedence is lowest to highest: built-in defaults, config file, explicit
flag overrides, environment variables (OTA_LLM_ENDPOINT, OTA_LLM_MODEL,
OTA_LLM_KEY, OTA_LOG). Strict loading rejects unknown keys.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights, MalConfig
from .supervision import SamplerConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass(frozen=True)
class HeadConfig:
    d_vis: int = 32
    d_txt: int = 32
    init_alpha: float = 5.0
    init_beta: float = -2.0
    share_scales: bool = False


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str | None = None
    model: str | None = None
    api_key: str | None = None
    timeout: float = 30.0


@dataclass(frozen=True)
class PathsConfig:
    data_in: str | None = None
    data_out: str | None = None
    checkpoints: str | None = None
    transcripts: str | None = None


@dataclass(frozen=True)
class AppConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mal: MalConfig = field(default_factory=MalConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    head: HeadConfig = field(default_factory=HeadConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    log_level: str = "INFO"


_SECTIONS = {
    "paths": PathsConfig,
    "sampler": SamplerConfig,
    "mal": MalConfig,
    "weights": LossWeights,
    "head": HeadConfig,
    "llm": LlmConfig,
}


def _build_section(cls, payload: dict, strict: bool, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown and strict:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    kwargs = {k: v for k, v in payload.items() if k in known}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def load_config(
    path: str | Path | None = None,
    strict: bool = True,
    overrides: dict | None = None,
    env: dict | None = None,
) -> AppConfig:
    """Assemble the effective configuration.

    ``overrides`` uses dotted section keys (e.g. ``{"sampler": {"seed": 7}}``)
    and is applied on top of the file; environment variables win last.
    """
    payload: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fp:
            try:
                payload = json.load(fp)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("config file must hold a JSON object")

    unknown = set(payload) - set(_SECTIONS) - {"log_level"}
    if unknown and strict:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    merged: dict[str, dict] = {name: dict(payload.get(name, {})) for name in _SECTIONS}
    log_level = payload.get("log_level", "INFO")

    if overrides:
        for name, section in overrides.items():
            if name == "log_level":
                log_level = section
                continue
            if name not in _SECTIONS:
                raise ConfigError(f"unknown override section {name!r}")
            merged[name].update(section)

    env = os.environ if env is None else env
    if env.get("OTA_LLM_ENDPOINT"):
        merged["llm"]["endpoint"] = env["OTA_LLM_ENDPOINT"]
    if env.get("OTA_LLM_MODEL"):
        merged["llm"]["model"] = env["OTA_LLM_MODEL"]
    if env.get("OTA_LLM_KEY"):
        merged["llm"]["api_key"] = env["OTA_LLM_KEY"]
    if env.get("OTA_LOG"):
        log_level = env["OTA_LOG"]

    sections = {
        name: _build_section(cls, merged[name], strict, name)
        for name, cls in _SECTIONS.items()
    }
    return AppConfig(log_level=str(log_level), **sections)
