#!/usr/bin/env python3
"""
Centralized Run Configuration
Layering: field defaults < INSTANCE_SEARCH_* environment (.env honoured) < JSON config file < CLI flags.
"""

import json
import os
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from search_errors import ConfigError

load_dotenv()

ENV_PREFIX = 'INSTANCE_SEARCH_'

# Thread-safe env default tracking
_env_lock = threading.Lock()
_env_defaults: Optional[Dict[str, Any]] = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)

    stage_selection: List[str] = Field(default_factory=lambda: ['conv3', 'conv4'])
    stage_sweep: List[List[str]] = Field(default_factory=lambda: [
        ['conv2'], ['conv3'], ['conv4'], ['conv5'], ['conv3', 'conv4'], ['conv4', 'conv5']])
    prune_by_category: bool = True
    use_mask: bool = False
    ks: List[Optional[int]] = Field(default_factory=lambda: [10, 20, 50, 100, None])

    fmap_dir: Optional[Path] = None
    detections_dir: Optional[Path] = None
    manifest: Optional[Path] = None
    annotations_dir: Optional[Path] = None
    features: Optional[Path] = None
    queries: Optional[Path] = None
    index: Optional[Path] = None
    rankings: Optional[Path] = None
    query_subset: Optional[Path] = None
    output_dir: Path = Path('out')

    stride: int = 5
    category_filter: bool = True

    distractor_counts: List[int] = Field(default_factory=lambda: [10_000, 100_000, 1_000_000])
    distractor_ratio: float = Field(default=1.648654, ge=1.0)
    dim: int = Field(default=1536, ge=1)
    seed: int = 0
    seeds: List[int] = Field(default_factory=lambda: [0])
    scale_k: int = Field(default=50, ge=1)
    plot: bool = False

    threads: int = 1

    @field_validator('ks')
    @classmethod
    def _ks_ascending(cls, ks):
        finite = [k for k in ks if k is not None]
        if not ks:
            raise ValueError("ks must not be empty")
        if any(k < 1 for k in finite):
            raise ValueError("ks must be positive")
        if finite != sorted(set(finite)) or (None in ks and ks[-1] is not None) or ks.count(None) > 1:
            raise ValueError("ks must be strictly ascending, with 'all' last")
        return ks

    @field_validator('threads')
    @classmethod
    def _threads_positive(cls, threads):
        if threads < 1:
            raise ValueError("threads must be >= 1")
        return threads

    @field_validator('stage_selection')
    @classmethod
    def _stages_present(cls, stages):
        if not stages:
            raise ValueError("stage_selection must name at least one stage")
        return stages

    @field_validator('stage_sweep')
    @classmethod
    def _sweep_present(cls, sweep):
        if not sweep or any(not selection for selection in sweep):
            raise ValueError("stage_sweep entries must be non-empty")
        return sweep

    @field_validator('seeds')
    @classmethod
    def _seeds_present(cls, seeds):
        if not seeds:
            raise ValueError("seeds must not be empty")
        return seeds

    @field_validator('stride')
    @classmethod
    def _known_stride(cls, stride):
        if stride not in (4, 5):
            raise ValueError("stride must be 5 (keep one, skip four) or 4")
        return stride

    @field_validator('distractor_counts')
    @classmethod
    def _counts_non_negative(cls, counts):
        if any(count < 0 for count in counts):
            raise ValueError("distractor counts must be >= 0")
        return counts


def parse_ks(text: str) -> List[Optional[int]]:
    """'10,20,50,all' -> [10, 20, 50, None]"""
    return [None if part.strip().lower() == 'all' else int(part) for part in text.split(',') if part.strip()]


def parse_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(',') if part.strip()]


def parse_sweep(text: str) -> List[List[str]]:
    """'conv3;conv4;conv3+conv4' -> [['conv3'], ['conv4'], ['conv3', 'conv4']]"""
    return [parse_list(selection.replace('+', ',')) for selection in text.split(';') if selection.strip()]


_ENV_PARSERS = {
    'stage_selection': parse_list,
    'stage_sweep': parse_sweep,
    'ks': parse_ks,
    'distractor_counts': lambda text: [int(v) for v in parse_list(text)],
    'seeds': lambda text: [int(v) for v in parse_list(text)],
    'prune_by_category': lambda text: text.strip().lower() in ('1', 'true', 'yes', 'on'),
    'use_mask': lambda text: text.strip().lower() in ('1', 'true', 'yes', 'on'),
    'category_filter': lambda text: text.strip().lower() in ('1', 'true', 'yes', 'on'),
    'plot': lambda text: text.strip().lower() in ('1', 'true', 'yes', 'on'),
}


def _read_env() -> Dict[str, Any]:
    values = {}
    for name in RunConfig.model_fields:
        raw = os.getenv(ENV_PREFIX + name.upper())
        if raw is None:
            continue
        try:
            values[name] = _ENV_PARSERS.get(name, str)(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {ENV_PREFIX + name.upper()}: {e}", {'value': raw}) from e
    return values


def env_defaults(refresh: bool = False) -> Dict[str, Any]:
    """INSTANCE_SEARCH_* overrides, resolved once per process. Thread-safe."""
    global _env_defaults
    with _env_lock:
        if _env_defaults is None or refresh:
            _env_defaults = _read_env()
        return dict(_env_defaults)


def load_config_file(path: Path) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config file: {e}", {'path': path}) from e
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object", {'path': path})
    if 'ks' in data:
        data['ks'] = [None if k == 'all' else k for k in data['ks']]
    return data


def build_config(config_file: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None,
                 use_env: bool = True) -> RunConfig:
    layered: Dict[str, Any] = {}
    if use_env:
        layered.update(env_defaults())
    if config_file is not None:
        layered.update(load_config_file(config_file))
    layered.update({key: value for key, value in (overrides or {}).items() if value is not None})
    try:
        return RunConfig(**layered)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(f"invalid configuration: {'.'.join(str(p) for p in first['loc'])}: {first['msg']}",
                          {'errors': len(e.errors())}) from e


def check_paths(config: RunConfig, *names: str):
    """Every named path field must be set and exist."""
    for name in names:
        value = getattr(config, name)
        if value is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required", {'field': name})
        if not Path(value).exists():
            raise ConfigError(f"{name} path does not exist: {value}", {'field': name, 'path': value})
