"""Run configuration: TOML or JSON, strict keys, defaults filled in and echoed."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, ValidationError
from .hista import HistaParams
from .numca import DEFAULT_PATTERNS, compile_patterns
from .synth import EnvConfig, number_chain

RESOLVED_FILE = "resolved_config.json"

# generator knobs for the built-in chain; explicit tables switch to a custom env
_CHAIN_DEFAULTS = {
    "n_latent": 6, "dim": 16, "noise_sigma": 0.1, "max_len": 48, "numeric": True,
    "stickiness": 0.9, "cross": 0.005, "p_answer": 0.4, "spread": 0.5,
}
_ENV_RUN_DEFAULTS = {"prompts": 200, "rollouts_per_prompt": 8}
_EXPLICIT_KEYS = ("transition", "vocab", "emit", "target_number", "answer_tokens",
                  "start_weights", "embeddings")
_REQUIRED_EXPLICIT = ("transition", "vocab", "emit", "target_number")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": None,
    "methods": ["grpo", "numca", "hista"],
    "normalize": False,
    "threads": 1,
    "env": {**_CHAIN_DEFAULTS, **_ENV_RUN_DEFAULTS},
    "hista": HistaParams().to_dict(),
    "numca": {"patterns": list(DEFAULT_PATTERNS)},
    "sveb": {"per_rollout": 5, "reference": "exact", "n_reference": 20,
             "filter_lo": 0.1, "filter_hi": 0.8},
}
_SECTIONS = ("env", "hista", "numca", "sveb")


def _check_type(where: str, value, proto):
    if proto is None or isinstance(proto, str) and value is None:
        return
    if isinstance(proto, bool):
        ok = isinstance(value, bool)
    elif isinstance(proto, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(proto, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(proto, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(proto))
    if not ok:
        raise ConfigError(f"{where}: expected {type(proto).__name__}, got {value!r}")


def _merge(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table/object")
    out = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            allowed = dict(out[key])
            if key == "env":
                allowed.update(dict.fromkeys(_EXPLICIT_KEYS))
            for sub, v in value.items():
                if sub not in allowed:
                    raise ConfigError(f"unknown config key {key}.{sub}")
                _check_type(f"{key}.{sub}", v, allowed[sub])
                out[key][sub] = v
        else:
            _check_type(key, value, DEFAULTS[key] if DEFAULTS[key] is not None else "")
            out[key] = value
    return out


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    methods: list[str] = field(default_factory=lambda: list(DEFAULTS["methods"]))
    normalize: bool = False
    threads: int = 1
    env: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["env"]))
    hista: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["hista"]))
    numca: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["numca"]))
    sveb: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["sveb"]))

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        cfg = cls(**_merge(raw or {}))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")
        try:
            self.hista_params()
            compile_patterns(self.numca["patterns"])
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None
        s = self.sveb
        if s["per_rollout"] < 1 or s["n_reference"] < 1:
            raise ConfigError("sveb.per_rollout and sveb.n_reference must be >= 1")
        if s["reference"] not in ("exact", "mcs"):
            raise ConfigError("sveb.reference must be 'exact' or 'mcs'")
        if not 0.0 <= s["filter_lo"] <= s["filter_hi"] <= 1.0:
            raise ConfigError("need 0 <= sveb.filter_lo <= sveb.filter_hi <= 1")
        if self.env["prompts"] < 0 or self.env["rollouts_per_prompt"] < 1:
            raise ConfigError("env.prompts must be >= 0 and env.rollouts_per_prompt >= 1")

    def hista_params(self) -> HistaParams:
        return HistaParams(**self.hista)

    def reference(self) -> str:
        s = self.sveb
        return "exact" if s["reference"] == "exact" else f"mcs@{s['n_reference']}"

    def env_config(self) -> EnvConfig:
        """EnvConfig from explicit tables when given, else the built-in chain."""
        e = self.env
        explicit = {k: e[k] for k in _EXPLICIT_KEYS if e.get(k) is not None}
        if explicit:
            missing = [k for k in _REQUIRED_EXPLICIT if k not in explicit]
            if missing:
                raise ConfigError(f"explicit env needs keys {missing}")
            return EnvConfig(n_latent=e["n_latent"], max_len=e["max_len"], dim=e["dim"],
                             noise_sigma=e["noise_sigma"], seed=self.seed, **explicit)
        return number_chain(**{k: e[k] for k in _CHAIN_DEFAULTS}, seed=self.seed)

    def resolved(self) -> dict:
        env = {k: v for k, v in self.env.items() if v is not None}
        return {"seed": self.seed, "out": self.out, "methods": list(self.methods),
                "normalize": self.normalize, "threads": self.threads, "env": env,
                "hista": dict(self.hista), "numca": dict(self.numca), "sveb": dict(self.sveb)}

    def write_resolved(self, out_dir: str | os.PathLike) -> Path:
        path = Path(out_dir) / RESOLVED_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.resolved(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def read_config_file(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        if path.suffix.lower() == ".json":
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    return RunConfig.from_dict(read_config_file(path) if path else {})
