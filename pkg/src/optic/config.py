"""Layered configuration: defaults, then file, then environment, then flags.

The file may be TOML or JSON with sections chat / detector / pipeline /
marks / prompts. Environment variables OPTIC_CHAT_BASE_URL,
OPTIC_CHAT_API_KEY, and OPTIC_DETECTOR_URL override the file; explicit
CLI flags override everything.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backends import EndpointConfig
from .marking import MarkStyle
from .pipeline import PipelineConfig

ENV_CHAT_BASE_URL = "OPTIC_CHAT_BASE_URL"
ENV_CHAT_API_KEY = "OPTIC_CHAT_API_KEY"
ENV_DETECTOR_URL = "OPTIC_DETECTOR_URL"


class ConfigError(ValueError):
    """A config file that cannot be read or parsed."""


DEFAULTS: dict[str, dict[str, Any]] = {
    "chat": {
        "base_url": "",
        "api_key": "",
        "model": "",
        "text_model": "",
        "visual_model": "",
        "timeout_s": 120.0,
        "max_concurrency": 4,
    },
    "detector": {
        "url": "",
        "box_threshold": 0.35,
        "text_threshold": 0.25,
        "timeout_s": 120.0,
    },
    "pipeline": {
        "temperature": 0.75,
        "seed": 42,
        "retry_count": 0,
        "ambiguity_suffix": False,
        "prompt_placement": "system",
        "force_visual_stage": False,
        "max_image_side": 0,  # 0 means off
    },
    "marks": {
        "scale": 2,
        "stroke_width": 2,
        "outlines": True,
    },
    "prompts": {
        "text_grounder": "",
        "visual_grounder": "",
        "gpt4v_baseline": "",
    },
}


def _load_config_file(path) -> dict:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    text = raw.decode("utf-8")
    if p.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config {p}: {exc}") from exc
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML config {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a table/object: {p}")
    return data


def _merge(base: dict, overlay: dict) -> dict:
    merged = {section: dict(values) for section, values in base.items()}
    for section, values in overlay.items():
        if section not in merged or not isinstance(values, dict):
            continue
        for key, value in values.items():
            if key in merged[section] and value is not None:
                merged[section][key] = value
    return merged


@dataclass(frozen=True)
class ResolvedConfig:
    """Fully merged settings, ready to build pipeline and endpoint configs."""

    values: dict

    def pipeline_config(self) -> PipelineConfig:
        v = self.values
        prompts = {role: path for role, path in v["prompts"].items() if path}
        max_side = int(v["pipeline"]["max_image_side"]) or None
        return PipelineConfig(
            temperature=float(v["pipeline"]["temperature"]),
            box_threshold=float(v["detector"]["box_threshold"]),
            text_threshold=float(v["detector"]["text_threshold"]),
            mark_style=MarkStyle(
                scale=int(v["marks"]["scale"]),
                stroke_width=int(v["marks"]["stroke_width"]),
                draw_outlines=bool(v["marks"]["outlines"]),
            ),
            ambiguity_suffix_enabled=bool(v["pipeline"]["ambiguity_suffix"]),
            retry_count=int(v["pipeline"]["retry_count"]),
            seed=int(v["pipeline"]["seed"]),
            prompt_placement=str(v["pipeline"]["prompt_placement"]),
            force_visual_stage=bool(v["pipeline"]["force_visual_stage"]),
            max_image_side=max_side,
            prompt_paths=prompts or None,
        )

    def chat_endpoint(self, model_key: str = "model") -> EndpointConfig:
        chat = self.values["chat"]
        model = chat.get(model_key) or chat["model"]
        return EndpointConfig(
            base_url=str(chat["base_url"]),
            api_key=str(chat["api_key"]),
            model_name=str(model),
            timeout_s=float(chat["timeout_s"]),
            retry_count=int(self.values["pipeline"]["retry_count"]),
            seed=int(self.values["pipeline"]["seed"]),
            max_concurrency=int(chat["max_concurrency"]),
        )

    def detector_endpoint(self) -> EndpointConfig:
        det = self.values["detector"]
        return EndpointConfig(
            base_url=str(det["url"]),
            timeout_s=float(det["timeout_s"]),
            retry_count=int(self.values["pipeline"]["retry_count"]),
            max_concurrency=int(self.values["chat"]["max_concurrency"]),
        )

    def to_json(self) -> str:
        shown = {s: dict(v) for s, v in self.values.items()}
        if shown["chat"]["api_key"]:
            shown["chat"]["api_key"] = "***"
        return json.dumps(shown, sort_keys=True, indent=2) + "\n"


def resolve_config(
    config_path=None,
    flag_overrides: Optional[dict] = None,
    env: Optional[dict] = None,
) -> ResolvedConfig:
    """Merge defaults < file < environment < flags into one view.

    `flag_overrides` uses the same section/key layout; None values are
    treated as "flag not given".
    """
    merged = {section: dict(values) for section, values in DEFAULTS.items()}
    if config_path is not None:
        merged = _merge(merged, _load_config_file(config_path))
    env = os.environ if env is None else env
    env_overlay: dict[str, dict[str, Any]] = {"chat": {}, "detector": {}}
    if env.get(ENV_CHAT_BASE_URL):
        env_overlay["chat"]["base_url"] = env[ENV_CHAT_BASE_URL]
    if env.get(ENV_CHAT_API_KEY):
        env_overlay["chat"]["api_key"] = env[ENV_CHAT_API_KEY]
    if env.get(ENV_DETECTOR_URL):
        env_overlay["detector"]["url"] = env[ENV_DETECTOR_URL]
    merged = _merge(merged, env_overlay)
    if flag_overrides:
        merged = _merge(merged, flag_overrides)
    return ResolvedConfig(values=merged)
