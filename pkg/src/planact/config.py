"""Flat key=value run configuration.

Every tunable default across the package is addressable by a dotted key
(e.g. train.lr, extract.min_gap); values merge defaults < file < command
line.  Unknown keys are rejected so typos fail loudly, and the effective
config can be echoed next to a run's outputs for reproducibility.
"""

from __future__ import annotations

import dataclasses

from .keysteps import ExtractorConfig
from .model import TrainConfig
from .sequences import BuildConfig
from .sim import ExpertConfig, SimConfig

# dataclass-backed sections; field defaults become config defaults
SECTIONS = {
    "extract": ExtractorConfig,
    "build": BuildConfig,
    "train": TrainConfig,
    "sim": SimConfig,
    "expert": ExpertConfig,
}

# harness-level defaults with no dataclass home
EXTRA_DEFAULTS = {
    "data.task": "single",
    "data.episodes": 500,
    "data.noise": 0.01,
    "data.seed0": 0,
    "codec.lang_size": 512,
    "codec.vision_k": 256,
    "codec.vision_iters": 20,
    "codec.vision_frames": 2000,
    "codec.quant_levels": 2048,
    "codec.chunk_stride": 4,
    "codec.seed": 0,
    "filter.mode": "stub",
    "filter.threshold": 0.01,
    "eval.task": "single",
    "eval.trials": 50,
    "eval.exec_k": 2,
    "eval.seed0": 10000,
    "eval.max_steps": 220,
    "serve.port": 8700,
    "serve.image_h": 32,
    "serve.image_w": 32,
    "experiment.threshold": 0.6,
    "experiment.eval_every": 250,
    "experiment.trials": 20,
    "experiment.steps1": 300,
    "experiment.steps2": 500,
}


def default_config() -> dict:
    cfg: dict = {}
    for prefix, cls in SECTIONS.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            cfg[f"{prefix}.{f.name}"] = getattr(inst, f.name)
    cfg.update(EXTRA_DEFAULTS)
    return cfg


def _parse_like(key: str, default, text: str):
    """Coerce `text` to the type of the default for `key`."""
    text = text.strip()
    if default is None or text.lower() == "none":
        if text.lower() in ("", "none"):
            return None
        # the only None-default field takes a comma list of ints
        return tuple(int(x) for x in text.split(","))
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip() != ""]
        elem = default[0] if default else 0.0
        caster = int if isinstance(elem, int) and not isinstance(elem, bool) \
            else float
        return tuple(caster(p) for p in parts)
    return text


def parse_assignments(pairs, defaults: dict | None = None) -> dict:
    """['a.b=1', ...] -> typed overrides; unknown keys rejected."""
    defaults = defaults if defaults is not None else default_config()
    out: dict = {}
    for raw in pairs:
        if "=" not in raw:
            raise ValueError(f"expected key=value, got {raw!r}")
        key, _, val = raw.partition("=")
        key = key.strip()
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _parse_like(key, defaults[key], val)
    return out


def load_config_file(path: str, defaults: dict | None = None) -> dict:
    lines = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            lines.append(stripped)
    try:
        return parse_assignments(lines, defaults)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def merge_config(*layers) -> dict:
    """defaults first, later layers win; result always holds every key."""
    cfg = default_config()
    for layer in layers:
        for key, val in layer.items():
            if key not in cfg:
                raise ValueError(f"unknown config key {key!r}")
            cfg[key] = val
    return cfg


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def echo_config(cfg: dict, path: str) -> None:
    with open(path, "w") as f:
        for key in sorted(cfg):
            f.write(f"{key} = {_format_value(cfg[key])}\n")


def section(cfg: dict, prefix: str):
    """Materialize a dataclass section from the flat config."""
    cls = SECTIONS[prefix]
    kwargs = {
        f.name: cfg[f"{prefix}.{f.name}"] for f in dataclasses.fields(cls)
    }
    return cls(**kwargs)
