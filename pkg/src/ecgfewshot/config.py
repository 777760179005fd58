"""Run configuration: plain-text key-value sections, flag overrides, hashing.

Config files use INI-style sections ([synth], [render], [train], [explain],
[run]) whose keys mirror the corresponding dataclass fields. CLI flags win
over file values; the fully resolved configuration is canonicalized and
hashed for provenance before any stage runs.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import fields, replace
from pathlib import Path

from .errors import UsageError
from .fewshot import TrainConfig
from .render import ColorScale, RenderConfig
from .synth import BeatShapeParams, SynthSpec

SECTION_TYPES = {
    "synth": SynthSpec,
    "render": RenderConfig,
    "train": TrainConfig,
}

# shape params live in [synth] under a "shape_" prefix
_SHAPE_PREFIX = "shape_"


def _parse_scalar(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, str):
        return text
    if isinstance(like, tuple):
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = like[0] if like else 0.0
        return tuple(_parse_scalar(p.strip(), elem) for p in parts)
    raise ValueError(f"unsupported config value type for {like!r}")


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_scalar(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def _apply_section(obj, items: dict, section: str):
    valid = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    shape_updates = {}
    for key, text in items.items():
        if section == "synth" and key.startswith(_SHAPE_PREFIX):
            shape_updates[key[len(_SHAPE_PREFIX):]] = text
            continue
        if key not in valid:
            raise UsageError(f"unknown config key [{section}] {key}")
        current = valid[key]
        if section == "render" and key == "color_scale":
            updates[key] = parse_color_scale(text)
            continue
        try:
            updates[key] = _parse_scalar(text, current)
        except ValueError as exc:
            raise UsageError(f"bad value for [{section}] {key}: {exc}") from exc
    if shape_updates:
        shape = valid.get("shape")
        shape_valid = {f.name: getattr(shape, f.name) for f in fields(shape)}
        parsed = {}
        for key, text in shape_updates.items():
            if key not in shape_valid:
                raise UsageError(f"unknown config key [synth] shape_{key}")
            parsed[key] = _parse_scalar(text, shape_valid[key])
        updates["shape"] = replace(shape, **parsed)
    return replace(obj, **updates)


def parse_color_scale(text: str) -> ColorScale:
    """Parse 'u:r,g,b;u:r,g,b;...' (optionally '|clamp_lo|clamp_hi')."""
    clamp_lo, clamp_hi = 0.0, 1.0
    if "|" in text:
        text, lo_s, hi_s = text.split("|")
        clamp_lo, clamp_hi = float(lo_s), float(hi_s)
    stops = []
    for part in text.split(";"):
        u_s, _, rgb_s = part.strip().partition(":")
        rgb = tuple(int(v) for v in rgb_s.split(","))
        stops.append((float(u_s), rgb))
    return ColorScale(stops=tuple(stops), clamp_low=clamp_lo, clamp_high=clamp_hi)


def format_color_scale(scale: ColorScale) -> str:
    stops = ";".join(f"{u:g}:{r},{g},{b}" for u, (r, g, b) in scale.stops)
    return f"{stops}|{scale.clamp_low:g}|{scale.clamp_high:g}"


class RunConfig:
    """Resolved synth/render/train sections plus global run settings."""

    def __init__(self, synth=None, render=None, train=None, boundary_path=None,
                 seed: int | None = None):
        self.synth = synth or SynthSpec()
        self.render = render or RenderConfig()
        self.train = train or TrainConfig()
        self.boundary_path = boundary_path
        self.seed = seed

    @classmethod
    def from_file(cls, path=None) -> "RunConfig":
        cfg = cls()
        if path is None:
            return cfg
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise UsageError(f"config file not found: {path}")
        for section in parser.sections():
            items = dict(parser.items(section))
            if section == "run":
                if "boundary" in items:
                    cfg.boundary_path = items.pop("boundary")
                if "seed" in items:
                    cfg.seed = int(items.pop("seed"))
                if items:
                    raise UsageError(f"unknown config key [run] {next(iter(items))}")
            elif section in SECTION_TYPES:
                setattr(cfg, section, _apply_section(getattr(cfg, section), items, section))
            else:
                raise UsageError(f"unknown config section [{section}]")
        return cfg

    def canonical_text(self) -> str:
        lines = []
        for section in ("synth", "render", "train"):
            obj = getattr(self, section)
            for f in sorted(fields(obj), key=lambda f: f.name):
                value = getattr(obj, f.name)
                if section == "render" and f.name == "color_scale":
                    lines.append(f"render.color_scale={format_color_scale(value)}")
                elif section == "synth" and f.name == "shape":
                    for sf in sorted(fields(value), key=lambda sf: sf.name):
                        lines.append(
                            f"synth.shape_{sf.name}={_format_scalar(getattr(value, sf.name))}"
                        )
                else:
                    lines.append(f"{section}.{f.name}={_format_scalar(value)}")
        if self.boundary_path:
            lines.append(f"run.boundary={self.boundary_path}")
        if self.seed is not None:
            lines.append(f"run.seed={self.seed}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def print_config(self) -> str:
        """INI-formatted dump of every resolved setting."""
        out = []
        for section in ("synth", "render", "train"):
            obj = getattr(self, section)
            out.append(f"[{section}]")
            for f in fields(obj):
                value = getattr(obj, f.name)
                if section == "render" and f.name == "color_scale":
                    out.append(f"color_scale = {format_color_scale(value)}")
                elif section == "synth" and f.name == "shape":
                    for sf in fields(value):
                        out.append(f"shape_{sf.name} = {_format_scalar(getattr(value, sf.name))}")
                else:
                    out.append(f"{f.name} = {_format_scalar(value)}")
            out.append("")
        out.append("[run]")
        if self.boundary_path:
            out.append(f"boundary = {self.boundary_path}")
        if self.seed is not None:
            out.append(f"seed = {self.seed}")
        return "\n".join(out) + "\n"
