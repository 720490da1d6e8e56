"""Plain-text run configuration.

One INI file drives a whole run: sections ``[generator]``, ``[evaluator]``,
``[planner]`` and ``[inference]`` map onto the corresponding dataclasses,
with vocabulary knobs folded into ``[generator]`` under a ``vocab_`` prefix.
Every artifact (dataset, checkpoint, report) records the sha256 of the
canonical rendering so runs can be traced back to their exact settings.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, replace

from .evaluator import EvaluatorConfig
from .planner import PlannerConfig
from .scenario import GenConfig
from .vocab import VocabSpec


class ConfigError(ValueError):
    """Unknown section or key, or a value that does not parse."""


@dataclass(frozen=True)
class InferenceSettings:
    """Knobs that only matter at selection time."""

    version: int = 2
    use_teacher: bool = True


@dataclass
class AppConfig:
    generator: GenConfig = field(default_factory=GenConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    inference: InferenceSettings = field(default_factory=InferenceSettings)


_SECTIONS = ("generator", "evaluator", "planner", "inference")
_VOCAB_PREFIX = "vocab_"

# Tuple-valued evaluator fields need bespoke text forms.
_WEIGHT_FIELDS = {"average_v1", "average_v2"}
_STR_TUPLE_FIELDS = {"penalties_v1", "penalties_v2"}
_FLOAT_TUPLE_FIELDS = {"ttc_checks"}


def _format_value(name: str, v) -> str:
    if name in _WEIGHT_FIELDS:
        return ", ".join("%s:%s" % (k, _format_value("", w)) for k, w in v)
    if isinstance(v, tuple):
        return ", ".join(_format_value("", x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_like(name: str, text: str, proto):
    """Parse text into the type of the prototype value."""
    text = text.strip()
    if name in _WEIGHT_FIELDS:
        pairs = []
        for item in filter(None, (p.strip() for p in text.split(","))):
            if ":" not in item:
                raise ConfigError("expected metric:weight pairs in %r" % name)
            k, w = item.split(":", 1)
            pairs.append((k.strip(), float(w)))
        return tuple(pairs)
    if name in _STR_TUPLE_FIELDS:
        return tuple(filter(None, (p.strip() for p in text.split(","))))
    if name in _FLOAT_TUPLE_FIELDS:
        return tuple(float(p) for p in filter(None, (p.strip() for p in text.split(","))))
    try:
        if isinstance(proto, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ConfigError("bad boolean %r for %s" % (text, name))
        if isinstance(proto, int):
            return int(text)
        if isinstance(proto, float):
            return float(text)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError("bad value for %s: %s" % (name, e)) from None
    return text


def _section_items(cfg: AppConfig, section: str) -> list[tuple[str, str]]:
    obj = getattr(cfg, section)
    items = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if f.name == "vocab":
            for vf in dataclasses.fields(v):
                items.append(
                    (_VOCAB_PREFIX + vf.name,
                     _format_value(vf.name, getattr(v, vf.name)))
                )
        else:
            items.append((f.name, _format_value(f.name, v)))
    return items


def config_text(cfg: AppConfig) -> str:
    """Canonical INI rendering; stable field order, every key explicit."""
    lines = []
    for section in _SECTIONS:
        lines.append("[%s]" % section)
        for key, val in _section_items(cfg, section):
            lines.append("%s = %s" % (key, val))
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: AppConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()


def _apply(obj, overrides: dict):
    return replace(obj, **overrides) if overrides else obj


def parse_config(text: str) -> AppConfig:
    """Parse INI text; unknown sections or keys raise ConfigError."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError("unknown section [%s]" % sec)

    cfg = AppConfig()
    for section in _SECTIONS:
        if not cp.has_section(section):
            continue
        obj = getattr(cfg, section)
        protos = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
        overrides: dict = {}
        vocab_overrides: dict = {}
        for key, raw in cp.items(section):
            if section == "generator" and key.startswith(_VOCAB_PREFIX):
                vkey = key[len(_VOCAB_PREFIX):]
                vprotos = {f.name: getattr(obj.vocab, f.name)
                           for f in dataclasses.fields(VocabSpec)}
                if vkey not in vprotos:
                    raise ConfigError("unknown key %s in [generator]" % key)
                vocab_overrides[vkey] = _parse_like(vkey, raw, vprotos[vkey])
            elif key in protos and key != "vocab":
                overrides[key] = _parse_like(key, raw, protos[key])
            else:
                raise ConfigError("unknown key %s in [%s]" % (key, section))
        if vocab_overrides:
            try:
                overrides["vocab"] = _apply(obj.vocab, vocab_overrides)
            except (TypeError, ValueError) as e:
                raise ConfigError("invalid vocab settings: %s" % e) from None
        try:
            setattr(cfg, section, _apply(obj, overrides))
        except (TypeError, ValueError) as e:
            raise ConfigError("invalid [%s] settings: %s" % (section, e)) from None
    return cfg


def load_config(path) -> AppConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e)) from None


def write_config(path, cfg: AppConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_text(cfg))


def desk_config() -> AppConfig:
    """Small grid and model; minutes-scale training on a laptop CPU."""
    return AppConfig(
        generator=GenConfig(vocab=VocabSpec(n_curvature=16, n_speed=8, n_accel=4)),
        planner=PlannerConfig(
            hidden_dim=64,
            coarse_layers=2,
            refine_layers=2,
            attn_heads=2,
            ff_dim=128,
            top_k=64,
            lr=2e-3,
            epochs=2,
            ema_mode="scratch",
        ),
    )


def paper_config() -> AppConfig:
    """Full-scale settings; defaults of every block."""
    return AppConfig()
