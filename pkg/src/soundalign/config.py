"""Experiment configuration: dataclasses, INI file loading, canonical hashing.

The config file is INI-style (``configparser``)::

    [encoders]
    d_audio = 64
    [training]
    profile = desk          ; or "full" for lr_text=1e-5, lr_vision=1e-7
    lr_text = 1e-3
    [augmentation]
    transforms = gain, reverb, pitch_shift
    [rule:gain_low]
    kind = gain
    low = 0
    high = 0.2
    templates =
        a distant {subject} {rest}
    [compose]
    templates =
        {u_a_subject} and {v_a_subject} in the same scene
    [caption_service]
    url = http://localhost:8080/caption

Any ``rule:*`` section replaces the built-in rewrite rules wholesale.
Overrides use dotted keys (``training.lr_text=0``) and beat file values.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

from .alignment import ModelConfig
from .augmentation import (DEFAULT_COMPOSE_TEMPLATES, DEFAULT_RULES, AugmentationConfig,
                           CaptionRewriteRule, CaptionRules, CaptionService)
from .encoders import EncoderConfig
from .errors import ConfigurationError

PROFILES = {"desk": (1e-3, 1e-4), "full": (1e-5, 1e-7)}


@dataclass(frozen=True)
class TrainingConfig:
    lr_text: float = 1e-3
    lr_vision: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    ext_loss_enabled: bool = False
    mix_pair_budget: int | None = None  # None -> one mix per training clip
    val_fraction: float = 0.1

    def __post_init__(self):
        if not (self.lr_text >= 0 and self.lr_vision >= 0):
            raise ConfigurationError("training.lr_text / lr_vision must be >= 0")
        if self.patience < 1:
            raise ConfigurationError("training.patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("training.batch_size must be >= 1")


@dataclass(frozen=True)
class ServiceConfig:
    url: str = ""
    timeout: float = 10.0
    retries: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    rules: tuple[CaptionRewriteRule, ...] = DEFAULT_RULES
    compose_templates: tuple[str, ...] = DEFAULT_COMPOSE_TEMPLATES
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def __post_init__(self):
        e, m = self.encoders, self.model
        if (m.d_audio, m.d_text, m.d_vision) != (e.d_audio, e.d_text, e.d_vision):
            object.__setattr__(self, "model", dataclasses.replace(
                m, d_audio=e.d_audio, d_text=e.d_text, d_vision=e.d_vision))

    def caption_rules(self) -> CaptionRules:
        svc = CaptionService(self.service.url, self.service.timeout, self.service.retries) if self.service.url else None
        return CaptionRules(self.rules, self.compose_templates, svc, tuple(self.augmentation.transforms))

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with whole sections or ``section__key`` fields swapped."""
        updates: dict[str, Any] = {}
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                base = updates.get(sec, getattr(self, sec))
                updates[sec] = dataclasses.replace(base, **{name: value})
            else:
                updates[key] = value
        return dataclasses.replace(self, **updates)

    def to_dict(self) -> dict:
        return {
            "encoders": dataclasses.asdict(self.encoders),
            "model": dataclasses.asdict(self.model),
            "training": dataclasses.asdict(self.training),
            "augmentation": {k: list(v) for k, v in dataclasses.asdict(self.augmentation).items()},
            "rules": [{"kind": r.kind, "low": r.low, "high": r.high, "templates": list(r.templates)}
                      for r in self.rules],
            "compose_templates": list(self.compose_templates),
            "service": dataclasses.asdict(self.service),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        return cls(
            encoders=EncoderConfig(**d["encoders"]),
            model=ModelConfig(**d["model"]),
            training=TrainingConfig(**d["training"]),
            augmentation=AugmentationConfig(**{k: tuple(v) for k, v in d["augmentation"].items()}),
            rules=tuple(CaptionRewriteRule(r["kind"], float(r["low"]), float(r["high"]), tuple(r["templates"]))
                        for r in d["rules"]),
            compose_templates=tuple(d["compose_templates"]),
            service=ServiceConfig(**d["service"]),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()


# ---------------------------------------------------------------------------
# INI loading

_SECTIONS = {"encoders": EncoderConfig, "model": ModelConfig, "training": TrainingConfig,
             "augmentation": AugmentationConfig, "caption_service": ServiceConfig}


def _coerce(section: str, key: str, raw: str, typ) -> Any:
    text = raw.strip()
    typ = str(typ)
    try:
        if "tuple" in typ:
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if "float" in typ:
                return tuple(float(p) for p in parts)
            return tuple(parts)
        if typ.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "None" in typ and text.lower() in ("", "none"):
            return None
        if typ.startswith("int"):
            return int(text)
        if typ.startswith("float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"{section}.{key}: cannot parse {raw!r} as {typ}") from None


def _section_values(section: str, items: Mapping[str, str], cls) -> dict[str, Any]:
    known = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in items.items():
        if section == "training" and key == "profile":
            continue
        if key not in known:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        out[key] = _coerce(section, key, raw, known[key])
    return out


def _parse_bound(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "+inf"):
        return math.inf
    if t == "-inf":
        return -math.inf
    return float(t)


def load_config(path: str | os.PathLike | None = None,
                overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read an INI config (optional) and apply ``section.key`` overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config file {path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigurationError(f"override {dotted!r} must be section.key")
        sec, key = dotted.split(".", 1)
        if not parser.has_section(sec):
            parser.add_section(sec)
        parser.set(sec, key, str(value))

    sections: dict[str, Any] = {}
    for sec in parser.sections():
        if sec.startswith("rule:") or sec == "compose":
            continue
        if sec not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{sec}]")
        values = _section_values(sec, dict(parser.items(sec)), _SECTIONS[sec])
        if sec == "training":
            profile = parser.get(sec, "profile", fallback=None)
            if profile is not None:
                if profile not in PROFILES:
                    raise ConfigurationError(f"training.profile must be one of {sorted(PROFILES)}")
                lr_t, lr_v = PROFILES[profile]
                values.setdefault("lr_text", lr_t)
                values.setdefault("lr_vision", lr_v)
        try:
            sections["service" if sec == "caption_service" else sec] = _SECTIONS[sec](**values)
        except TypeError as exc:
            raise ConfigurationError(f"[{sec}]: {exc}") from None

    rules = []
    for sec in parser.sections():
        if not sec.startswith("rule:"):
            continue
        item = dict(parser.items(sec))
        for req in ("kind", "templates"):
            if req not in item:
                raise ConfigurationError(f"[{sec}] is missing {req}")
        templates = tuple(t.strip() for t in item["templates"].splitlines() if t.strip())
        rules.append(CaptionRewriteRule(item["kind"].strip(), _parse_bound(item.get("low", "-inf")),
                                        _parse_bound(item.get("high", "inf")), templates))
    if rules:
        sections["rules"] = tuple(rules)
    if parser.has_section("compose"):
        templates = parser.get("compose", "templates", fallback="")
        sections["compose_templates"] = tuple(t.strip() for t in templates.splitlines() if t.strip())

    config = ExperimentConfig(**sections)
    config.caption_rules()  # every transform needs a rewrite rule
    return config
