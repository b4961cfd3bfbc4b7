"""Audio transforms paired with caption rewrites, and cross-class mixing.

Every audio transform has a textual description and at least one caption
rewrite rule, so an augmented clip always comes with a matching target
caption. Caption rewriting is template-based and seeded; an optional HTTP
caption service can take over, with templates as the fallback.
"""

from __future__ import annotations

import json
import logging
import math
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.signal import convolve

from .encoders import AudioClip
from .errors import ConfigurationError, ContractError, InputError, ParameterError
from .rng import Xoshiro256ss, fnv1a64

logger = logging.getLogger(__name__)

TRANSFORM_KINDS = ("gain", "reverb", "pitch_shift")


@dataclass(frozen=True)
class AudioTransformSpec:
    """One concrete transform: its kind, parameters, and description."""

    kind: str
    alpha: float = 1.0
    impulse_id: str = "tunnel"
    wet: float = 0.5
    semitones: float = 0.0
    description: str = ""

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ParameterError(f"unknown transform kind {self.kind!r}")
        if self.kind == "gain" and not self.alpha > 0:
            raise ParameterError(f"gain alpha must be > 0, got {self.alpha}")
        if self.kind == "reverb" and not 0.0 <= self.wet <= 1.0:
            raise ParameterError(f"reverb wet/dry must be in [0, 1], got {self.wet}")
        if not self.description:
            object.__setattr__(self, "description", describe(self))

    @property
    def trigger_value(self) -> float:
        """The parameter that rewrite rules are keyed on."""
        return {"gain": self.alpha, "reverb": self.wet, "pitch_shift": self.semitones}[self.kind]


def describe(spec: AudioTransformSpec) -> str:
    if spec.kind == "gain":
        return f"volume scaled by {spec.alpha:.2f} ({volume_label(spec.alpha)} volume)"
    if spec.kind == "reverb":
        return f"reverberation from a {spec.impulse_id} impulse response, {spec.wet:.0%} wet"
    direction = "up" if spec.semitones >= 0 else "down"
    return f"pitch shifted {direction} by {abs(spec.semitones):g} semitones"


SPACES = {"tunnel": "a tunnel", "hall": "a large hall", "room": "a small room"}


def spec_fields(spec: AudioTransformSpec) -> dict[str, str]:
    """Template fields describing the transform itself."""
    return {"space": SPACES.get(spec.impulse_id, f"a {spec.impulse_id}"), "volume": volume_label(spec.alpha),
            "description": spec.description}


def volume_label(alpha: float) -> str:
    """``low`` below 0.2, ``medium`` on [0.2, 0.5), ``high`` from 0.5 up."""
    if not alpha > 0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    if alpha < 0.2:
        return "low"
    if alpha < 0.5:
        return "medium"
    return "high"


# ---------------------------------------------------------------------------
# audio transforms


def _with_samples(clip: AudioClip, samples: np.ndarray, suffix: str) -> AudioClip:
    return AudioClip(np.clip(samples, -1.0, 1.0), clip.sample_rate, clip.label,
                     f"{clip.source_id}|{suffix}", clip.labels)


def apply_gain(clip: AudioClip, alpha: float) -> AudioClip:
    if not alpha > 0:
        raise ParameterError(f"gain alpha must be > 0, got {alpha}")
    return _with_samples(clip, clip.samples * alpha, f"gain={alpha:g}")


def apply_reverb(clip: AudioClip, impulse: np.ndarray, wet: float) -> AudioClip:
    """Blend the dry clip with its convolution by ``impulse``.

    The wet signal is truncated to the dry length and rescaled to the dry
    peak, so reverb does not also act as a volume change. The blend is
    peak-limited to 1.
    """
    impulse = np.asarray(impulse, dtype=np.float64)
    if impulse.size == 0:
        raise ParameterError("impulse response is empty")
    if not 0.0 <= wet <= 1.0:
        raise ParameterError(f"wet/dry must be in [0, 1], got {wet}")
    dry = clip.samples
    reverbed = convolve(dry, impulse)[: dry.size]
    dry_peak, wet_peak = np.abs(dry).max(), np.abs(reverbed).max()
    if wet_peak > 0:
        reverbed = reverbed * (dry_peak / wet_peak)
    out = (1.0 - wet) * dry + wet * reverbed
    peak = np.abs(out).max()
    if peak > 1.0:
        out = out / peak
    return _with_samples(clip, out, f"reverb={wet:g}")


def apply_pitch_shift(clip: AudioClip, semitones: float) -> AudioClip:
    """Resample by ``2**(semitones/12)`` and keep the original length (zero tail)."""
    ratio = 2.0 ** (semitones / 12.0)
    n = clip.samples.size
    positions = np.arange(n) * ratio
    shifted = np.interp(positions, np.arange(n), clip.samples, right=0.0)
    return _with_samples(clip, shifted, f"pitch={semitones:g}")


@lru_cache(maxsize=16)
def impulse_response(impulse_id: str, sample_rate: int = 16000) -> np.ndarray:
    """Seeded exponentially decaying noise; decay time depends on the id."""
    decay_s = {"tunnel": 0.35, "hall": 0.25, "room": 0.08}.get(impulse_id, 0.2)
    n = max(1, int(round(decay_s * sample_rate)))
    rng = Xoshiro256ss(fnv1a64(f"impulse/{impulse_id}"))
    noise = np.array([2.0 * rng.uniform() - 1.0 for _ in range(n)])
    env = np.exp(-6.9 * np.arange(n) / n)  # -60 dB at the end
    ir = noise * env
    ir[0] = 1.0
    ir.flags.writeable = False
    return ir


def apply_transform(clip: AudioClip, spec: AudioTransformSpec) -> AudioClip:
    if spec.kind == "gain":
        return apply_gain(clip, spec.alpha)
    if spec.kind == "reverb":
        return apply_reverb(clip, impulse_response(spec.impulse_id, clip.sample_rate), spec.wet)
    return apply_pitch_shift(clip, spec.semitones)


def mix(a_i: AudioClip, a_j: AudioClip) -> AudioClip:
    """Half-amplitude sum of two clips; the shorter one is zero-padded."""
    if a_i.sample_rate != a_j.sample_rate:
        raise InputError(f"cannot mix clips at {a_i.sample_rate} Hz and {a_j.sample_rate} Hz")
    n = max(a_i.samples.size, a_j.samples.size)
    total = np.zeros(n)
    total[: a_i.samples.size] += a_i.samples
    total[: a_j.samples.size] += a_j.samples
    return AudioClip(np.clip(0.5 * total, -1.0, 1.0), a_i.sample_rate, a_i.label,
                     f"{a_i.source_id}+{a_j.source_id}", (a_i.label, a_j.label))


@dataclass(frozen=True)
class AugmentationConfig:
    transforms: tuple[str, ...] = TRANSFORM_KINDS
    gain_range: tuple[float, float] = (0.1, 0.5)
    wet_range: tuple[float, float] = (0.3, 0.7)
    impulse_ids: tuple[str, ...] = ("tunnel", "hall")
    semitone_choices: tuple[float, ...] = (-4.0, -3.0, 3.0, 4.0)


def sample_spec(kind: str, rng: np.random.Generator, config: AugmentationConfig = AugmentationConfig()) -> AudioTransformSpec:
    if kind == "gain":
        return AudioTransformSpec("gain", alpha=float(rng.uniform(*config.gain_range)))
    if kind == "reverb":
        ir = config.impulse_ids[int(rng.integers(len(config.impulse_ids)))]
        return AudioTransformSpec("reverb", impulse_id=ir, wet=float(rng.uniform(*config.wet_range)))
    if kind == "pitch_shift":
        s = config.semitone_choices[int(rng.integers(len(config.semitone_choices)))]
        return AudioTransformSpec("pitch_shift", semitones=float(s))
    raise ParameterError(f"unknown transform kind {kind!r}")


# ---------------------------------------------------------------------------
# captions

_ARTICLES = {"a", "an", "the"}
_AUX = {"is", "are", "was", "were"}


@dataclass(frozen=True)
class CaptionParts:
    caption: str
    article: str
    subject: str
    rest: str
    participle: str | None

    @property
    def a_subject(self) -> str:
        return f"{self.article} {self.subject}".strip()

    def fields(self, prefix: str = "") -> dict[str, str]:
        out = {"caption": self.caption, "article": self.article, "subject": self.subject,
               "rest": self.rest, "a_subject": self.a_subject}
        if self.participle:
            out["participle"] = self.participle
        return {prefix + k: v for k, v in out.items()}


def parse_caption(caption: str) -> CaptionParts:
    """Split ``"a train is passing by"`` into article, subject and remainder.

    The subject runs from after the leading article to the first auxiliary
    verb or ``-ing`` word.
    """
    words = caption.strip().split()
    if not words:
        raise InputError("empty caption")
    article = words[0] if words[0].lower() in _ARTICLES else ""
    body = words[1:] if article else words
    cut = len(body)
    for i, w in enumerate(body):
        bare = w.lower().strip(",.;")
        if i > 0 and (bare in _AUX or (bare.endswith("ing") and len(bare) > 4)):
            cut = i
            break
    subject = " ".join(body[:cut])
    rest_words = body[cut:]
    participle = next((w.strip(",.;") for w in rest_words if w.lower().strip(",.;").endswith("ing")), None)
    return CaptionParts(caption.strip(), article, subject, " ".join(rest_words), participle)


def _fix_articles(text: str) -> str:
    text = re.sub(r"\s+", " ", text).strip()
    text = re.sub(r"\b([Aa]) (?=[aeiouAEIOU])", r"\1n ", text)
    return re.sub(r"\b([Aa])n (?=[^aeiouAEIOU\W])", r"\1 ", text)


class _Missing(dict):
    def __missing__(self, key):
        raise KeyError(key)


def render(template: str, fields: dict[str, str]) -> str:
    return _fix_articles(template.format_map(_Missing(fields)))


@dataclass(frozen=True)
class CaptionRewriteRule:
    """Rewrite templates for one transform kind over ``[low, high)`` of its parameter."""

    kind: str
    low: float
    high: float
    templates: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigurationError(f"rewrite rule for unknown transform kind {self.kind!r}")
        if not self.templates:
            raise ConfigurationError(f"rewrite rule for {self.kind} has no templates")
        for t in self.templates:
            if "{subject}" not in t and "{a_subject}" not in t and "{caption}" not in t:
                raise ConfigurationError(f"template {t!r} drops the caption subject")

    def matches(self, spec: AudioTransformSpec) -> bool:
        return spec.kind == self.kind and self.low <= spec.trigger_value < self.high


DEFAULT_RULES = (
    CaptionRewriteRule("gain", 0.0, 0.2, ("a distant {subject} {rest}",)),
    CaptionRewriteRule("gain", 0.2, 0.5, ("a faint {subject} {rest}", "a quiet {subject} {rest}")),
    CaptionRewriteRule("gain", 0.5, math.inf, ("{caption}",)),
    CaptionRewriteRule("reverb", 0.0, math.inf, ("{a_subject} echoing in {space}",)),
    CaptionRewriteRule("pitch_shift", -math.inf, 0.0, ("a low-pitched {subject} {rest}",
                                                        "a deep {subject} {rest}")),
    CaptionRewriteRule("pitch_shift", 0.0, math.inf, ("a high-pitched {subject} {rest}",
                                                       "a shrill {subject} {rest}")),
)

DEFAULT_COMPOSE_TEMPLATES = (
    "a distant {u_subject} and a {v_participle} {v_subject}",
    "{u_a_subject} and {v_a_subject} in the same scene",
)


class CaptionService:
    """Client for an external caption rewriting service.

    POSTs ``{"mode", "base_captions", "description"}`` as JSON and expects
    ``{"caption": "..."}`` back.
    """

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries

    def request(self, mode: str, base_captions: Sequence[str], description: str = "") -> str:
        body = json.dumps({"mode": mode, "base_captions": list(base_captions),
                           "description": description}).encode("utf-8")
        last: Exception | None = None
        for _ in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=body, method="POST",
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    caption = json.loads(resp.read().decode("utf-8"))["caption"]
                if not isinstance(caption, str) or not caption.strip():
                    raise ValueError("service returned an empty caption")
                return caption.strip()
            except (urllib.error.URLError, OSError, ValueError, KeyError, TypeError) as exc:
                last = exc
        raise ConnectionError(f"caption service at {self.url} failed: {last}")


@dataclass
class CaptionRules:
    """Registered rewrite rules, compose templates and an optional service."""

    rules: tuple[CaptionRewriteRule, ...] = DEFAULT_RULES
    compose_templates: tuple[str, ...] = DEFAULT_COMPOSE_TEMPLATES
    service: CaptionService | None = None
    kinds: tuple[str, ...] = field(default=TRANSFORM_KINDS)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for kind in self.kinds:
            if not any(r.kind == kind for r in self.rules) and self.service is None:
                raise ConfigurationError(f"transform {kind!r} has no caption rewrite rule")
        if not self.compose_templates and self.service is None:
            raise ConfigurationError("no compose templates registered")

    def rule_for(self, spec: AudioTransformSpec) -> CaptionRewriteRule | None:
        return next((r for r in self.rules if r.matches(spec)), None)


def _choose(templates: Sequence[str], rng_seed: int, stream: str) -> list[str]:
    """Templates in seeded preference order."""
    rng = Xoshiro256ss(fnv1a64(stream) ^ (int(rng_seed) & ((1 << 64) - 1)))
    start = int(rng.uniform() * len(templates))
    return list(templates[start:]) + list(templates[:start])


def transform_caption(t_y: str, spec: AudioTransformSpec, rng_seed: int = 0,
                      rules: CaptionRules | None = None) -> str:
    """Rewrite a class caption to describe ``spec`` applied to its audio."""
    rules = rules or CaptionRules()
    if rules.service is not None:
        try:
            return rules.service.request("transform", [t_y], spec.description)
        except ConnectionError as exc:
            logger.warning("caption service unavailable, using templates: %s", exc)
    rule = rules.rule_for(spec)
    if rule is None:
        raise ConfigurationError(f"no rewrite rule covers {spec.kind} at {spec.trigger_value:g}")
    fields = {**parse_caption(t_y).fields(), **spec_fields(spec)}
    for template in _choose(rule.templates, rng_seed, "caption/transform"):
        try:
            return render(template, fields)
        except KeyError:
            continue
    raise ConfigurationError(f"no template for {spec.kind} applies to caption {t_y!r}")


def pair_caption_seed(u: int, v: int, seed: int = 0) -> int:
    """Compose seed that depends only on the unordered class pair."""
    a, b = sorted((int(u), int(v)))
    return fnv1a64(f"mix/{a}/{b}") ^ (int(seed) & ((1 << 64) - 1))


def pair_caption(u: int, v: int, captions, seed: int = 0, rules: CaptionRules | None = None) -> str:
    """The composed caption for a class pair, identical for (u, v) and (v, u)."""
    a, b = sorted((int(u), int(v)))
    return compose_captions(captions[a], captions[b], pair_caption_seed(a, b, seed), rules, (a, b))


def compose_captions(t_u: str, t_v: str, rng_seed: int = 0, rules: CaptionRules | None = None,
                     class_ids: tuple[int, int] | None = None) -> str:
    """Describe a scene containing both captioned sources."""
    if class_ids is not None and class_ids[0] == class_ids[1]:
        raise ContractError(f"compose_captions needs two distinct classes, got {class_ids}")
    if t_u.strip() == t_v.strip():
        raise ContractError("compose_captions needs two distinct class captions")
    rules = rules or CaptionRules()
    if rules.service is not None:
        try:
            return rules.service.request("compose", [t_u, t_v])
        except ConnectionError as exc:
            logger.warning("caption service unavailable, using templates: %s", exc)
    fields = {**parse_caption(t_u).fields("u_"), **parse_caption(t_v).fields("v_")}
    for template in _choose(rules.compose_templates, rng_seed, "caption/compose"):
        try:
            return render(template, fields)
        except KeyError:
            continue
    raise ConfigurationError(f"no compose template applies to {t_u!r} + {t_v!r}")
