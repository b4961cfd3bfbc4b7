"""Frozen stand-in encoders and the embedding archive format.

Three deterministic encoders replace the pretrained backbones:

* audio: log-mel spectrogram, grouped into tokens of ``frames_per_token``
  consecutive frames, then a fixed random projection to ``d_audio``;
* text: per-word hashed embeddings plus sinusoidal positions, one row per
  word (``l x d_text``);
* vision-text: mean of hashed word embeddings, rotated by a fixed
  orthogonal matrix and L2-normalised (``d_vision``).

None of them own trainable parameters, so they stay frozen by
construction. All weights come from :mod:`soundalign.rng` streams and are
pure functions of ``(input, seed)``.

Real precomputed features can replace the stubs through
:func:`read_embedding_archive` / :func:`write_embedding_archive`.
"""

from __future__ import annotations

import math
import os
import re
import struct
import wave
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import resample_poly

from ._binio import Reader, atomic_write
from .errors import DimensionError, FormatError, InputError
from .rng import Xoshiro256ss


@dataclass(frozen=True)
class EncoderConfig:
    d_audio: int = 64
    d_text: int = 32
    d_vision: int = 32
    audio_seed: int = 1
    text_seed: int = 2
    vision_seed: int = 3
    sample_rate: int = 16000
    window: int = 400
    hop: int = 160
    n_mels: int = 64
    frames_per_token: int = 4
    log_floor: float = 1e-6


@dataclass
class AudioClip:
    """Mono waveform with its class label.

    ``labels`` carries both class ids for mixed clips; for plain clips it is
    ``(label,)``.
    """

    samples: np.ndarray
    sample_rate: int
    label: int
    source_id: str = ""
    labels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InputError(f"clip {self.source_id!r}: samples must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise InputError(f"clip {self.source_id!r}: sample_rate must be positive")
        if not self.labels:
            self.labels = (int(self.label),)

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class CaptionRecord:
    class_id: int
    text: str
    text_embedding: np.ndarray  # [l x d_text]
    vision_embedding: np.ndarray  # [d_vision], unit norm

    @property
    def length(self) -> int:
        return self.text_embedding.shape[0]


# ---------------------------------------------------------------------------
# audio front end


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters, unnormalised, shape [n_mels x (n_fft//2 + 1)]."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    bins = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def frame_count(n_samples: int, window: int = 400, hop: int = 160) -> int:
    if n_samples < window:
        return 0
    return 1 + (n_samples - window) // hop


def token_count(n_samples: int, config: EncoderConfig = EncoderConfig()) -> int:
    return frame_count(n_samples, config.window, config.hop) // config.frames_per_token


def power_mel_spectrogram(samples: np.ndarray, config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Mel power spectrogram, shape [frames x n_mels]; no centring/padding."""
    samples = np.asarray(samples, dtype=np.float64)
    n = frame_count(samples.size, config.window, config.hop)
    if n == 0:
        raise InputError(f"clip of {samples.size} samples is shorter than one {config.window}-sample window")
    idx = np.arange(config.window)[None, :] + config.hop * np.arange(n)[:, None]
    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(config.window) / config.window)
    spectrum = np.abs(np.fft.rfft(samples[idx] * window, n=config.window, axis=1)) ** 2
    fb = mel_filterbank(config.sample_rate, config.window, config.n_mels)
    return spectrum @ fb.T


def log_mel(samples: np.ndarray, config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    return np.log10(power_mel_spectrogram(samples, config) + config.log_floor)


@lru_cache(maxsize=8)
def _audio_projection(seed: int, in_dim: int, out_dim: int) -> np.ndarray:
    rng = Xoshiro256ss.for_stream(seed, "audio/projection")
    proj = rng.normals((in_dim, out_dim)) / math.sqrt(in_dim)
    proj.flags.writeable = False
    return proj


def resample(samples: np.ndarray, from_rate: int, to_rate: int) -> np.ndarray:
    if from_rate == to_rate:
        return np.asarray(samples, dtype=np.float64)
    g = math.gcd(int(from_rate), int(to_rate))
    return resample_poly(samples, to_rate // g, from_rate // g)


# log10 power sits roughly in [-6, 4]; centre and shrink before projecting
_FEATURE_SHIFT = 1.0
_FEATURE_SCALE = 0.25


def encode_audio(clip: AudioClip, encoder_seed: int | None = None,
                 config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Audio tokens ``[m x d_audio]`` with ``m = floor(frames / frames_per_token)``."""
    seed = config.audio_seed if encoder_seed is None else encoder_seed
    samples = resample(clip.samples, clip.sample_rate, config.sample_rate)
    feats = log_mel(samples, config)
    m = feats.shape[0] // config.frames_per_token
    if m == 0:
        raise InputError(
            f"clip {clip.source_id!r} yields {feats.shape[0]} frames, fewer than one "
            f"{config.frames_per_token}-frame token")
    grouped = feats[: m * config.frames_per_token].reshape(m, config.frames_per_token * config.n_mels)
    grouped = (grouped + _FEATURE_SHIFT) * _FEATURE_SCALE
    return grouped @ _audio_projection(seed, grouped.shape[1], config.d_audio)


# ---------------------------------------------------------------------------
# text stubs

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(caption: str) -> list[str]:
    """Lower-cased words; whitespace and punctuation are separators."""
    return _WORD.findall(caption.lower())


@lru_cache(maxsize=65536)
def _word_vector(seed: int, domain: str, word: str, dim: int) -> np.ndarray:
    rng = Xoshiro256ss.for_stream(seed, f"{domain}/word/{word}")
    vec = rng.normals(dim)
    vec.flags.writeable = False
    return vec


def word_embedding(word: str, seed: int, dim: int, domain: str = "text") -> np.ndarray:
    return _word_vector(seed, domain, word, dim)


@lru_cache(maxsize=64)
def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.flags.writeable = False
    return pe


def _words_or_raise(caption: str) -> list[str]:
    words = tokenize(caption) if isinstance(caption, str) else []
    if not words:
        raise InputError(f"caption {caption!r} has no tokens")
    return words


def encode_text(caption: str, encoder_seed: int | None = None,
                config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Token embeddings ``[l x d_text]`` for the words of ``caption``."""
    seed = config.text_seed if encoder_seed is None else encoder_seed
    words = _words_or_raise(caption)
    emb = np.stack([word_embedding(w, seed, config.d_text, "text") for w in words])
    return emb + positional_encoding(len(words), config.d_text)


def _fsum_dot(a, b) -> float:
    return math.fsum(x * y for x, y in zip(a, b))


@lru_cache(maxsize=8)
def orthogonal_matrix(seed: int, dim: int, label: str = "vision/rotation") -> np.ndarray:
    """Modified Gram-Schmidt on seeded normals; exact-summation dot products."""
    rng = Xoshiro256ss.for_stream(seed, label)
    raw = [[rng.normal() for _ in range(dim)] for _ in range(dim)]
    basis: list[list[float]] = []
    for v in raw:
        v = list(v)
        for u in basis:
            c = _fsum_dot(v, u)
            v = [x - c * y for x, y in zip(v, u)]
        norm = math.sqrt(_fsum_dot(v, v))
        basis.append([x / norm for x in v])
    out = np.array(basis, dtype=np.float64)
    out.flags.writeable = False
    return out


def encode_vision_text(caption: str, encoder_seed: int | None = None,
                       config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Unit-norm ``[d_vision]`` vector; invariant to word order."""
    seed = config.vision_seed if encoder_seed is None else encoder_seed
    words = sorted(_words_or_raise(caption))
    mean = np.sum([word_embedding(w, seed, config.d_vision, "vision") for w in words], axis=0) / len(words)
    out = orthogonal_matrix(seed, config.d_vision) @ mean
    return out / np.linalg.norm(out)


class FrozenEncoders:
    """Bundles the three stubs under one config and caches caption targets."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        self.config = config
        self._captions: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def audio(self, clip: AudioClip) -> np.ndarray:
        return encode_audio(clip, config=self.config)

    def text(self, caption: str) -> np.ndarray:
        return self._caption_pair(caption)[0]

    def vision(self, caption: str) -> np.ndarray:
        return self._caption_pair(caption)[1]

    def caption_record(self, class_id: int, caption: str) -> CaptionRecord:
        zt, zv = self._caption_pair(caption)
        return CaptionRecord(class_id, caption, zt, zv)

    def _caption_pair(self, caption: str):
        hit = self._captions.get(caption)
        if hit is None:
            zt = encode_text(caption, config=self.config)
            zv = encode_vision_text(caption, config=self.config)
            zt.flags.writeable = False
            zv.flags.writeable = False
            hit = self._captions[caption] = (zt, zv)
        return hit


# ---------------------------------------------------------------------------
# audio file IO


def read_wav(path: str | os.PathLike, label: int = 0, source_id: str | None = None) -> AudioClip:
    """16-bit PCM WAV; multi-channel input is averaged to mono."""
    with wave.open(os.fspath(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise InputError(f"{path}: only 16-bit PCM is supported (got {8 * w.getsampwidth()}-bit)")
        channels, rate = w.getnchannels(), w.getframerate()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    samples = pcm.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples, rate, label, source_id or os.path.basename(os.fspath(path)))


def write_wav(path: str | os.PathLike, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")

    def _write(f):
        with wave.open(f, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(clip.sample_rate))
            w.writeframes(pcm.tobytes())

    atomic_write(path, _write)


def read_raw_f32(path: str | os.PathLike, sample_rate: int, label: int = 0,
                 source_id: str | None = None) -> AudioClip:
    """Headerless little-endian float32 samples."""
    data = np.fromfile(os.fspath(path), dtype="<f4")
    return AudioClip(data.astype(np.float64), sample_rate, label, source_id or os.path.basename(os.fspath(path)))


def write_raw_f32(path: str | os.PathLike, clip: AudioClip) -> None:
    payload = clip.samples.astype("<f4").tobytes()
    atomic_write(path, lambda f: f.write(payload))


# ---------------------------------------------------------------------------
# embedding archive
#
# "SSEA" | u32 version | u32 d_audio | u32 d_text | u32 d_vision | u64 count
# then per record: u16 key length | key (UTF-8) | u32 token count | f32 LE payload
# The key prefix selects the row width: "audio:" -> d_audio, "text:" -> d_text,
# "vision:" -> d_vision.

ARCHIVE_MAGIC = b"SSEA"
ARCHIVE_VERSION = 1
_KINDS = ("audio", "text", "vision")


@dataclass
class EmbeddingArchive:
    d_audio: int
    d_text: int
    d_vision: int
    records: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.d_audio, self.d_text, self.d_vision)

    def width_for(self, key: str) -> int:
        kind = key.split(":", 1)[0]
        if kind not in _KINDS or ":" not in key:
            raise FormatError(f"record key {key!r} must start with one of audio:/text:/vision:")
        return dict(zip(_KINDS, self.dims))[kind]

    def add(self, key: str, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim == 1:
            rows = rows[None, :]
        width = self.width_for(key)
        if rows.ndim != 2 or rows.shape[1] != width:
            raise DimensionError(f"record {key!r} has width {rows.shape[-1]}, archive declares {width}")
        self.records[key] = rows

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingArchive) or self.dims != other.dims:
            return False
        if list(self.records) != list(other.records):
            return False
        return all(np.array_equal(self.records[k], other.records[k]) for k in self.records)

    def check_dims(self, config: EncoderConfig) -> None:
        want = (config.d_audio, config.d_text, config.d_vision)
        for name, have, need in zip(("d_audio", "d_text", "d_vision"), self.dims, want):
            if have != need:
                raise DimensionError(f"archive {name}={have} but config expects {name}={need}")


def write_embedding_archive(archive: EmbeddingArchive, path: str | os.PathLike) -> None:
    chunks = [ARCHIVE_MAGIC, struct.pack("<IIIIQ", ARCHIVE_VERSION, *archive.dims, len(archive.records))]
    for key, rows in archive.records.items():
        kb = key.encode("utf-8")
        chunks.append(struct.pack("<H", len(kb)))
        chunks.append(kb)
        chunks.append(struct.pack("<I", rows.shape[0]))
        chunks.append(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    atomic_write(path, lambda f: f.write(payload))


def read_embedding_archive(path: str | os.PathLike, config: EncoderConfig | None = None) -> EmbeddingArchive:
    """Parse an archive; with ``config`` given, dimensions must match it."""
    with open(path, "rb") as f:
        r = Reader(f.read())
    if r.take(4, "magic") != ARCHIVE_MAGIC:
        raise FormatError("not an embedding archive: bad magic", 0)
    version = r.u32("version")
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version}", 4)
    dims = (r.u32("d_audio"), r.u32("d_text"), r.u32("d_vision"))
    count = r.u64("record count")
    archive = EmbeddingArchive(*dims)
    if config is not None:
        archive.check_dims(config)
    for _ in range(count):
        start = r.pos
        key = r.take(r.u16("key length"), "key").decode("utf-8")
        try:
            width = archive.width_for(key)
        except FormatError as exc:
            raise FormatError(str(exc), start) from None
        n = r.u32("token count")
        rows = np.frombuffer(r.take(4 * n * width, f"payload of {key!r}"), dtype="<f4").reshape(n, width)
        archive.records[key] = rows.astype(np.float32)
    if not r.at_end():
        raise FormatError("trailing bytes after last record", r.pos)
    return archive
