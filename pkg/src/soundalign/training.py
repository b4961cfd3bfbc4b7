"""Corpus handling, extended-objective batches, AdamW, and the training loop.

Each epoch draws an item list from the training split: every base pair,
``h`` transformed variants per clip (one per configured transform), and a
budget of cross-class mixes. Item weights reproduce the three-term
extended objective in expectation: base items weigh 1, transformed items
``1/h`` and mixes ``n/budget``. With the extended objective disabled only
base items (weight 1) remain and the loss is the plain per-sample mean.

Text-branch parameters (``adapter_T``, ``pooler_T``) and vision-branch
parameters (``adapter_V``, ``pooler_V``) have separate AdamW optimizers
with their own learning rates.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.signal import lfilter

from . import autodiff as ad
from ._binio import Reader, atomic_write
from .alignment import AlignmentModel, alignment_loss, forward
from .augmentation import (CaptionRules, apply_transform, mix, pair_caption, sample_spec,
                           transform_caption)
from .config import ExperimentConfig
from .encoders import AudioClip, FrozenEncoders, read_raw_f32, write_raw_f32
from .errors import ConfigurationError, FormatError, InputError, NumericError

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# corpus

PHRASE_BANK = (
    "a train is passing by",
    "a helicopter is hovering overhead",
    "a dog is barking loudly",
    "a bell is ringing in a tower",
    "a car engine is idling",
    "a bird is singing in a tree",
    "a siren is wailing in the street",
    "a drum is beating steadily",
    "a cat is meowing softly",
    "a hammer is striking metal",
)


@dataclass
class Corpus:
    clips: list[AudioClip]
    captions: dict[int, str]
    train: list[int]
    val: list[int]

    def __post_init__(self):
        missing = {c.label for c in self.clips} - set(self.captions)
        if missing:
            raise InputError(f"classes without captions: {sorted(missing)}")
        if set(self.train) & set(self.val):
            raise InputError("train and validation splits overlap")

    @property
    def num_classes(self) -> int:
        return len(self.captions)

    @property
    def train_clips(self) -> list[AudioClip]:
        return [self.clips[i] for i in self.train]

    @property
    def val_clips(self) -> list[AudioClip]:
        return [self.clips[i] for i in self.val]


def split_indices(labels: Sequence[int], seed: int, val_fraction: float = 0.1) -> tuple[list[int], list[int]]:
    """Stratified seeded split; each class keeps ``round(val_fraction * count)`` for validation."""
    rng = np.random.default_rng([seed, 0x5B117])
    train, val = [], []
    labels = np.asarray(labels)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(val_fraction * idx.size))
        if idx.size >= 2:
            n_val = min(max(n_val, 1), idx.size - 1)
        val += idx[:n_val].tolist()
        train += idx[n_val:].tolist()
    return sorted(train), sorted(val)


def _class_sound(c: int, k: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Harmonic tone plus band noise under a class-specific amplitude envelope."""
    t = np.arange(n) / sr
    f0 = 150.0 * 20.0 ** (c / max(k - 1, 1)) * rng.uniform(0.97, 1.03)
    n_harm = 1 + c % 4
    tone = sum(np.sin(2 * np.pi * f0 * (h + 1) * t + rng.uniform(0, 2 * np.pi)) / (h + 1)
               for h in range(n_harm) if f0 * (h + 1) < sr / 2)
    tone = tone / np.abs(tone).max()
    noise = rng.standard_normal(n)
    # first-order low-pass with class-specific smoothing sets the noise colour
    a = 0.2 + 0.7 * ((c * 3) % k) / max(k - 1, 1)
    coloured = lfilter([1 - a], [1, -a], noise)
    coloured /= np.abs(coloured).max()
    am_rate = 1.5 + 1.5 * (c % 5)
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    noise_level = rng.uniform(0.1, 0.25)
    x = envelope * ((1 - noise_level) * tone + noise_level * coloured)
    return x / np.abs(x).max()


def _background(n: int, rng: np.random.Generator) -> np.ndarray:
    """Class-independent ambience: low-passed noise with a random colour."""
    a = rng.uniform(0.5, 0.95)
    bg = lfilter([1 - a], [1, -a], rng.standard_normal(n))
    return bg / np.abs(bg).max()


def _gated(event: np.ndarray, fraction: tuple[float, float], sample_rate: int,
           rng: np.random.Generator) -> np.ndarray:
    """Keep ``event`` only inside one random window, with raised-cosine fades."""
    n = event.size
    length = int(rng.uniform(*fraction) * n)
    start = int(rng.integers(0, n - length + 1))
    fade = min(length // 4, int(0.02 * sample_rate))
    gate = np.zeros(n)
    gate[start:start + length] = 1.0
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        gate[start:start + fade] = ramp
        gate[start + length - fade:start + length] = ramp[::-1]
    return gate * event


def generate_synthetic_corpus(k: int, per_class: int, seed: int, duration: float = 1.0,
                              sample_rate: int = 16000, val_fraction: float = 0.1,
                              event_fraction: tuple[float, float] = (0.3, 0.6),
                              background_level: tuple[float, float] = (0.15, 0.35),
                              interference_level: tuple[float, float] = (0.25, 0.45)) -> Corpus:
    """``k`` classes of tone/noise events over shared background ambience.

    Each clip holds its class sound in one random window covering
    ``event_fraction`` of the clip (raised-cosine fades), a quieter event of
    a different random class scaled by ``interference_level``, and
    class-independent background noise. Captions come from a phrase bank.
    Set ``interference_level=(0, 0)`` for clean clips.
    """
    if k < 2:
        raise InputError("a corpus needs at least two classes")
    n = int(round(duration * sample_rate))
    clips = []
    for c in range(k):
        for j in range(per_class):
            rng = np.random.default_rng([seed, c, j])
            x = _gated(_class_sound(c, k, n, sample_rate, rng), event_fraction, sample_rate, rng)
            other = (c + 1 + int(rng.integers(k - 1))) % k
            x = x + rng.uniform(*interference_level) * _gated(
                _class_sound(other, k, n, sample_rate, rng), event_fraction, sample_rate, rng)
            x = x + rng.uniform(*background_level) * _background(n, rng)
            x = x / np.abs(x).max() * rng.uniform(0.5, 0.8)
            # float32-exact so raw f32 files round-trip losslessly
            clips.append(AudioClip(x.astype(np.float32).astype(np.float64), sample_rate, c, f"c{c:02d}_{j:04d}"))
    captions = {c: PHRASE_BANK[c] if c < len(PHRASE_BANK) else f"a generator number {c} is humming"
                for c in range(k)}
    train, val = split_indices([cl.label for cl in clips], seed, val_fraction)
    return Corpus(clips, captions, train, val)


def save_corpus(corpus: Corpus, directory: str | os.PathLike) -> None:
    """Write clips as raw float32 plus ``manifest.json``."""
    directory = os.fspath(directory)
    os.makedirs(os.path.join(directory, "clips"), exist_ok=True)
    entries = []
    split = {i: "train" for i in corpus.train} | {i: "val" for i in corpus.val}
    for i, clip in enumerate(corpus.clips):
        rel = os.path.join("clips", f"{clip.source_id}.f32")
        write_raw_f32(os.path.join(directory, rel), clip)
        entries.append({"source_id": clip.source_id, "path": rel, "label": clip.label,
                        "sample_rate": clip.sample_rate, "split": split.get(i, "unused")})
    manifest = {"version": 1, "classes": [{"id": c, "caption": t} for c, t in sorted(corpus.captions.items())],
                "clips": entries}
    text = json.dumps(manifest, indent=2, sort_keys=True)
    atomic_write(os.path.join(directory, "manifest.json"), lambda f: f.write(text), mode="w")


def load_corpus(directory: str | os.PathLike) -> Corpus:
    directory = os.fspath(directory)
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise InputError(f"no manifest.json in {directory}")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    clips, train, val = [], [], []
    for i, e in enumerate(manifest["clips"]):
        clip_path = os.path.join(directory, e["path"])
        if not os.path.exists(clip_path):
            raise InputError(f"manifest references missing clip {e['path']}")
        if clip_path.endswith(".wav"):
            from .encoders import read_wav
            clip = read_wav(clip_path, e["label"], e["source_id"])
        else:
            clip = read_raw_f32(clip_path, e["sample_rate"], e["label"], e["source_id"])
        clips.append(clip)
        (train if e["split"] == "train" else val if e["split"] == "val" else []).append(i)
    captions = {int(c["id"]): c["caption"] for c in manifest["classes"]}
    return Corpus(clips, captions, train, val)


# ---------------------------------------------------------------------------
# extended batches


@dataclass
class BatchItem:
    clip: AudioClip
    caption: str
    kind: str  # "base" | transform kind | "mix"
    weight: float
    base_index: int | None = None  # corpus index for untransformed clips


def sample_mix_pairs(labels: Sequence[int], count: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """``count`` ordered pairs drawn uniformly from cross-class pairs (by rejection)."""
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ConfigurationError("mixing needs at least two classes in the training split")
    pairs = []
    n = labels.size
    while len(pairs) < count:
        i, j = (int(x) for x in rng.integers(n, size=2))
        if labels[i] != labels[j]:
            pairs.append((i, j))
    return pairs


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def build_extended_batch(corpus: Corpus, config: ExperimentConfig, epoch_seed: int,
                         rules: CaptionRules | None = None) -> list[BatchItem]:
    """All supervision items for one epoch (unshuffled: base, transformed, mixes)."""
    idx = list(corpus.train)
    if not idx:
        raise InputError("training split is empty")
    tc = config.training
    items = [BatchItem(corpus.clips[i], corpus.captions[corpus.clips[i].label], "base", 1.0, i) for i in idx]
    if not tc.ext_loss_enabled:
        return items
    rules = rules or config.caption_rules()
    kinds = tuple(config.augmentation.transforms)
    h = len(kinds)
    rng = np.random.default_rng([tc.seed, epoch_seed, 0xA06])
    for pos, i in enumerate(idx):
        clip = corpus.clips[i]
        t_y = corpus.captions[clip.label]
        for kind in kinds:
            spec = sample_spec(kind, rng, config.augmentation)
            caption = transform_caption(t_y, spec, _derived_seed(tc.seed, epoch_seed, pos, kinds.index(kind)), rules)
            items.append(BatchItem(apply_transform(clip, spec), caption, kind, 1.0 / h))
    budget = len(idx) if tc.mix_pair_budget is None else tc.mix_pair_budget
    if budget > 0:
        labels = [corpus.clips[i].label for i in idx]
        for i, j in sample_mix_pairs(labels, budget, rng):
            a_i, a_j = corpus.clips[idx[i]], corpus.clips[idx[j]]
            # mixing is symmetric, so each class pair gets one fixed caption
            caption = pair_caption(a_i.label, a_j.label, corpus.captions, rules=rules)
            items.append(BatchItem(mix(a_i, a_j), caption, "mix", len(idx) / budget))
    return items


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
               lr: float, weight_decay: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericError(f"non-finite gradient in {name}: {bad} of {g.size} entries")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, params: Mapping[str, ad.Tensor], lr: float, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros({k: t.data for k, t in self.params.items()})

    def step(self) -> None:
        adamw_step({k: t.data for k, t in self.params.items()},
                   {k: t.grad for k, t in self.params.items()},
                   self.state, self.lr, self.weight_decay, self.betas, self.eps)


# ---------------------------------------------------------------------------
# checkpoints
#
# "SSCK" | u32 version | 32-byte config sha256 | u32 json length | JSON metadata
# | u32 blob count | blobs: u16 name length, name, u8 ndim, u32 dims..., f64 LE payload
# | u32 CRC32 of everything before it

CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    opt_text: AdamState
    opt_vision: AdamState
    epoch: int
    best_epoch: int
    best_val_loss: float
    bad_epochs: int
    history: list[dict] = field(default_factory=list)

    @property
    def config_hash(self) -> bytes:
        return self.config.hash()

    def model(self, which: str = "best") -> AlignmentModel:
        model = AlignmentModel(self.config.model)
        model.load_state_dict(self.best_params if which == "best" else self.params)
        return model


def _blobs(ckpt: Checkpoint) -> Iterator[tuple[str, np.ndarray]]:
    for k, a in ckpt.params.items():
        yield f"param/{k}", a
    for k, a in ckpt.best_params.items():
        yield f"best/{k}", a
    for tag, st in (("text", ckpt.opt_text), ("vision", ckpt.opt_vision)):
        for k, a in st.m.items():
            yield f"opt_{tag}/m/{k}", a
        for k, a in st.v.items():
            yield f"opt_{tag}/v/{k}", a


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {"config": ckpt.config.to_dict(), "epoch": ckpt.epoch, "best_epoch": ckpt.best_epoch,
            "best_val_loss": ckpt.best_val_loss, "bad_epochs": ckpt.bad_epochs,
            "opt_text_step": ckpt.opt_text.step, "opt_vision_step": ckpt.opt_vision.step,
            "history": ckpt.history}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = list(_blobs(ckpt))
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), ckpt.config_hash,
              struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(blobs))]
    for name, arr in blobs:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    data = checkpoint_bytes(ckpt)
    atomic_write(path, lambda f: f.write(data))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint: bad magic", 0)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC32 mismatch", len(data) - 4)
    r = Reader(body)
    r.take(4, "magic")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    stored_hash = r.take(32, "config hash")
    meta = json.loads(r.take(r.u32("metadata length"), "metadata").decode("utf-8"))
    config = ExperimentConfig.from_dict(meta["config"])
    if config.hash() != stored_hash:
        raise FormatError("config hash does not match stored config", 8)
    blobs: dict[str, np.ndarray] = {}
    for _ in range(r.u32("blob count")):
        name = r.take(r.u16("name length"), "blob name").decode("utf-8")
        ndim = r.u8("ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"shape of {name}"))
        count = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(r.take(8 * count, f"payload of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    if not r.at_end():
        raise FormatError("trailing bytes before CRC footer", r.pos)

    def group(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in blobs.items() if k.startswith(prefix)}

    return Checkpoint(
        config=config, params=group("param/"), best_params=group("best/"),
        opt_text=AdamState(group("opt_text/m/"), group("opt_text/v/"), meta["opt_text_step"]),
        opt_vision=AdamState(group("opt_vision/m/"), group("opt_vision/v/"), meta["opt_vision_step"]),
        epoch=meta["epoch"], best_epoch=meta["best_epoch"], best_val_loss=meta["best_val_loss"],
        bad_epochs=meta["bad_epochs"], history=meta["history"])


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(NumericError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


class TokenCache:
    """Encoded audio for untransformed clips, keyed by corpus index."""

    def __init__(self, encoders: FrozenEncoders):
        self.encoders = encoders
        self._cache: dict[int, np.ndarray] = {}

    def get(self, item: BatchItem) -> np.ndarray:
        if item.base_index is None:
            return self.encoders.audio(item.clip)
        hit = self._cache.get(item.base_index)
        if hit is None:
            hit = self._cache[item.base_index] = self.encoders.audio(item.clip)
        return hit


def sample_loss(model: AlignmentModel, tokens: np.ndarray, caption: str, encoders: FrozenEncoders):
    target = encoders.caption_record(-1, caption)
    return alignment_loss(forward(model, tokens, target.length), target)


def branch_losses(model: AlignmentModel, corpus: Corpus, indices: Sequence[int],
                  encoders: FrozenEncoders, cache: TokenCache) -> tuple[float, float, float]:
    """Mean (total, text, vision) base loss over ``indices``."""
    tot = txt = vis = 0.0
    for i in indices:
        clip = corpus.clips[i]
        target = encoders.caption_record(clip.label, corpus.captions[clip.label])
        pair = forward(model, cache.get(BatchItem(clip, "", "base", 1.0, i)), target.length)
        t = float(np.mean((pair.z_hat_T.data - target.text_embedding) ** 2))
        v = float(np.mean((pair.z_hat_V.data - target.vision_embedding) ** 2))
        tot += t + v
        txt += t
        vis += v
    n = max(len(indices), 1)
    return tot / n, txt / n, vis / n


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x0D7]).permutation(n)


def train(corpus: Corpus, config: ExperimentConfig, *, encoders: FrozenEncoders | None = None,
          resume: Checkpoint | None = None, out_dir: str | os.PathLike | None = None,
          stop_after_epoch: int | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train until early stopping; returns the final checkpoint (best params inside).

    With ``out_dir`` set, ``last.ssck`` (current and best parameters) is
    rewritten after each epoch and metrics are appended to ``metrics.jsonl``.
    ``stop_after_epoch`` halts early (used to test resumption).
    """
    tc = config.training
    encoders = encoders or FrozenEncoders(config.encoders)
    if not corpus.train:
        raise InputError("training split is empty")
    if tc.ext_loss_enabled and len({corpus.clips[i].label for i in corpus.train}) < 2 \
            and (tc.mix_pair_budget is None or tc.mix_pair_budget > 0):
        raise ConfigurationError("mixing requires at least two classes in the training split")
    rules = config.caption_rules() if tc.ext_loss_enabled else None

    model = AlignmentModel(config.model)
    betas = (tc.beta1, tc.beta2)
    opt_text = AdamW(model.branch_parameters("text"), tc.lr_text, tc.weight_decay, betas, tc.eps)
    opt_vision = AdamW(model.branch_parameters("vision"), tc.lr_vision, tc.weight_decay, betas, tc.eps)
    cache = TokenCache(encoders)
    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None

    def snapshot() -> Checkpoint:
        return Checkpoint(config, model.state_dict(), {k: v.copy() for k, v in best_params.items()},
                          _copy_state(opt_text.state), _copy_state(opt_vision.state),
                          epoch, best_epoch, best_val, bad_epochs, [dict(h) for h in history])

    def log(record: dict, wall_ms: float) -> None:
        if metrics_path:
            os.makedirs(out_dir, exist_ok=True)
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps({**record, "lr_text": tc.lr_text, "lr_vision": tc.lr_vision,
                                    "wall_ms": round(wall_ms, 3)}) + "\n")
        if on_epoch:
            on_epoch(record)

    if resume is None:
        t0 = time.perf_counter()
        val, val_t, val_v = branch_losses(model, corpus, corpus.val, encoders, cache)
        train_loss = branch_losses(model, corpus, corpus.train, encoders, cache)[0]
        epoch, best_epoch, best_val, bad_epochs = 0, 0, val, 0
        best_params = model.state_dict()
        history = [{"epoch": 0, "train_loss": train_loss, "val_loss": val, "val_text": val_t, "val_vision": val_v}]
        if metrics_path and os.path.exists(metrics_path):
            os.unlink(metrics_path)
        log(history[0], 1000 * (time.perf_counter() - t0))
    else:
        model.load_state_dict(resume.params)
        opt_text.state = _copy_state(resume.opt_text)
        opt_vision.state = _copy_state(resume.opt_vision)
        epoch, best_epoch, best_val, bad_epochs = resume.epoch, resume.best_epoch, resume.best_val_loss, resume.bad_epochs
        best_params = {k: v.copy() for k, v in resume.best_params.items()}
        history = [dict(h) for h in resume.history]

    params = model.parameters()
    while epoch < tc.max_epochs and bad_epochs < tc.patience:
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
        t0 = time.perf_counter()
        last_good = snapshot()
        epoch += 1
        items = build_extended_batch(corpus, config, epoch, rules)
        order = epoch_order(tc.seed, epoch, len(items))
        weighted_sum = weight_total = 0.0
        try:
            for start in range(0, len(order), tc.batch_size):
                batch = order[start:start + tc.batch_size]
                model.zero_grad()
                inv = 1.0 / len(batch)
                for j in batch:
                    item = items[j]
                    loss = sample_loss(model, cache.get(item), item.caption, encoders)
                    ad.scale(loss, item.weight * inv).backward()
                    weighted_sum += item.weight * loss.item()
                    weight_total += item.weight
                if not np.isfinite(weighted_sum) or not all(np.all(np.isfinite(p.grad)) for p in params.values()):
                    raise NumericError("non-finite loss or gradient")
                opt_text.step()
                opt_vision.step()
            val, val_t, val_v = branch_losses(model, corpus, corpus.val, encoders, cache)
        except NumericError as exc:
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", last_good) from exc
        if not np.isfinite(val):
            raise TrainingDiverged(f"validation loss is {val} after epoch {epoch}", last_good)
        if val < best_val:
            best_val, best_epoch, bad_epochs = val, epoch, 0
            best_params = model.state_dict()
        else:
            bad_epochs += 1
        record = {"epoch": epoch, "train_loss": weighted_sum / weight_total, "val_loss": val,
                  "val_text": val_t, "val_vision": val_v}
        history.append(record)
        log(record, 1000 * (time.perf_counter() - t0))
        if out_dir:
            save_checkpoint(snapshot(), os.path.join(out_dir, "last.ssck"))
        logger.info("epoch %d train %.5f val %.5f (best %.5f @ %d)", epoch, record["train_loss"], val,
                    best_val, best_epoch)
    return snapshot()


def _copy_state(st: AdamState) -> AdamState:
    return AdamState({k: v.copy() for k, v in st.m.items()}, {k: v.copy() for k, v in st.v.items()}, st.step)
