"""Embedding-space evaluation: caption retrieval and controllability probes.

Clips are scored by cosine similarity between the predicted vision-text
vector and each class caption's frozen vision-text embedding. Top-1
accuracy stands in for an image-classifier content score; it is not
comparable with numbers measured on generated images.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .alignment import AlignmentModel, forward
from .augmentation import (AudioTransformSpec, CaptionRules, apply_gain, mix, pair_caption,
                           transform_caption, volume_label)
from .encoders import AudioClip, FrozenEncoders
from .errors import ContractError, InputError


@dataclass
class RetrievalReport:
    top1_accuracy: float
    recall_at_k: dict[int, float]
    confusion: list[list[int]]  # rows: true class, cols: top-1 prediction
    class_ids: list[int]
    sample_count: int

    def to_dict(self) -> dict:
        return {"top1_accuracy": self.top1_accuracy,
                "recall_at_k": {str(k): v for k, v in sorted(self.recall_at_k.items())},
                "confusion": self.confusion, "class_ids": self.class_ids,
                "sample_count": self.sample_count}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [f"{'metric':<12}{'value':>10}", f"{'samples':<12}{self.sample_count:>10d}",
                 f"{'top1 %':<12}{self.top1_accuracy:>10.2f}"]
        lines += [f"{f'R@{k} %':<12}{v:>10.2f}" for k, v in sorted(self.recall_at_k.items())]
        width = max(6, max(len(str(c)) for c in self.class_ids) + 2)
        lines.append("")
        lines.append("true\\pred".ljust(10) + "".join(str(c).rjust(width) for c in self.class_ids))
        for c, row in zip(self.class_ids, self.confusion):
            lines.append(str(c).ljust(10) + "".join(str(v).rjust(width) for v in row))
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.class_ids])
        for c, row in zip(self.class_ids, self.confusion):
            w.writerow([c, *row])
        return buf.getvalue()


def cosine_matrix(pred: np.ndarray, refs: np.ndarray) -> np.ndarray:
    pred = np.atleast_2d(pred)
    pn = pred / np.linalg.norm(pred, axis=1, keepdims=True)
    rn = refs / np.linalg.norm(refs, axis=1, keepdims=True)
    return pn @ rn.T


def rank_classes(sims: np.ndarray) -> np.ndarray:
    """Column indices by descending similarity; ties keep ascending index order."""
    return np.argsort(-sims, axis=1, kind="stable")


def retrieval_report(pred: np.ndarray, labels: Sequence[int], class_vectors: np.ndarray,
                     class_ids: Sequence[int], k_list: Sequence[int] = (1, 5)) -> RetrievalReport:
    """Score predicted vectors against per-class reference vectors."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    if pred.shape[0] == 0:
        raise InputError("empty evaluation set")
    class_ids = list(class_ids)
    order = np.argsort(class_ids, kind="stable")
    class_ids = [class_ids[i] for i in order]
    class_vectors = np.asarray(class_vectors)[order]
    if len(class_ids) < 2:
        raise InputError("retrieval needs at least two classes")
    col = {c: i for i, c in enumerate(class_ids)}
    truth = np.array([col[int(y)] for y in labels])
    ranks = rank_classes(cosine_matrix(pred, class_vectors))
    position = np.argmax(ranks == truth[:, None], axis=1)
    n = pred.shape[0]
    recall = {int(k): 100.0 * float(np.count_nonzero(position < k)) / n for k in k_list}
    confusion = np.zeros((len(class_ids), len(class_ids)), dtype=int)
    np.add.at(confusion, (truth, ranks[:, 0]), 1)
    return RetrievalReport(100.0 * float(np.count_nonzero(position == 0)) / n, recall,
                           confusion.tolist(), class_ids, n)


def predict_vision(model: AlignmentModel, clip: AudioClip, encoders: FrozenEncoders) -> np.ndarray:
    return forward(model, encoders.audio(clip), 1).z_hat_V.data.copy()


def evaluate_retrieval(model: AlignmentModel, eval_clips: Sequence[AudioClip], captions: Mapping[int, str],
                       k_list: Sequence[int] = (1, 5), encoders: FrozenEncoders | None = None) -> RetrievalReport:
    """Rank every class caption for each clip by cosine in the vision-text space."""
    if not eval_clips:
        raise InputError("empty evaluation set")
    encoders = encoders or FrozenEncoders()
    ids = sorted(captions)
    refs = np.stack([encoders.vision(captions[c]) for c in ids])
    pred = np.stack([predict_vision(model, clip, encoders) for clip in eval_clips])
    return retrieval_report(pred, [clip.label for clip in eval_clips], refs, ids, k_list)


# ---------------------------------------------------------------------------
# controllability probes


def _looks_untrained(model: AlignmentModel) -> bool:
    fresh = AlignmentModel(model.config).state_dict()
    return all(np.array_equal(fresh[k], v) for k, v in model.state_dict().items())


def volume_variants(caption: str, rules: CaptionRules | None = None, seed: int = 0) -> dict[str, str]:
    """``base`` caption and its low-volume (``distant``) rewrite."""
    low = transform_caption(caption, AudioTransformSpec("gain", alpha=0.15), seed, rules)
    return {"base": caption, "distant": low}


@dataclass
class VolumeProbeRow:
    alpha: float
    volume: str
    scores: dict[str, float]
    winner: str
    margin: float  # best score minus runner-up


def volume_probe(model: AlignmentModel, base_clip: AudioClip, alpha_list: Sequence[float],
                 caption_variants: Mapping[str, str], encoders: FrozenEncoders | None = None) -> list[VolumeProbeRow]:
    """Which caption variant each attenuated copy of ``base_clip`` lands nearest to."""
    encoders = encoders or FrozenEncoders()
    if _looks_untrained(model):
        warnings.warn("volume_probe on an untrained model", RuntimeWarning, stacklevel=2)
    names = list(caption_variants)
    refs = np.stack([encoders.vision(caption_variants[n]) for n in names])
    rows = []
    for alpha in alpha_list:
        sims = cosine_matrix(predict_vision(model, apply_gain(base_clip, alpha), encoders), refs)[0]
        order = np.argsort(-sims, kind="stable")
        margin = float(sims[order[0]] - sims[order[1]]) if len(names) > 1 else float("inf")
        rows.append(VolumeProbeRow(float(alpha), volume_label(alpha), dict(zip(names, sims.tolist())),
                                   names[order[0]], margin))
    return rows


def composed_caption(u: int, v: int, captions: Mapping[int, str], seed: int = 0,
                     rules: CaptionRules | None = None) -> str:
    """Order-independent composed caption for a class pair."""
    return pair_caption(u, v, captions, seed, rules)


@dataclass
class MixCell:
    u: int
    v: int
    composed: float
    single: float  # best single-class caption score
    passed: bool


@dataclass
class MixProbeReport:
    cells: list[MixCell] = field(default_factory=list)
    margin: float = 0.0

    @property
    def pass_rate(self) -> float:
        return 100.0 * sum(c.passed for c in self.cells) / len(self.cells) if self.cells else 0.0

    def grid(self) -> dict[tuple[int, int], float]:
        """Pass rate per ordered class pair."""
        out: dict[tuple[int, int], list[bool]] = {}
        for c in self.cells:
            out.setdefault((c.u, c.v), []).append(c.passed)
        return {k: 100.0 * sum(v) / len(v) for k, v in sorted(out.items())}

    def to_dict(self) -> dict:
        return {"pass_rate": self.pass_rate, "margin": self.margin,
                "grid": {f"{u},{v}": r for (u, v), r in self.grid().items()},
                "cells": [vars(c) for c in self.cells]}


def mix_scores(model: AlignmentModel, clip: AudioClip, composed: str, singles: Sequence[str],
               encoders: FrozenEncoders) -> tuple[float, float]:
    """(cosine to the composed caption, best cosine to any single caption)."""
    refs = np.stack([encoders.vision(composed)] + [encoders.vision(s) for s in singles])
    sims = cosine_matrix(predict_vision(model, clip, encoders), refs)[0]
    return float(sims[0]), float(sims[1:].max())


def mix_probe(model: AlignmentModel, clip_u: AudioClip, clip_v: AudioClip, captions: Mapping[int, str],
              encoders: FrozenEncoders | None = None, margin: float = 0.0, seed: int = 0,
              rules: CaptionRules | None = None) -> MixCell:
    """Does the mix of two clips land nearer the composed caption than either single caption?"""
    u, v = clip_u.label, clip_v.label
    if u == v:
        raise ContractError(f"mix_probe needs clips of two different classes, got {u} twice")
    encoders = encoders or FrozenEncoders()
    composed = composed_caption(u, v, captions, seed, rules)
    c, s = mix_scores(model, mix(clip_u, clip_v), composed, [captions[u], captions[v]], encoders)
    return MixCell(u, v, c, s, c > s - margin)


def mix_probe_grid(model: AlignmentModel, clips: Sequence[AudioClip], captions: Mapping[int, str],
                   encoders: FrozenEncoders | None = None, margin: float = 0.0, seed: int = 0,
                   rules: CaptionRules | None = None) -> MixProbeReport:
    """Probe every ordered cross-class pair, pairing the i-th clips of each class."""
    encoders = encoders or FrozenEncoders()
    by_class: dict[int, list[AudioClip]] = {}
    for clip in clips:
        by_class.setdefault(clip.label, []).append(clip)
    report = MixProbeReport(margin=margin)
    for u, v in combinations(sorted(by_class), 2):
        for a, b in zip(by_class[u], by_class[v]):
            report.cells.append(mix_probe(model, a, b, captions, encoders, margin, seed, rules))
            report.cells.append(mix_probe(model, b, a, captions, encoders, margin, seed, rules))
    return report


def volume_probe_rate(model: AlignmentModel, clips: Sequence[AudioClip], captions: Mapping[int, str],
                      alphas: Sequence[float] = (0.1, 0.15), encoders: FrozenEncoders | None = None,
                      rules: CaptionRules | None = None) -> tuple[float, float]:
    """Percent of (clip, alpha) probes won by ``distant`` at low alphas, and by ``base`` at alpha=1."""
    encoders = encoders or FrozenEncoders()
    low_hits = base_hits = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for clip in clips:
            rows = volume_probe(model, clip, list(alphas) + [1.0], volume_variants(captions[clip.label], rules),
                                encoders)
            low_hits += sum(r.winner == "distant" for r in rows[:-1])
            base_hits += rows[-1].winner == "base"
    return 100.0 * low_hits / (len(clips) * len(alphas)), 100.0 * base_hits / len(clips)
