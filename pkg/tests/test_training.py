import json
import warnings

import numpy as np
import pytest
from scipy.stats import chisquare

from soundalign.augmentation import AugmentationConfig
from soundalign.config import ExperimentConfig
from soundalign.encoders import AudioClip, power_mel_spectrogram
from soundalign.errors import ConfigurationError, FormatError, InputError, NumericError
from soundalign.training import (AdamState, Corpus, TrainingDiverged, adamw_step, build_extended_batch,
                                 checkpoint_bytes, generate_synthetic_corpus, load_checkpoint, load_corpus,
                                 sample_mix_pairs, save_checkpoint, save_corpus, split_indices, train)

SR = 16000


def quick_config(**fields):
    base = {"training__max_epochs": 4, "training__patience": 100}
    base.update(fields)
    return ExperimentConfig().replace(**base)


def two_clip_corpus():
    rng = np.random.default_rng(0)
    clips = [AudioClip(rng.uniform(-0.5, 0.5, 4000), SR, c, f"c{c}") for c in (0, 1)]
    return Corpus(clips, {0: "a train passing by", 1: "a dog barking loudly"}, [0, 1], [])


def test_extended_batch_counting():
    cfg = ExperimentConfig().replace(training__ext_loss_enabled=True, training__mix_pair_budget=1,
                                     augmentation=AugmentationConfig(transforms=("gain", "reverb")))
    items = build_extended_batch(two_clip_corpus(), cfg, epoch_seed=1)
    assert [it.kind for it in items] == ["base", "base", "gain", "reverb", "gain", "reverb", "mix"]
    assert [it.weight for it in items] == [1, 1, 0.5, 0.5, 0.5, 0.5, 2.0]
    assert len({it.caption for it in items[2:6]}) == 4


def test_base_only_without_ext():
    items = build_extended_batch(two_clip_corpus(), ExperimentConfig(), epoch_seed=1)
    assert [it.kind for it in items] == ["base", "base"]


def test_extended_batch_is_seeded():
    cfg = ExperimentConfig().replace(training__ext_loss_enabled=True)
    a = build_extended_batch(two_clip_corpus(), cfg, 3)
    b = build_extended_batch(two_clip_corpus(), cfg, 3)
    assert [x.caption for x in a] == [x.caption for x in b]
    assert all(np.array_equal(x.clip.samples, y.clip.samples) for x, y in zip(a, b))


def test_single_class_mixing_rejected():
    clip = AudioClip(np.zeros(4000), SR, 0, "a")
    corpus = Corpus([clip], {0: "a dog barking"}, [0], [])
    cfg = ExperimentConfig().replace(training__ext_loss_enabled=True)
    with pytest.raises(ConfigurationError):
        build_extended_batch(corpus, cfg, 1)
    with pytest.raises(ConfigurationError):
        train(corpus, cfg)


def test_mix_pairs_uniform_over_cross_class_pairs():
    labels = [0, 0, 1, 1, 2]
    pairs = sample_mix_pairs(labels, 10_000, np.random.default_rng(0))
    allowed = [(i, j) for i in range(5) for j in range(5) if labels[i] != labels[j]]
    counts = {p: 0 for p in allowed}
    for p in pairs:
        counts[p] += 1
    assert sum(counts.values()) == 10_000
    assert chisquare(list(counts.values())).pvalue > 0.01


def test_adamw_zero_gradient_no_decay():
    p = {"w": np.array([0.3, -1.2])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState.zeros(p), lr=0.1, weight_decay=0.0)
    assert p["w"].tolist() == [0.3, -1.2]


def test_adamw_first_step_by_hand():
    lr, wd, b1, b2, eps = 1e-3, 0.01, 0.9, 0.999, 1e-8
    p = {"w": np.array([0.5])}
    st = AdamState.zeros(p)
    adamw_step(p, {"w": np.array([1.0])}, st, lr, wd, (b1, b2), eps)
    m_hat = (1 - b1) * 1.0 / (1 - b1)
    v_hat = (1 - b2) * 1.0 / (1 - b2)
    expected = 0.5 * (1 - lr * wd) - lr * m_hat / (v_hat ** 0.5 + eps)
    assert p["w"][0] == pytest.approx(expected, abs=1e-15)
    assert st.step == 1


def test_adamw_decay_only():
    p = {"w": np.array([2.0, -4.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState.zeros(p), lr=0.1, weight_decay=0.5)
    assert np.allclose(p["w"], np.array([2.0, -4.0]) * (1 - 0.05), rtol=0, atol=1e-15)


def test_adamw_rejects_nan():
    p = {"w": np.zeros(2)}
    with pytest.raises(NumericError, match="w"):
        adamw_step(p, {"w": np.array([np.nan, 0.0])}, AdamState.zeros(p), 0.1, 0.0)


def test_corpus_counts_and_determinism(corpus5):
    assert len(corpus5.clips) == 200
    assert (len(corpus5.train), len(corpus5.val)) == (180, 20)
    assert not set(corpus5.train) & set(corpus5.val)
    per_class = np.bincount([corpus5.clips[i].label for i in corpus5.val])
    assert per_class.tolist() == [4] * 5
    again = generate_synthetic_corpus(5, 40, seed=0)
    assert all(np.array_equal(a.samples, b.samples) for a, b in zip(corpus5.clips, again.clips))
    assert again.train == corpus5.train


def test_split_is_seeded():
    labels = [i % 4 for i in range(40)]
    assert split_indices(labels, 1) == split_indices(labels, 1)
    assert split_indices(labels, 1) != split_indices(labels, 2)


def _centroid_accuracy(corpus):
    feats = np.array([power_mel_spectrogram(c.samples).mean(axis=0) for c in corpus.clips])
    feats = np.log10(feats / feats.sum(axis=1, keepdims=True))
    labels = np.array([c.label for c in corpus.clips])
    cents = np.array([feats[labels == k].mean(axis=0) for k in range(corpus.num_classes)])
    pred = np.argmin(((feats[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    return float(np.mean(pred == labels))


def test_class_spectra_nearest_centroid(corpus5):
    assert _centroid_accuracy(generate_synthetic_corpus(5, 40, 0, interference_level=(0.0, 0.0))) == 1.0
    # interfering events from other classes blur the default corpus a little
    assert _centroid_accuracy(corpus5) >= 0.95


def test_corpus_save_load(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    back = load_corpus(tmp_path)
    assert back.captions == small_corpus.captions
    assert (back.train, back.val) == (small_corpus.train, small_corpus.val)
    assert all(np.array_equal(a.samples, b.samples) for a, b in zip(small_corpus.clips, back.clips))
    with pytest.raises(InputError):
        load_corpus(tmp_path / "missing")


def test_frozen_learning_rates_keep_val_loss(small_corpus):
    ck = train(small_corpus, quick_config(training__lr_text=0.0, training__lr_vision=0.0, training__weight_decay=0.0))
    vals = [h["val_loss"] for h in ck.history]
    assert max(vals) - min(vals) == 0.0


def test_val_loss_halves_by_epoch_20(corpus5):
    ck = train(corpus5, ExperimentConfig().replace(training__max_epochs=20, training__patience=100))
    assert ck.history[20]["val_loss"] < 0.5 * ck.history[0]["val_loss"]


def test_resume_is_bit_exact(tmp_path, small_corpus):
    cfg = quick_config(training__ext_loss_enabled=True, training__max_epochs=4)
    straight = train(small_corpus, cfg)
    half = train(small_corpus, cfg, stop_after_epoch=2)
    assert half.epoch == 2
    save_checkpoint(half, tmp_path / "half.ssck")
    resumed = train(small_corpus, cfg, resume=load_checkpoint(tmp_path / "half.ssck"))
    assert checkpoint_bytes(resumed) == checkpoint_bytes(straight)


def test_early_stopping_respects_patience(small_corpus):
    cfg = ExperimentConfig().replace(training__max_epochs=200, training__patience=2, training__lr_text=0.5,
                                     training__lr_vision=0.5)
    ck = train(small_corpus, cfg)
    assert ck.epoch - ck.best_epoch <= 2
    assert ck.epoch < 200


def test_checkpoint_round_trip_and_corruption(tmp_path, small_corpus):
    ck = train(small_corpus, quick_config(training__max_epochs=2), out_dir=tmp_path)
    path = tmp_path / "c.ssck"
    save_checkpoint(ck, path)
    assert checkpoint_bytes(load_checkpoint(path)) == path.read_bytes()
    assert (tmp_path / "last.ssck").read_bytes() == path.read_bytes()
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert set(records[0]) >= {"epoch", "train_loss", "val_loss", "lr_text", "lr_vision", "wall_ms"}
    data = bytearray(path.read_bytes())
    data[100] ^= 0x01
    (tmp_path / "flip.ssck").write_bytes(bytes(data))
    with pytest.raises(FormatError, match="CRC32"):
        load_checkpoint(tmp_path / "flip.ssck")
    (tmp_path / "magic.ssck").write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "magic.ssck")
    (tmp_path / "trunc.ssck").write_bytes(path.read_bytes()[:50])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "trunc.ssck")


def test_divergence_keeps_last_good_checkpoint(small_corpus):
    cfg = quick_config(training__lr_text=1e300, training__lr_vision=1e300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(TrainingDiverged) as info:
            train(small_corpus, cfg)
    good = info.value.checkpoint
    assert all(np.all(np.isfinite(v)) for v in good.params.values())


def test_only_alignment_parameters_change(small_corpus):
    ck = train(small_corpus, quick_config(training__max_epochs=1))
    assert set(ck.params) == set(ck.model("last").parameters())
    assert {k.split(".")[0] for k in ck.params} == {"adapter_T", "adapter_V", "pooler_T", "pooler_V"}
