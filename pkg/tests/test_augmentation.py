import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from soundalign.augmentation import (AudioTransformSpec, AugmentationConfig, CaptionRewriteRule, CaptionRules,
                                     CaptionService, apply_gain, apply_pitch_shift, apply_reverb, apply_transform,
                                     compose_captions, impulse_response, mix, pair_caption, parse_caption,
                                     sample_spec, transform_caption, volume_label)
from soundalign.encoders import AudioClip
from soundalign.errors import ConfigurationError, ContractError, InputError, ParameterError

SR = 16000
TRAIN = "a train is passing by"
HELI = "a helicopter hovering overhead"


def clip(x, label=0):
    return AudioClip(np.asarray(x, dtype=float), SR, label, f"c{label}")


def test_gain_examples():
    x = clip([0.8, -0.4])
    assert np.array_equal(apply_gain(x, 1.0).samples, x.samples)
    assert np.allclose(apply_gain(x, 0.5).samples, [0.4, -0.2], rtol=0, atol=0)
    assert apply_gain(clip([0.8]), 2.0).samples.tolist() == [1.0]
    with pytest.raises(ParameterError):
        apply_gain(x, 0.0)


def test_reverb_examples():
    x = clip(np.random.default_rng(0).uniform(-0.5, 0.5, 200))
    assert np.allclose(apply_reverb(x, [1.0], 1.0).samples, x.samples, atol=1e-15)
    assert np.array_equal(apply_reverb(x, impulse_response("hall"), 0.0).samples, x.samples)
    with pytest.raises(ParameterError):
        apply_reverb(x, [], 0.5)


def test_reverb_direct_sum_oracle():
    sig, ir = [0.5, -0.25, 0.1], [1.0, 0.5]
    direct = [sum(sig[n - k] * ir[k] for k in range(2) if 0 <= n - k < 3) for n in range(3)]
    scale = max(abs(v) for v in sig) / max(abs(v) for v in direct)
    out = apply_reverb(clip(sig), ir, 1.0).samples
    assert np.allclose(out, [d * scale for d in direct], rtol=0, atol=1e-15)


def test_pitch_shift_keeps_length_and_rate():
    x = clip(0.5 * np.sin(2 * np.pi * 440 * np.arange(SR) / SR))
    up = apply_pitch_shift(x, 12.0)
    assert up.samples.size == x.samples.size and up.sample_rate == SR
    assert np.all(up.samples[SR // 2 + 1:] == 0)  # an octave up halves the duration
    spectrum = np.abs(np.fft.rfft(up.samples[: SR // 2]))
    assert abs(np.argmax(spectrum) * 2 - 880) <= 2


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(50, 400), elements=st.floats(-1, 1)),
       st.sampled_from(["gain", "reverb", "pitch_shift"]), st.integers(0, 2**32 - 1))
def test_transforms_stay_in_range(x, kind, seed):
    spec = sample_spec(kind, np.random.default_rng(seed))
    out = apply_transform(clip(x), spec)
    assert out.samples.size == x.size and out.sample_rate == SR
    assert np.all(np.abs(out.samples) <= 1.0)


def test_mix_examples():
    x = clip(np.random.default_rng(1).uniform(-1, 1, 100), 0)
    silence = clip(np.zeros(100), 1)
    assert np.array_equal(mix(x, silence).samples, 0.5 * x.samples)
    assert np.array_equal(mix(x, x).samples, x.samples)
    with pytest.raises(InputError):
        mix(x, AudioClip(np.zeros(100), 8000, 1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 64, elements=st.floats(-1, 1)), arrays(np.float64, 64, elements=st.floats(-1, 1)))
def test_mix_commutes(a, b):
    assert np.array_equal(mix(clip(a, 0), clip(b, 1)).samples, mix(clip(b, 1), clip(a, 0)).samples)


def test_volume_labels():
    assert volume_label(0.15) == "low"
    assert volume_label(0.2) == "medium"
    assert volume_label(0.3) == "medium"
    assert volume_label(0.5) == "high"


def test_transform_caption_examples():
    assert transform_caption(TRAIN, AudioTransformSpec("gain", alpha=0.15)) == "a distant train is passing by"
    assert transform_caption(TRAIN, AudioTransformSpec("reverb", impulse_id="tunnel")) == "a train echoing in a tunnel"
    assert transform_caption(TRAIN, AudioTransformSpec("gain", alpha=0.8)) == TRAIN
    spec = AudioTransformSpec("pitch_shift", semitones=-3)
    assert transform_caption(TRAIN, spec, 5) == transform_caption(TRAIN, spec, 5)
    assert "train" in transform_caption(TRAIN, spec, 5)


def test_articles_are_fixed():
    assert transform_caption("an owl hooting", AudioTransformSpec("gain", alpha=0.1)) == "a distant owl hooting"
    assert compose_captions("an owl hooting", "a dog barking", 0).startswith("a distant owl")


def test_compose_examples():
    out = compose_captions("a train passing by", HELI, 0)
    assert out == "a distant train and a hovering helicopter"
    for seed in range(6):
        c = compose_captions("a train passing by", HELI, seed)
        assert "train" in c and "helicopter" in c
        assert c == compose_captions("a train passing by", HELI, seed)
    with pytest.raises(ContractError):
        compose_captions(TRAIN, TRAIN, 0)
    with pytest.raises(ContractError):
        compose_captions(TRAIN, HELI, 0, class_ids=(2, 2))


def test_pair_caption_is_order_free():
    caps = {0: "a train passing by", 1: HELI}
    assert pair_caption(0, 1, caps) == pair_caption(1, 0, caps) == "a distant train and a hovering helicopter"


def test_parse_caption():
    p = parse_caption(TRAIN)
    assert (p.article, p.subject, p.rest, p.participle) == ("a", "train", "is passing by", "passing")
    p = parse_caption("a car engine idling")
    assert (p.subject, p.participle) == ("car engine", "idling")


def test_rules_must_cover_every_transform():
    gain_only = tuple(r for r in CaptionRules().rules if r.kind == "gain")
    with pytest.raises(ConfigurationError):
        CaptionRules(rules=gain_only)
    rules = CaptionRules(rules=gain_only, kinds=("gain",))
    with pytest.raises(ConfigurationError):
        transform_caption(TRAIN, AudioTransformSpec("reverb"), 0, rules)
    with pytest.raises(ConfigurationError):
        CaptionRewriteRule("gain", 0, 1, ("something quiet",))


def test_sample_spec_ranges():
    rng = np.random.default_rng(3)
    cfg = AugmentationConfig()
    for _ in range(200):
        g = sample_spec("gain", rng, cfg)
        assert 0.1 <= g.alpha < 0.5
        assert volume_label(g.alpha) in ("low", "medium")
    with pytest.raises(ParameterError):
        sample_spec("flange", rng)


class _Handler(BaseHTTPRequestHandler):
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append(body)
        caption = f"[{body['mode']}] " + " + ".join(body["base_captions"])
        data = json.dumps({"caption": caption}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def caption_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/caption"
    server.shutdown()
    server.server_close()


def test_caption_service_round_trip(caption_server):
    rules = CaptionRules(service=CaptionService(caption_server, timeout=5, retries=0))
    spec = AudioTransformSpec("gain", alpha=0.15)
    assert transform_caption(TRAIN, spec, 0, rules) == f"[transform] {TRAIN}"
    assert _Handler.seen[-1]["description"] == spec.description
    assert compose_captions(TRAIN, HELI, 0, rules) == f"[compose] {TRAIN} + {HELI}"


def test_caption_service_falls_back_to_templates(caplog):
    svc = CaptionService("http://127.0.0.1:9/caption", timeout=0.5, retries=1)
    rules = CaptionRules(service=svc)
    with caplog.at_level(logging.WARNING):
        out = transform_caption(TRAIN, AudioTransformSpec("gain", alpha=0.15), 0, rules)
    assert out == "a distant train is passing by"
    assert "caption service unavailable" in caplog.text
