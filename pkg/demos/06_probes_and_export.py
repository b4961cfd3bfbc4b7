"""
Controllability probes and conditioning export
==============================================

Train briefly with transformed and mixed clips, then ask two questions:
does an attenuated clip land nearer its "distant" caption, and does a
two-class mix land nearer the composed caption than either class alone?
Finally write the conditioning pairs that a downstream generator would
consume. Takes a couple of minutes.
"""

import tempfile
from pathlib import Path

from soundalign import ExperimentConfig, FrozenEncoders, forward, generate_synthetic_corpus, train, volume_probe
from soundalign.alignment import read_conditioning, write_conditioning
from soundalign.evaluation import mix_probe_grid, volume_variants

corpus = generate_synthetic_corpus(5, 40, seed=0)
config = ExperimentConfig().replace(training__ext_loss_enabled=True, training__max_epochs=40)
enc = FrozenEncoders(config.encoders)
model = train(corpus, config, encoders=enc).model("best")

clip = corpus.val_clips[0]
variants = volume_variants(corpus.captions[clip.label])
print("variants:", variants)
for row in volume_probe(model, clip, (0.1, 0.15, 0.5, 1.0), variants, enc):
    print(f"alpha {row.alpha:4.2f} ({row.volume:<7}) -> {row.winner:<8} margin {row.margin:+.4f}")

grid = mix_probe_grid(model, corpus.val_clips, corpus.captions, enc)
print(f"mix probe: {grid.pass_rate:.0f}% of cross-class mixes prefer the composed caption")
for (u, v), rate in grid.grid().items():
    print(f"  {u},{v}: {rate:5.1f}%")

pairs = {}
for c in corpus.val_clips[:4]:
    length = enc.caption_record(c.label, corpus.captions[c.label]).length
    out = forward(model, enc.audio(c), length)
    pairs[c.source_id] = (out.z_hat_T.data, out.z_hat_V.data)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "conditioning.sscp"
    write_conditioning(path, pairs, config.model.d_text, config.model.d_vision)
    d_text, d_vision, back = read_conditioning(path)
    print(f"wrote {len(back)} pairs ({path.stat().st_size} bytes), widths {d_text}/{d_vision}")
