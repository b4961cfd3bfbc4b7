"""
Transformed and mixed clips with rewritten captions
===================================================

Each audio transform comes with a caption rewrite: quiet gain becomes
"distant", reverb names the space, pitch shifts change the register.
Two clips of different classes mix into one clip with a composed caption.
"""

import numpy as np

from soundalign import AudioTransformSpec, apply_gain, compose_captions, mix, transform_caption, volume_label
from soundalign.augmentation import apply_transform, pair_caption
from soundalign.training import generate_synthetic_corpus

corpus = generate_synthetic_corpus(3, 2, seed=0)
clip = corpus.clips[0]
caption = corpus.captions[clip.label]
print(f"base: {caption!r}")

for spec in (AudioTransformSpec("gain", alpha=0.15), AudioTransformSpec("gain", alpha=0.8),
             AudioTransformSpec("reverb", impulse_id="hall", wet=0.6),
             AudioTransformSpec("pitch_shift", semitones=-4.0)):
    out = apply_transform(clip, spec)
    rms = np.sqrt(np.mean(out.samples ** 2))
    print(f"{spec.description:<52} rms {rms:.4f}  -> {transform_caption(caption, spec)!r}")

for alpha in (0.05, 0.15, 0.4, 1.0):
    print(f"alpha {alpha:4.2f}: {volume_label(alpha)}")
print("peak after gain 0.5:", round(float(np.max(np.abs(apply_gain(clip, 0.5).samples))), 4))

other = next(c for c in corpus.clips if c.label != clip.label)
mixed = mix(clip, other)
print(f"mix {mixed.source_id}: labels {mixed.labels}")
print("composed:", compose_captions(caption, corpus.captions[other.label]))
# training and the mix probe share one fixed caption per class pair
print("pair caption:", pair_caption(clip.label, other.label, corpus.captions))
