"""
Frozen encoder stubs
====================

Audio goes through a log-mel front-end and is grouped into tokens; captions
go through a hashed-word text encoder (a token sequence) and a pooled,
rotated vision-text encoder (one unit vector). None of them has parameters
that training can touch.
"""

import numpy as np

from soundalign import FrozenEncoders
from soundalign.encoders import frame_count, log_mel, token_count
from soundalign.training import generate_synthetic_corpus

corpus = generate_synthetic_corpus(3, 4, seed=1)
clip = corpus.clips[0]
print(f"clip {clip.source_id}: {clip.samples.size} samples at {clip.sample_rate} Hz, class {clip.label}")

mel = log_mel(clip.samples)
print(f"log-mel: {mel.shape} (expected {frame_count(clip.samples.size)} frames)")

enc = FrozenEncoders()
tokens = enc.audio(clip)
print(f"audio tokens: {tokens.shape} (expected {token_count(clip.samples.size)} x 64)")

for cid, caption in sorted(corpus.captions.items()):
    seq, vec = enc.text(caption), enc.vision(caption)
    print(f"{cid}: {caption!r:36} text {seq.shape}, vision |v| = {np.linalg.norm(vec):.3f}")

# similar captions land close in the vision-text space
a = enc.vision("a dog barking")
b = enc.vision("a distant dog barking")
c = enc.vision("a bell ringing")
print(f"cos(dog, distant dog) = {a @ b:.3f}, cos(dog, bell) = {a @ c:.3f}")
