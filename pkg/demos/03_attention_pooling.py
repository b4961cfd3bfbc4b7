"""
Adapters and attention pooling
==============================

A GELU adapter per branch maps audio tokens into the target width. Learned
queries then cross-attend over the adapted tokens: the first ``l`` queries
give a text-length sequence, a single query gives the vision-text vector.
The ``mean`` pooling variant is the ablation baseline.
"""

import numpy as np

from soundalign import AlignmentModel, FrozenEncoders, ModelConfig, alignment_loss, forward
from soundalign.training import generate_synthetic_corpus

corpus = generate_synthetic_corpus(2, 2, seed=3)
enc = FrozenEncoders()
clip = corpus.clips[0]
target = enc.caption_record(clip.label, corpus.captions[clip.label])
tokens = enc.audio(clip)

for pooling in ("attention", "mean"):
    model = AlignmentModel(ModelConfig(pooling=pooling))
    pair = forward(model, tokens, target.length)
    loss = alignment_loss(pair, target)
    print(f"{pooling:>9}: {model.parameter_count:6d} params, text {pair.z_hat_T.shape}, "
          f"vision {pair.z_hat_V.shape}, untrained loss {loss.item():.4f}")

# parameters split cleanly into the two branches, one optimiser each
model = AlignmentModel(ModelConfig())
for branch in ("text", "vision"):
    names = sorted(model.branch_parameters(branch))
    print(f"{branch:>6} branch: {', '.join(names)}")

# the output length follows the caption, up to q_max queries
for length in (1, 4, 16):
    print(f"target length {length:2d} -> {forward(model, tokens, length).z_hat_T.shape}")
print("vision vector finite:", bool(np.all(np.isfinite(forward(model, tokens, 1).z_hat_V.data))))
