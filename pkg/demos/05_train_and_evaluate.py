"""
Training with early stopping, then caption retrieval
====================================================

Train the adapters and poolers on a small synthetic corpus with two AdamW
optimisers (one per branch), stop when validation loss stalls, and score
held-out clips by ranking every class caption by cosine similarity.
Takes about a minute.
"""

from soundalign import ExperimentConfig, evaluate_retrieval, generate_synthetic_corpus, train

corpus = generate_synthetic_corpus(5, 40, seed=0)
print(f"{len(corpus.train)} training clips, {len(corpus.val)} validation clips")

config = ExperimentConfig().replace(training__max_epochs=60)


def show(record):
    if record["epoch"] % 10 == 0:
        print(f"epoch {record['epoch']:3d}  train {record['train_loss']:.4f}  val {record['val_loss']:.4f} "
              f"(text {record['val_text']:.4f}, vision {record['val_vision']:.4f})")


ckpt = train(corpus, config, on_epoch=show)
print(f"best epoch {ckpt.best_epoch}, val loss {ckpt.best_val_loss:.4f}")

report = evaluate_retrieval(ckpt.model("best"), corpus.val_clips, corpus.captions, k_list=(1, 5))
print(report.to_table())
