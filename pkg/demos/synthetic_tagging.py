"""Tag discourse relations on a synthetic corpus.

Each relation owns a block of word types, so a sentence's words reveal its
relation.  A conditionally trained model should recover the labels almost
perfectly, while guessing the most common class stays near one third.

    python3 demos/synthetic_tagging.py
"""

import numpy as np

from drlm.corpus import build_vocab, decode_sentence, encode, generate_synthetic
from drlm.inference import slot_posteriors
from drlm.metrics import ConfusionCounts, macro_f1
from drlm.model import ModelDims
from drlm.training import TrainConfig, evaluate_tagging, fit, init_params

# A corpus of 6-sentence documents over 3 relations.
synth = generate_synthetic(seed=0, Z=3, vocab_per_relation=100, docs=300)
train_raw, dev_raw, test_raw = synth.documents[:240], synth.documents[240:270], synth.documents[270:]
print("labels:", synth.labels)
print("first document:")
for words, label in zip(train_raw[0].sentences, train_raw[0].relations):
    print(f"  {label:6s} {' '.join(words)}")

# The vocabulary comes from the training split only; four ids are reserved.
vocab = build_vocab(train_raw)
train, dev, test = (encode(part, vocab, synth.labels).documents for part in (train_raw, dev_raw, test_raw))
print(f"\nvocabulary size {len(vocab)}")

model = init_params(ModelDims(len(vocab), 16, 16, len(synth.labels)), seed=0)
result = fit(model, train, dev, TrainConfig(objective="conditional", epochs=2), on_epoch=print)
model = result.model
print(f"kept epoch {result.best_epoch}")

gold, pred = evaluate_tagging(model, test)
counts = ConfusionCounts.from_labels(gold, pred, len(synth.labels))
majority = np.bincount(gold).max() / len(gold)
print(f"\ntest accuracy {counts.accuracy():.3f}  macro-F1 {macro_f1(counts):.3f}  most-common-class {majority:.3f}")

# Posteriors for one test document, slot by slot.
doc = test[0]
print("\nposteriors for the first test document:")
for tokens, z, post in zip(doc.sentences, doc.relations, slot_posteriors(model, doc)):
    probs = " ".join(f"{p:.3f}" for p in post.probs)
    print(f"  gold {synth.labels[z]:6s} p=[{probs}]  {' '.join(decode_sentence(tokens, vocab)[:5])} ...")
