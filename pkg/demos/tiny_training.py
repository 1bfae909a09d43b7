"""Render a handful of lines, train a small network for a few epochs and
decode the validation images. Finishes in about a minute.

Run: python3 demos/tiny_training.py
"""

import logging

from htrkd.data import build_charset, make_toy_corpus, to_dataset
from htrkd.model import TOY_STUDENT
from htrkd.train import Network, Pools, TrainConfig, greedy_texts, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
logging.getLogger("htrkd.ctc").setLevel(logging.ERROR)

records = make_toy_corpus(160, "abcde", (1, 3), seed=5, height=32, width=256)
charset = build_charset([r.text for r in records])
train_ds, val_ds = to_dataset(records[:128], charset), to_dataset(records[128:], charset)

net = Network.create(TOY_STUDENT.with_(vocab=charset.vocab_size), seed=0)
res = train(net, Pools(real=train_ds), val_ds, TrainConfig(epochs=40, batch_size=8, lr=3e-3), charset.decode)
best = Network(net.config, res.best)
for ref, hyp in list(zip(val_ds.texts, greedy_texts(best.log_probs(val_ds.images), charset.decode)))[:8]:
    print(f"{ref:6s} -> {hyp}")
