"""
Train a small NAR captioner and command each level
===================================================

A reduced model (d=64, two blocks) trained for a few minutes already
follows the level command most of the time. The full-size default run
is ``lencap train --corpus ... --out ...``.
"""

import sys
import time

import numpy as np

from lencap.data import VOCAB, generate_corpus
from lencap.decoding import DecodeConfig, decode_nar_batch
from lencap.metrics import control_precision
from lencap.training import TrainConfig, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1500

corpus = generate_corpus(0, 500)
held = generate_corpus(1, 50)
cfg = TrainConfig(iterations=iterations, warmup=min(150, iterations // 10), d_model=64, n_layers=2, n_heads=4, d_ff=256, log_every=0)

t0 = time.time()
result = train(cfg, corpus)
print(f"trained {iterations} iterations in {time.time() - t0:.0f}s, "
      f"last loss {np.mean(result.losses[-50:]):.3f}")

params, plan = result.params, result.plan
pairs = []
for level in range(1, plan.k + 1):
    decs = decode_nar_batch(params, held.scenes, DecodeConfig.for_level(level, plan), plan)
    pairs += [(level, d.length) for d in decs]
    print(f"\nlevel {level} {plan.bounds(level)}:")
    for d in decs[:2]:
        print(f"  ({d.length:2d}) {VOCAB.decode(d.caption)}")

print("\ncontrol precision:", {k: round(v, 3) for k, v in control_precision(pairs, plan).items()})
