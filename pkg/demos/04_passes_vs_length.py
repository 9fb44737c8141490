"""
Forward passes: refinement budget versus autoregressive length
==============================================================

The NAR decoder spends at most T passes whatever the caption length;
the AR decoder spends one pass per token plus one for [EOS]. Pass
counts do not depend on training, so an untrained model shows them.
"""

import numpy as np

from lencap.bench import ar_decoder, count_forward_passes, nar_decoder
from lencap.data import VOCAB, generate_corpus
from lencap.decoding import DecodeConfig
from lencap.levels import plan_4_level
from lencap.model import ModelConfig, init_params

plan = plan_4_level()
params = init_params(ModelConfig(vocab_size=len(VOCAB), num_levels=plan.k), seed=0)
work = generate_corpus(2, 8).scenes

print(f"{'level':>5} {'T':>3} {'NAR passes':>11}")
for level in range(1, 5):
    for T in (10, 25):
        counts = count_forward_passes(nar_decoder(params, plan, DecodeConfig.for_level(level, plan, steps=T)), work)
        print(f"{level:>5} {T:>3} {np.mean(counts):>11.1f}")

lengths = [d.length for d in ar_decoder(params, plan, 4)(work)]
counts = count_forward_passes(ar_decoder(params, plan, 4), work)
print(f"\nAR: mean length {np.mean(lengths):.1f}, mean passes {np.mean(counts):.1f}")

T15, T25 = (np.mean(count_forward_passes(nar_decoder(params, plan, DecodeConfig(steps=T, level=4)), work))
            for T in (15, 25))
print(f"\npass ratio T=25 / T=15 at level 4: {T25 / T15:.2f}")
