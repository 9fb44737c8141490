"""
Watching mask-predict-update refine a canvas
============================================

Pass a checkpoint (``lencap train`` writes ``model.bin``) to see a
trained model; without one a freshly initialised model is used, whose
output is noise but whose schedule is the same.
"""

import sys

import numpy as np

from lencap.data import VOCAB, generate_corpus
from lencap.decoding import DecodeConfig, decode_nar, num_masks
from lencap.levels import plan_4_level
from lencap.model import ModelConfig, init_params, load_checkpoint

if len(sys.argv) > 1:
    params, plan, _ = load_checkpoint(sys.argv[1])
else:
    plan = plan_4_level()
    params = init_params(ModelConfig(vocab_size=len(VOCAB), num_levels=plan.k))

scene = generate_corpus(1, 1).scenes[0]
level = 2
cfg = DecodeConfig.for_level(level, plan)
lo, hi = plan.bounds(level)
print(f"level {level}: canvas of {hi} slots, T={cfg.steps}, gamma={cfg.gamma}")
# step 1 predicts the whole canvas; later steps re-mask the least confident slots
print("masks per step:", [hi] + [num_masks(t, cfg.steps, hi) for t in range(2, cfg.steps + 1)])

out = decode_nar(params, scene, cfg, plan)
for st in out.trace:
    # re-predicted slots in upper case
    words = [VOCAB.tokens[t].upper() if i in st.masked else VOCAB.tokens[t] for i, t in enumerate(st.tokens)]
    print(f"t={st.step:2d} n={len(st.masked):2d} min conf {np.min(st.confidences):.2f}  " + " ".join(words))

print(f"\n{out.passes} forward passes, caption ({out.length} tokens): {VOCAB.decode(out.caption)}")
