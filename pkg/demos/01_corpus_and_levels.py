"""
Synthetic scenes and their captions at each length level
=========================================================

Every scene is a handful of coloured objects. The caption grammar grows
one detail at a time (colour, size, relation, location), so a longer
caption of the same scene always says more.
"""

import numpy as np

from lencap.data import VOCAB, caption_ladder, caption_length, generate_corpus
from lencap.levels import plan_4_level

plan = plan_4_level()
print("levels:", plan)

corpus = generate_corpus(seed=0, num_scenes=300, plan=plan)
scene = corpus.scenes[3]
print(f"\nscene with {scene.num_regions} objects")
for lvl, refs in sorted(scene.references.items()):
    for r in refs:
        print(f"  level {lvl} ({caption_length(r):2d} tokens): {VOCAB.decode(r)}")

# the full ladder: each rung adds one detail to the previous caption
print("\nladder lengths:", [len(c) for c in caption_ladder(scene)])

# how long the references are across the corpus
lengths = np.array([caption_length(r) for s in corpus.scenes for rs in s.references.values() for r in rs])
print(f"\n{len(lengths)} references, lengths {lengths.min()}..{lengths.max()}, mean {lengths.mean():.1f}")
print("objects per scene:", np.bincount([s.num_regions for s in corpus.scenes])[1:])
