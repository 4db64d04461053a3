"""
Label sets as sequences, and which positions each step may look at
===================================================================

A five-label forest, flattened level by level, then turned into a
path-adaptive mask.
"""

import numpy as np

from pammhtc import build_mask, bfs_flatten, load_hierarchy, off_path_mass, parse_sequence

h = load_hierarchy("""
ROOT\tl1
ROOT\tl3
l1\tl2
l3\tl4
l2\tl5
""")
print({lab: h.depth[lab] for lab in h.labels})

# breadth-first: '_' joins labels of one level, '/' closes a level
ml = bfs_flatten(h, {"l1", "l2", "l3", "l4", "l5"})
print(" ".join(ml.tokens))
print(ml.levels)

# parsing gives the set back
labels, diag = parse_sequence(h, ml.tokens)
print(sorted(labels), diag.clean)

# each row lists the earlier positions on the same root-to-leaf path
mask = build_mask(h, ml)
print(mask.to_text(ml.tokens))

# l5 (row 9) may look at l1, the '_' after it, l2, the '_' after it, and itself
print(sorted(j + 1 for j in mask.path_index_sets[8]))

# a decoder that spreads attention evenly over the causal prefix
n = mask.n
uniform = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
print(np.round(off_path_mass(uniform, mask), 3))

# attention confined to the path leaves nothing off it
on_path = mask.m / mask.m.sum(1, keepdims=True)
print(off_path_mass(on_path, mask).max())
