"""Sparse-reward PPO against ERL on the depth-2 synthetic world, five seeds.

Takes a couple of minutes on one core. Prints the per-seed final EM table.
"""

import sys
import time

from erl.toy.train import compare

seeds = [int(s) for s in sys.argv[1:]] or [1, 2, 3, 4, 5]
start = time.perf_counter()
result = compare(seeds, hop_depth=2)
print(result.table())
print(f"ERL >= sparse PPO on every seed: {result.erl_never_worse}")
print(f"ERL mean strictly greater: {result.erl_better_on_mean}")
print(f"{time.perf_counter() - start:.0f}s")
