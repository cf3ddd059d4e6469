"""Block-diagonal local attention against full attention over the sequence.

With a fixed number of tokens per node, the local block's cost grows
linearly with the node count while full attention grows quadratically.
"""

from hlmg.model import model_preset
from hlmg.training import complexity_benchmark

rows = complexity_benchmark(model_preset("desk", 32, 2), [8, 16, 32, 64, 128], tokens_per_node=16, repeats=3)
base = rows[0]
print(f"{'nodes':>6} {'local ms':>9} {'full ms':>9} {'local x':>8} {'full x':>8} {'flops ratio':>12}")
for r in rows:
    print(f"{r.nodes:>6} {r.local_ms:>9.2f} {r.full_ms:>9.2f} {r.local_ms / base.local_ms:>8.1f} "
          f"{r.full_ms / base.full_ms:>8.1f} {r.full_flops / r.local_flops:>12.0f}")
