"""From a graph to the token segments the model sees.

Generates a small tree, asks for the shortest distance between two nodes,
and prints the three prompt dialects plus the per-node token segments.
"""

from hlmg.graphs import Task, TaskQuery, generate_graph, oracle
from hlmg.text import Dialect, build_vocabulary, serialize, tokenize

g = generate_graph("tree", 6, seed=3)
q = TaskQuery(Task.SHORTEST_DISTANCE, (0, 5))
ans = oracle(g, q)
print(f"edges: {sorted(g.edges)}")
print(f"distance 0 -> 5: {ans.value}, nodes on shortest paths: {sorted(ans.gt_nodes)}\n")

for dialect in Dialect:
    s = serialize(g, q, dialect=dialect)
    print(f"[{dialect.value}] {s.text()}\n")

# each node's annotation becomes one segment; the query is the last one
s = serialize(g, q)
vocab = build_vocabulary([s])
t = tokenize(s, vocab)
for begin, end, node, kind in t.spans():
    who = "query" if node < 0 else f"node {node}"
    print(f"{who:>8}: {' '.join(vocab.decode(t.token_ids[begin:end].tolist()))}")
