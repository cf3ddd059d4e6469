"""Undirected graphs, random generators, permutations and exact task oracles."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

INF = math.inf


class GraphError(ValueError):
    """Invalid graph, generator arguments or query."""


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    edges: frozenset[tuple[int, int]]
    node_features: tuple[tuple[tuple[str, str], ...], ...] | None = None
    edge_features: dict[tuple[int, int], str] | None = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.num_nodes < 1:
            raise GraphError("graph needs at least one node")
        for i, j in self.edges:
            if not (0 <= i < j < self.num_nodes):
                raise GraphError(f"edge {(i, j)} is not canonical (need 0 <= i < j < {self.num_nodes})")
        if self.node_features is not None and len(self.node_features) != self.num_nodes:
            raise GraphError("node_features must have one entry per node")
        if self.edge_features is not None:
            extra = set(self.edge_features) - set(self.edges)
            if extra:
                raise GraphError(f"edge features given for non-edges {sorted(extra)}")

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Iterable[Sequence[int]], node_features=None, edge_features=None):
        canon = set()
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise GraphError(f"self-loop on node {a}")
            canon.add((min(a, b), max(a, b)))
        efeat = None
        if edge_features:
            efeat = {(min(a, b), max(a, b)): v for (a, b), v in edge_features.items()}
        nfeat = None if node_features is None else tuple(tuple(tuple(kv) for kv in f) for f in node_features)
        return cls(num_nodes, frozenset(canon), nfeat, efeat)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        for row in adj:
            row.sort()
        return adj

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.int8)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1
        return a

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edges

    def degree(self, u: int) -> int:
        return sum(1 for e in self.edges if u in e)

    def edge_feature(self, u: int, v: int) -> str | None:
        if not self.edge_features:
            return None
        return self.edge_features.get((min(u, v), max(u, v)))

    def induced_subgraph(self, nodes: Iterable[int]) -> tuple[Graph, list[int]]:
        """Subgraph on ``nodes`` with indices compacted in ascending order.

        Returns the subgraph and the list mapping new index -> old index.
        """
        keep = sorted(set(nodes))
        new_of = {old: new for new, old in enumerate(keep)}
        edges = [(new_of[i], new_of[j]) for i, j in self.edges if i in new_of and j in new_of]
        nfeat = None if self.node_features is None else [self.node_features[o] for o in keep]
        efeat = None
        if self.edge_features:
            efeat = {(new_of[i], new_of[j]): v for (i, j), v in self.edge_features.items() if i in new_of and j in new_of}
        return Graph.from_edges(len(keep), edges, nfeat, efeat), keep


# ---------------------------------------------------------------------------
# graphons

class GraphonKind(str, Enum):
    CONSTANT = "constant"
    SPARSE = "sparse"
    DENSE = "dense"
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    SIGMOIDAL = "sigmoidal"
    STEP = "step"
    SIN = "sin"
    AVG = "avg"
    EXP_DECAY = "exp_decay"
    SOFTMAX = "softmax"


# kinds whose value is a random p drawn once per graph from this interval
GRAPHON_P_RANGES = {
    GraphonKind.CONSTANT: (0.3, 0.7),
    GraphonKind.SPARSE: (0.05, 0.15),
    GraphonKind.DENSE: (0.8, 1.0),
}


@dataclass(frozen=True)
class GraphonSpec:
    kind: GraphonKind
    p: float | None = None  # constant / sparse / dense
    threshold: float | None = None  # step

    def __post_init__(self):
        object.__setattr__(self, "kind", GraphonKind(self.kind))
        if self.kind in GRAPHON_P_RANGES:
            if self.p is None:
                raise GraphError(f"{self.kind.value} graphon needs a sampled p")
            lo, hi = GRAPHON_P_RANGES[self.kind]
            if not lo <= self.p <= hi:
                raise GraphError(f"{self.kind.value} graphon p={self.p} outside [{lo}, {hi}]")
        if self.kind is GraphonKind.STEP:
            if self.threshold is None or not 0.0 <= self.threshold <= 1.0:
                raise GraphError("step graphon needs a threshold in [0, 1]")

    @classmethod
    def sample(cls, kind: GraphonKind | str, rng: np.random.Generator) -> GraphonSpec:
        """Draw the per-graph random parameters of ``kind``."""
        kind = GraphonKind(kind)
        if kind in GRAPHON_P_RANGES:
            lo, hi = GRAPHON_P_RANGES[kind]
            return cls(kind, p=float(rng.uniform(lo, hi)))
        if kind is GraphonKind.STEP:
            return cls(kind, threshold=float(rng.uniform(0.0, 1.0)))
        return cls(kind)


def evaluate_graphon(spec: GraphonSpec, v1: float, v2: float) -> float:
    """Edge probability W(v1, v2) for latent positions in [0, 1]."""
    if not (0.0 <= v1 <= 1.0 and 0.0 <= v2 <= 1.0):
        raise GraphError(f"graphon inputs must lie in [0, 1], got ({v1}, {v2})")
    k = spec.kind
    if k in GRAPHON_P_RANGES:
        return float(spec.p)
    if k is GraphonKind.LINEAR:
        return v1 * v2
    if k is GraphonKind.QUADRATIC:
        return v1**2 * v2**2
    if k is GraphonKind.SIGMOIDAL:
        return 1.0 / (1.0 + math.exp(-10.0 * (v1 - v2)))
    if k is GraphonKind.STEP:
        return 1.0 if (v1 >= spec.threshold and v2 >= spec.threshold) else 0.0
    if k is GraphonKind.SIN:
        return math.sin(math.pi * v1) * math.sin(math.pi * v2)
    if k is GraphonKind.AVG:
        return (v1 + v2) / 2.0
    if k is GraphonKind.EXP_DECAY:
        return math.exp(-(v1**2 + v2**2))
    if k is GraphonKind.SOFTMAX:
        return math.exp(v1) / (math.exp(v1) + math.exp(v2))
    raise GraphError(f"unknown graphon kind {k}")


# ---------------------------------------------------------------------------
# generators

FAMILIES = ("cycle", "star", "complete", "path", "tree", "wheel", "barbell", "graphon")
_MIN_NODES = {"cycle": 3, "star": 2, "complete": 2, "path": 2, "tree": 2, "wheel": 4, "barbell": 6, "graphon": 2}


def _prufer_tree(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    if n == 2:
        return [(0, 1)]
    seq = [int(x) for x in rng.integers(0, n, size=n - 2)]
    degree = [1] * n
    for x in seq:
        degree[x] += 1
    edges = []
    for x in seq:
        leaf = next(i for i in range(n) if degree[i] == 1)
        edges.append((leaf, x))
        degree[leaf] -= 1
        degree[x] -= 1
    u, v = [i for i in range(n) if degree[i] == 1]
    edges.append((u, v))
    return edges


def generate_graph(
    family: str,
    n: int,
    graphon: GraphonSpec | None = None,
    seed: int | np.random.Generator | None = None,
) -> Graph:
    """Generate a graph of a pre-defined family, or sample one from a graphon."""
    if family not in FAMILIES:
        raise GraphError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if n < 2:
        raise GraphError("n must be >= 2")
    if n < _MIN_NODES[family]:
        raise GraphError(f"{family} graphs need n >= {_MIN_NODES[family]} (got {n})")
    if (graphon is not None) != (family == "graphon"):
        raise GraphError("a graphon spec is required iff family == 'graphon'")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    if family == "cycle":
        edges = [(i, (i + 1) % n) for i in range(n)]
    elif family == "star":
        edges = [(0, i) for i in range(1, n)]
    elif family == "complete":
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif family == "path":
        edges = [(i, i + 1) for i in range(n - 1)]
    elif family == "tree":
        edges = _prufer_tree(n, rng)
    elif family == "wheel":
        # hub 0 joined to a rim cycle 1..n-1
        rim = list(range(1, n))
        edges = [(0, i) for i in rim] + [(rim[k], rim[(k + 1) % len(rim)]) for k in range(len(rim))]
    elif family == "barbell":
        # two cliques of size m joined by a path of n - 2m nodes
        m = n // 2 if n % 2 == 0 else (n - 1) // 2
        m = max(3, min(m, n // 2))
        bridge = n - 2 * m
        left = list(range(m))
        mid = list(range(m, m + bridge))
        right = list(range(m + bridge, n))
        edges = [(a, b) for k, a in enumerate(left) for b in left[k + 1:]]
        edges += [(a, b) for k, a in enumerate(right) for b in right[k + 1:]]
        chain = [left[-1]] + mid + [right[0]]
        edges += list(zip(chain, chain[1:]))
    else:
        latent = rng.uniform(0.0, 1.0, size=n)
        draws = rng.uniform(0.0, 1.0, size=(n, n))
        edges = [
            (i, j)
            for i in range(n)
            for j in range(i + 1, n)
            if draws[i, j] < evaluate_graphon(graphon, float(latent[i]), float(latent[j]))
        ]
    return Graph.from_edges(n, edges)


# ---------------------------------------------------------------------------
# permutations

@dataclass(frozen=True)
class Permutation:
    mapping: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise GraphError("mapping is not a bijection on 0..n-1")

    @classmethod
    def identity(cls, n: int) -> Permutation:
        return cls(tuple(range(n)))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> Permutation:
        return cls(tuple(int(x) for x in rng.permutation(n)))

    def __len__(self) -> int:
        return len(self.mapping)

    def __call__(self, i: int) -> int:
        return self.mapping[i]

    def inverse(self) -> Permutation:
        inv = [0] * len(self.mapping)
        for i, p in enumerate(self.mapping):
            inv[p] = i
        return Permutation(tuple(inv))

    def compose(self, other: Permutation) -> Permutation:
        """``self ∘ other``: apply ``other`` first."""
        return Permutation(tuple(self.mapping[other.mapping[i]] for i in range(len(other))))


def permute(g: Graph, p: Permutation) -> Graph:
    """Relabel node ``i`` as ``p(i)``, carrying features along."""
    if len(p) != g.num_nodes:
        raise GraphError(f"permutation of size {len(p)} applied to graph with {g.num_nodes} nodes")
    edges = [(p(i), p(j)) for i, j in g.edges]
    nfeat = None
    if g.node_features is not None:
        nfeat = [None] * g.num_nodes
        for i, f in enumerate(g.node_features):
            nfeat[p(i)] = f
    efeat = None
    if g.edge_features:
        efeat = {(p(i), p(j)): v for (i, j), v in g.edge_features.items()}
    return Graph.from_edges(g.num_nodes, edges, nfeat, efeat)


# ---------------------------------------------------------------------------
# tasks and oracles

class Task(str, Enum):
    NODE_DEGREE = "node_degree"
    EDGE_EXISTENCE = "edge_existence"
    SHORTEST_DISTANCE = "shortest_distance"
    REACHABLE = "reachable"
    CYCLE = "cycle"
    EDGE_COUNT = "edge_count"
    COMPONENTS = "components"


PAIR_TASKS = {Task.EDGE_EXISTENCE, Task.SHORTEST_DISTANCE, Task.REACHABLE}


@dataclass(frozen=True)
class TaskQuery:
    task: Task
    nodes: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "nodes", tuple(int(x) for x in self.nodes))
        want = 2 if self.task in PAIR_TASKS else 1 if self.task is Task.NODE_DEGREE else 0
        if len(self.nodes) != want:
            raise GraphError(f"{self.task.value} query needs {want} node(s), got {self.nodes}")
        if want == 2 and self.nodes[0] == self.nodes[1]:
            raise GraphError("pair queries need two distinct nodes")

    def permuted(self, p: Permutation) -> TaskQuery:
        return TaskQuery(self.task, tuple(p(u) for u in self.nodes))


@dataclass(frozen=True)
class OracleAnswer:
    value: float | int | bool
    gt_nodes: frozenset[int] | None = None


def bfs_distances(adj: list[list[int]], src: int) -> list[float]:
    dist = [INF] * len(adj)
    dist[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if dist[w] == INF:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def component_count(g: Graph) -> int:
    parent = list(range(g.num_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    comps = g.num_nodes
    for i, j in g.edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            comps -= 1
    return comps


def has_cycle(g: Graph) -> bool:
    # a forest has exactly n - c edges
    return g.num_edges > g.num_nodes - component_count(g)


def shortest_path_nodes(g: Graph, u: int, v: int) -> frozenset[int]:
    """All nodes lying on at least one shortest u-v path (empty if unreachable)."""
    adj = g.adjacency()
    du = bfs_distances(adj, u)
    if du[v] == INF:
        return frozenset()
    dv = bfs_distances(adj, v)
    return frozenset(w for w in range(g.num_nodes) if du[w] + dv[w] == du[v])


def simple_path_nodes(g: Graph, u: int, v: int) -> frozenset[int]:
    """All nodes lying on at least one simple u-v path (empty if unreachable).

    Uses the block-cut tree: a node is on some simple u-v path iff it belongs
    to a biconnected block on the tree path between u and v.
    """
    adj = g.adjacency()
    if bfs_distances(adj, u)[v] == INF:
        return frozenset()
    nxg = nx.Graph()
    nxg.add_nodes_from(range(g.num_nodes))
    nxg.add_edges_from(g.edges)
    blocks = [frozenset(b) for b in nx.biconnected_components(nxg)]
    cuts = set(nx.articulation_points(nxg))
    tree = nx.Graph()
    for k, b in enumerate(blocks):
        tree.add_node(("B", k))
        for c in b & cuts:
            tree.add_edge(("B", k), ("C", c))

    def anchor(x):
        if x in cuts:
            return ("C", x)
        return ("B", next(k for k, b in enumerate(blocks) if x in b))

    route = nx.shortest_path(tree, anchor(u), anchor(v))
    nodes: set[int] = {u, v}
    for kind, k in route:
        if kind == "B":
            nodes |= blocks[k]
    return frozenset(nodes)


def oracle(g: Graph, query: TaskQuery) -> OracleAnswer:
    """Exact answer and interpretation ground-truth node set for ``query``."""
    for x in query.nodes:
        if not 0 <= x < g.num_nodes:
            raise GraphError(f"query node {x} outside graph of {g.num_nodes} nodes")
    t = query.task
    if t is Task.NODE_DEGREE:
        (u,) = query.nodes
        return OracleAnswer(g.degree(u), frozenset({u}))
    if t is Task.EDGE_EXISTENCE:
        u, v = query.nodes
        return OracleAnswer(g.has_edge(u, v), frozenset({u, v}))
    if t is Task.SHORTEST_DISTANCE:
        u, v = query.nodes
        d = bfs_distances(g.adjacency(), u)[v]
        gt = shortest_path_nodes(g, u, v) or frozenset({u, v})
        return OracleAnswer(d, gt)
    if t is Task.REACHABLE:
        u, v = query.nodes
        reach = bfs_distances(g.adjacency(), u)[v] != INF
        gt = simple_path_nodes(g, u, v) if reach else frozenset({u, v})
        return OracleAnswer(reach, gt)
    if t is Task.CYCLE:
        return OracleAnswer(has_cycle(g))
    if t is Task.EDGE_COUNT:
        return OracleAnswer(g.num_edges)
    if t is Task.COMPONENTS:
        return OracleAnswer(component_count(g))
    raise GraphError(f"unknown task {t}")
