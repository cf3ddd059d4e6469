"""Graph-to-text rendering, a word-level vocabulary, and segment-aware tokenization.

A rendered sample is a list of per-node annotations (structure, then the
optional feature text) followed by one task query. Tokenization keeps a
segment map recording, for every token, which node (or the query) it
belongs to and which kind of span it came from. The local attention mask
and the pooling layer are both driven by that map.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .graphs import Graph, Task, TaskQuery

PAD, UNK = "<pad>", "<unk>"
QUERY = -1

STRUCTURE, FEATURE, QUERY_SPAN = 0, 1, 2
SPAN_KINDS = ("structure", "feature", "query")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

QUERY_TEMPLATES = {
    Task.SHORTEST_DISTANCE: "What is the shortest distance between nodes {0} and {1}?",
    Task.CYCLE: "Is the graph cyclic?",
    Task.EDGE_COUNT: "What is the total number of edges in the graph?",
    Task.REACHABLE: "Are nodes {0} and {1} reachable from each other?",
    Task.EDGE_EXISTENCE: "Does an edge exist between nodes {0} and {1}?",
    Task.COMPONENTS: "How many connected components does the graph have?",
    Task.NODE_DEGREE: "What is the degree of node {0}?",
}


class Dialect(str, Enum):
    CGDL = "cgdl"
    ADJLIST = "adjlist"
    EDGES = "edges"


class NamePolicy(str, Enum):
    CANONICAL = "canonical"
    RANDOM_STRING = "random_string"


class SerializationError(ValueError):
    pass


class SequenceTooLong(ValueError):
    def __init__(self, required: int, limit: int):
        self.required = required
        self.limit = limit
        super().__init__(f"sequence needs {required} positions but the limit is {limit}")


def split_words(text: str) -> list[str]:
    """Whitespace + punctuation split; every node name stays one token."""
    return _TOKEN_RE.findall(text)


# words that appear in templates; random node names must avoid them
_TEMPLATE_WORDS = frozenset(
    w
    for text in [*QUERY_TEMPLATES.values(), "Node is connected to node nodes and nothing with features"]
    for w in split_words(text)
)


def random_node_names(n: int, rng: np.random.Generator, max_len: int = 4) -> list[str]:
    """Unique alphanumeric names of length 1..max_len, never plain integers."""
    alphabet = np.array(list(string.ascii_letters + string.digits))
    names: list[str] = []
    taken: set[str] = set()
    while len(names) < n:
        size = int(rng.integers(1, max_len + 1))
        name = "".join(rng.choice(alphabet, size=size))
        if name in taken or name.isdigit() or name in _TEMPLATE_WORDS:
            continue
        taken.add(name)
        names.append(name)
    return names


def _join_items(items: Sequence[str]) -> str:
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + f", and {items[-1]}"


@dataclass
class SerializedSample:
    structure: list[str]
    features: list[str] | None
    query: str
    dialect: Dialect
    node_names: list[str]
    order: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.order:
            self.order = list(range(len(self.structure)))
        if len(set(self.node_names)) != len(self.node_names):
            raise SerializationError("node display names must be unique")

    @property
    def num_nodes(self) -> int:
        return len(self.structure)

    def spans(self) -> list[tuple[int, int, str]]:
        """(node or QUERY, span kind, text) in sequence order."""
        out = []
        for i in self.order:
            out.append((i, STRUCTURE, self.structure[i]))
            if self.features is not None:
                out.append((i, FEATURE, self.features[i]))
        out.append((QUERY, QUERY_SPAN, self.query))
        return out

    def text(self) -> str:
        return " ".join(t for _, _, t in self.spans())

    def reordered(self, order: Sequence[int]) -> SerializedSample:
        """Same annotations with node segments emitted in ``order``."""
        if sorted(order) != list(range(self.num_nodes)):
            raise SerializationError("order must be a permutation of node indices")
        return SerializedSample(self.structure, self.features, self.query, self.dialect, self.node_names, list(order))


def render_query(query: TaskQuery, names: Sequence[str]) -> str:
    return QUERY_TEMPLATES[query.task].format(*(names[u] for u in query.nodes))


def serialize(
    g: Graph,
    query: TaskQuery,
    dialect: Dialect | str = Dialect.CGDL,
    node_name_policy: NamePolicy | str = NamePolicy.CANONICAL,
    seed: int | np.random.Generator | None = None,
    node_names: Sequence[str] | None = None,
) -> SerializedSample:
    """Render ``g`` and ``query`` as per-node annotations plus a query sentence.

    ``node_names`` overrides the naming policy (used for induced subgraphs,
    which keep their parents' names).
    """
    try:
        dialect = Dialect(dialect)
    except ValueError:
        raise SerializationError(f"unknown dialect {dialect!r}") from None
    policy = NamePolicy(node_name_policy)
    if node_names is not None:
        names = [str(x) for x in node_names]
        if len(names) != g.num_nodes:
            raise SerializationError("node_names must name every node")
    elif policy is NamePolicy.CANONICAL:
        names = [str(i) for i in range(g.num_nodes)]
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        names = random_node_names(g.num_nodes, rng)

    adj = g.adjacency()
    structure = []
    for i in range(g.num_nodes):
        nbrs = adj[i]
        if dialect is Dialect.CGDL:
            if not nbrs:
                structure.append(f"Node {names[i]} is connected to nothing.")
                continue
            items = []
            for j in nbrs:
                feat = g.edge_feature(i, j)
                items.append(names[j] if feat is None else f"{names[j]} with {feat}")
            noun = "node" if len(nbrs) == 1 else "nodes"
            structure.append(f"Node {names[i]} is connected to {noun} {_join_items(items)}.")
        elif dialect is Dialect.ADJLIST:
            structure.append(f"{names[i]}: [" + ", ".join(names[j] for j in nbrs) + "]")
        else:
            if not nbrs:
                structure.append(f"Node {names[i]} is connected to nothing.")
                continue
            structure.append(", ".join(f"({names[i]}, {names[j]})" for j in nbrs))

    features = None
    if g.node_features is not None:
        features = []
        for i, feats in enumerate(g.node_features):
            body = "; ".join(f"{k}: {v}" for k, v in feats)
            features.append(f"Node {names[i]} features: {body}.")
    return SerializedSample(structure, features, render_query(query, names), dialect, names)


@dataclass(frozen=True)
class Vocabulary:
    """Token <-> id bijection.

    Layout: ``<pad>`` = 0, ``<unk>`` = 1, then the numeric node names
    ``"0" .. str(num_node_tokens - 1)``, then every other token in
    lexicographic order.
    """

    tokens: tuple[str, ...]
    num_node_tokens: int = 0

    def __post_init__(self):
        if self.tokens[:2] != (PAD, UNK):
            raise ValueError("vocabulary must start with <pad>, <unk>")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, 1)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self._index.get(w, 1) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def extended(self, words: Iterable[str]) -> Vocabulary:
        """New vocabulary with unseen ``words`` appended (existing ids unchanged)."""
        extra = sorted({w for w in words if w not in self._index})
        return Vocabulary(self.tokens + tuple(extra), self.num_node_tokens)


def build_vocabulary(corpus: Iterable[SerializedSample], num_node_tokens: int | None = None) -> Vocabulary:
    """Word-level vocabulary over a corpus of rendered samples.

    ``num_node_tokens`` reserves ids for "0".."N-1"; by default N is the
    largest node count in the corpus.
    """
    words: set[str] = set()
    max_nodes = 0
    seen_any = False
    for s in corpus:
        seen_any = True
        max_nodes = max(max_nodes, s.num_nodes)
        words.update(split_words(s.text()))
    if not seen_any:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    n = max_nodes if num_node_tokens is None else num_node_tokens
    numeric = [str(i) for i in range(n)]
    rest = sorted(words - set(numeric) - {PAD, UNK})
    return Vocabulary((PAD, UNK, *numeric, *rest), n)


@dataclass
class TokenizedSample:
    token_ids: np.ndarray
    seg_node: np.ndarray  # node index per token, QUERY (-1) for the query span
    seg_kind: np.ndarray  # STRUCTURE / FEATURE / QUERY_SPAN per token
    num_nodes: int
    label: int = -1
    gt_nodes: frozenset[int] | None = None
    query_nodes: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.token_ids)

    def spans(self) -> list[tuple[int, int, int, int]]:
        """Contiguous runs as (start, end, node_or_query, kind)."""
        out = []
        start = 0
        n = len(self.token_ids)
        for t in range(1, n + 1):
            if t == n or self.seg_node[t] != self.seg_node[start] or self.seg_kind[t] != self.seg_kind[start]:
                out.append((start, t, int(self.seg_node[start]), int(self.seg_kind[start])))
                start = t
        return out

    def segment_lengths(self) -> list[int]:
        """Token count of each node segment (structure + feature), then the query."""
        counts: dict[int, int] = {}
        for node in self.seg_node:
            counts[int(node)] = counts.get(int(node), 0) + 1
        return [counts[k] for k in sorted(k for k in counts if k != QUERY)] + [counts[QUERY]]


def tokenize(
    s: SerializedSample,
    vocab: Vocabulary,
    max_positions: int | None = None,
    label: int = -1,
    gt_nodes: Iterable[int] | None = None,
    query_nodes: Sequence[int] = (),
) -> TokenizedSample:
    ids: list[int] = []
    seg_node: list[int] = []
    seg_kind: list[int] = []
    for node, kind, text in s.spans():
        words = split_words(text)
        if not words:
            raise SerializationError(f"empty {SPAN_KINDS[kind]} span for node {node}")
        ids.extend(vocab.encode(words))
        seg_node.extend([node] * len(words))
        seg_kind.extend([kind] * len(words))
    if max_positions is not None and len(ids) > max_positions:
        raise SequenceTooLong(len(ids), max_positions)
    return TokenizedSample(
        np.asarray(ids, dtype=np.int64),
        np.asarray(seg_node, dtype=np.int64),
        np.asarray(seg_kind, dtype=np.int64),
        s.num_nodes,
        label,
        None if gt_nodes is None else frozenset(int(x) for x in gt_nodes),
        tuple(int(x) for x in query_nodes),
    )


def detokenize(t: TokenizedSample, vocab: Vocabulary) -> str:
    return " ".join(vocab.decode(t.token_ids))


def tokenize_spans(spans: Sequence[Sequence[int]], text: str, vocab: Vocabulary) -> TokenizedSample:
    """Rebuild a TokenizedSample from stored text and (start, end, node, kind) spans."""
    words = split_words(text)
    seg_node = np.full(len(words), -2, dtype=np.int64)
    seg_kind = np.full(len(words), -1, dtype=np.int64)
    prev_end = 0
    for start, end, node, kind in spans:
        if start != prev_end or end <= start or end > len(words):
            raise SerializationError(f"span ({start}, {end}) does not continue a contiguous cover")
        seg_node[start:end] = node
        seg_kind[start:end] = kind
        prev_end = end
    if prev_end != len(words):
        raise SerializationError(f"spans cover {prev_end} of {len(words)} tokens")
    num_nodes = len({int(n) for n in seg_node if n != QUERY})
    return TokenizedSample(np.asarray(vocab.encode(words), dtype=np.int64), seg_node, seg_kind, num_nodes)
