"""Balanced graph-reasoning benchmarks: generation, OOD variants, JSONL persistence."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .graphs import (
    FAMILIES,
    Graph,
    GraphonKind,
    GraphonSpec,
    GraphError,
    Permutation,
    Task,
    TaskQuery,
    _MIN_NODES,
    generate_graph,
    oracle,
    permute,
)
from .text import (
    Dialect,
    NamePolicy,
    SerializedSample,
    TokenizedSample,
    Vocabulary,
    build_vocabulary,
    serialize,
    split_words,
    tokenize,
    tokenize_spans,
)

DATASET_VERSION = 1
SPLITS = ("train", "val", "test")

# full-scale class counts and dataset sizes per task (40-node graphs)
PAPER_CLASSES = {
    Task.NODE_DEGREE: 39, Task.EDGE_EXISTENCE: 2, Task.SHORTEST_DISTANCE: 6, Task.REACHABLE: 2,
    Task.CYCLE: 2, Task.EDGE_COUNT: 70, Task.COMPONENTS: 38,
}
PAPER_SIZES = {
    Task.NODE_DEGREE: 8000, Task.EDGE_EXISTENCE: 4000, Task.SHORTEST_DISTANCE: 20000, Task.REACHABLE: 4000,
    Task.CYCLE: 4000, Task.EDGE_COUNT: 14000, Task.COMPONENTS: 19000,
}
DESK_SIZES = {
    Task.NODE_DEGREE: 2000, Task.EDGE_EXISTENCE: 2000, Task.SHORTEST_DISTANCE: 4000, Task.REACHABLE: 2000,
    Task.CYCLE: 2000, Task.EDGE_COUNT: 2800, Task.COMPONENTS: 3000,
}
MAX_DISTANCE_CLASS = 5


class DatasetError(ValueError):
    pass


class ClassStarvation(DatasetError):
    def __init__(self, task: Task, split: str, label: int, have: int, want: int):
        self.label = label
        super().__init__(
            f"{task.value}/{split}: class {label} reached only {have}/{want} samples within the retry budget"
        )


class DatasetFormatError(DatasetError):
    def __init__(self, line: int, field_name: str, message: str):
        self.line = line
        self.field = field_name
        super().__init__(f"line {line}, field {field_name!r}: {message}")


class VersionMismatch(DatasetError):
    def __init__(self, expected: int, found):
        self.expected = expected
        self.found = found
        super().__init__(f"dataset version mismatch: expected {expected}, found {found}")


def default_num_classes(task: Task | str, max_nodes: int) -> int:
    """Class count implied by the class maps for graphs of up to ``max_nodes`` nodes.

    With ``max_nodes=40`` this reproduces ``PAPER_CLASSES`` except for edge
    count, which the full-scale setting caps at 70 classes (700 edges).
    """
    task = Task(task)
    if task is Task.NODE_DEGREE:
        return max_nodes - 1
    if task is Task.COMPONENTS:
        return max_nodes - 2
    if task is Task.SHORTEST_DISTANCE:
        return MAX_DISTANCE_CLASS + 1
    if task is Task.EDGE_COUNT:
        return math.ceil(max_nodes * (max_nodes - 1) / 2 / 10)
    return 2


@dataclass(frozen=True)
class TaskSpec:
    task: Task
    num_classes: int
    size: int
    max_nodes: int

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if self.num_classes < 2 or self.size < 1 or self.max_nodes < 2:
            raise DatasetError(f"invalid task spec {self}")

    @classmethod
    def preset(cls, task: Task | str, preset: str = "desk", **overrides) -> TaskSpec:
        task = Task(task)
        if preset == "paper":
            base = dict(num_classes=PAPER_CLASSES[task], size=PAPER_SIZES[task], max_nodes=40)
        elif preset == "desk":
            base = dict(num_classes=default_num_classes(task, 12), size=DESK_SIZES[task], max_nodes=12)
        else:
            raise KeyError(f"unknown dataset preset {preset!r}")
        base.update(overrides)
        return cls(task, **base)

    def class_of(self, answer) -> int | None:
        """Class index for an oracle answer, or None when outside the class range."""
        t = self.task
        if t in (Task.EDGE_EXISTENCE, Task.REACHABLE, Task.CYCLE):
            c = int(bool(answer))
        elif t is Task.SHORTEST_DISTANCE:
            if answer == math.inf:
                c = 0
            elif 1 <= answer <= MAX_DISTANCE_CLASS:
                c = int(answer)
            else:
                return None
        elif t is Task.EDGE_COUNT:
            if answer < 1:
                return None
            c = math.ceil(answer / 10) - 1
        elif t is Task.COMPONENTS:
            c = int(answer) - 1
        else:
            c = int(answer)
        return c if 0 <= c < self.num_classes else None

    def describe_class_map(self) -> str:
        return {
            Task.NODE_DEGREE: "class = degree",
            Task.EDGE_EXISTENCE: "class = int(edge exists)",
            Task.SHORTEST_DISTANCE: "class 0 = unreachable, class d = distance d (1..5)",
            Task.REACHABLE: "class = int(reachable)",
            Task.CYCLE: "class = int(has cycle)",
            Task.EDGE_COUNT: "class = ceil(edges / 10) - 1",
            Task.COMPONENTS: "class = components - 1",
        }[self.task]


@dataclass(frozen=True)
class GenConfig:
    min_nodes: int = 5
    max_nodes: int = 12
    families: tuple[str, ...] = FAMILIES
    graphon_kinds: tuple[str, ...] = tuple(k.value for k in GraphonKind)
    dialect: str = "cgdl"
    name_policy: str = "canonical"
    max_positions: int = 512
    attempts_per_sample: int = 400

    def __post_init__(self):
        if not 2 <= self.min_nodes <= self.max_nodes:
            raise DatasetError("need 2 <= min_nodes <= max_nodes")
        bad = set(self.families) - set(FAMILIES)
        if bad:
            raise DatasetError(f"unknown families {sorted(bad)}")


@dataclass
class Example:
    id: int
    split: str
    graph: Graph | None
    query: TaskQuery | None
    label: int
    gt_nodes: frozenset[int] | None
    serialized: SerializedSample | None
    sample: TokenizedSample
    text: str

    def segments(self) -> list[list[int]]:
        return [list(s) for s in self.sample.spans()]


@dataclass
class Dataset:
    task: TaskSpec
    examples: list[Example]
    vocabulary: Vocabulary
    provenance: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Example]:
        return [e for e in self.examples if e.split == name]

    def samples(self, name: str | None = None) -> list[TokenizedSample]:
        return [e.sample for e in self.examples if name is None or e.split == name]

    @property
    def splits(self) -> dict[str, list[int]]:
        return {s: [i for i, e in enumerate(self.examples) if e.split == s] for s in SPLITS}

    @property
    def dialect(self) -> Dialect:
        return Dialect(self.provenance.get("dialect", "cgdl"))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.task, self.vocabulary, self.provenance) != (other.task, other.vocabulary, other.provenance):
            return False
        if len(self.examples) != len(other.examples):
            return False
        for a, b in zip(self.examples, other.examples):
            if (a.id, a.split, a.text, a.label, a.gt_nodes, a.graph, a.query, a.segments()) != (
                b.id, b.split, b.text, b.label, b.gt_nodes, b.graph, b.query, b.segments()
            ):
                return False
            if not np.array_equal(a.sample.token_ids, b.sample.token_ids):
                return False
        return True


# ---------------------------------------------------------------------------
# generation

def _random_graph(cfg: GenConfig, n: int, rng: np.random.Generator) -> Graph:
    families = [f for f in cfg.families if _MIN_NODES[f] <= n]
    family = families[int(rng.integers(len(families)))]
    spec = None
    if family == "graphon":
        spec = GraphonSpec.sample(cfg.graphon_kinds[int(rng.integers(len(cfg.graphon_kinds)))], rng)
    return generate_graph(family, n, spec, rng)


def base_query(task: Task) -> TaskQuery:
    if task in (Task.EDGE_EXISTENCE, Task.SHORTEST_DISTANCE, Task.REACHABLE):
        return TaskQuery(task, (0, 1))
    if task is Task.NODE_DEGREE:
        return TaskQuery(task, (0,))
    return TaskQuery(task)


def draw_labeled_graph(spec: TaskSpec, cfg: GenConfig, n: int, rng: np.random.Generator):
    """One random (graph, query, class, gt) draw; class may be None (out of range)."""
    g = _random_graph(cfg, n, rng)
    # scramble the generator's canonical labelling so nodes 0/1 are arbitrary
    g = permute(g, Permutation.random(n, rng))
    q = base_query(spec.task)
    # hide the fixed query positions behind a final relabelling
    p = Permutation.random(n, rng)
    g, q = permute(g, p), q.permuted(p)
    ans = oracle(g, q)
    return g, q, spec.class_of(ans.value), ans.gt_nodes


def _quotas(total: int, num_classes: int) -> list[int]:
    base, extra = divmod(total, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def _split_sizes(size: int) -> dict[str, int]:
    n_val = n_test = size // 10
    return {"train": size - n_val - n_test, "val": n_val, "test": n_test}


def build_dataset(spec: TaskSpec, gen_config: GenConfig | None = None, seed: int = 0) -> Dataset:
    """Rejection-sample a class-balanced dataset with 80/10/10 splits.

    Train and val graphs have ``min_nodes..max_nodes`` nodes; test graphs
    have exactly ``max_nodes``.
    """
    cfg = gen_config or GenConfig(max_nodes=spec.max_nodes)
    if cfg.max_nodes != spec.max_nodes:
        cfg = dataclasses.replace(cfg, max_nodes=spec.max_nodes)
    if spec.task is Task.NODE_DEGREE and spec.num_classes > cfg.max_nodes - 1:
        raise DatasetError("degree classes must stay below max_nodes - 1")
    root = np.random.SeedSequence(seed)
    split_seeds = dict(zip(SPLITS, root.spawn(len(SPLITS))))
    drawn: list[tuple[str, Graph, TaskQuery, int, frozenset | None]] = []
    for split, count in _split_sizes(spec.size).items():
        rng = np.random.default_rng(split_seeds[split])
        quotas = _quotas(count, spec.num_classes)
        have = [0] * spec.num_classes
        budget = cfg.attempts_per_sample * max(count, 1)
        bucket: list[tuple] = []
        attempts = 0
        while sum(have) < count:
            if attempts >= budget:
                starving = min(range(spec.num_classes), key=lambda c: have[c] - quotas[c])
                raise ClassStarvation(spec.task, split, starving, have[starving], quotas[starving])
            attempts += 1
            n = cfg.max_nodes if split == "test" else int(rng.integers(cfg.min_nodes, cfg.max_nodes + 1))
            g, q, c, gt = draw_labeled_graph(spec, cfg, n, rng)
            if c is None or have[c] >= quotas[c]:
                continue
            have[c] += 1
            bucket.append((split, g, q, c, gt))
        order = rng.permutation(len(bucket))
        drawn.extend(bucket[i] for i in order)

    dialect = Dialect(cfg.dialect)
    policy = NamePolicy(cfg.name_policy)
    name_rng = np.random.default_rng(root.spawn(1)[0])
    rendered = [serialize(g, q, dialect, policy, name_rng) for _, g, q, _, _ in drawn]
    vocab = build_vocabulary(rendered, num_node_tokens=cfg.max_nodes)
    examples = []
    for i, ((split, g, q, c, gt), s) in enumerate(zip(drawn, rendered)):
        tok = tokenize(s, vocab, cfg.max_positions, label=c, gt_nodes=gt, query_nodes=q.nodes)
        examples.append(Example(i, split, g, q, c, gt, s, tok, s.text()))
    provenance = {
        "seed": seed,
        "dialect": dialect.value,
        "name_policy": policy.value,
        "class_map": spec.describe_class_map(),
        "gen_config": _jsonable(dataclasses.asdict(cfg)),
    }
    return Dataset(spec, examples, vocab, provenance)


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d))


def reserialize(ex: Example, dialect: Dialect | str, names: Sequence[str] | None, vocab: Vocabulary,
                graph: Graph | None = None, query: TaskQuery | None = None,
                max_positions: int | None = None) -> tuple[SerializedSample, TokenizedSample]:
    """Render an example's graph again (optionally a different graph/query, dialect or names)."""
    g = graph if graph is not None else ex.graph
    q = query if query is not None else ex.query
    if g is None or q is None:
        raise DatasetError(f"example {ex.id} carries no graph to re-serialize")
    s = serialize(g, q, dialect, node_names=names if names is not None else [str(i) for i in range(g.num_nodes)])
    t = tokenize(s, vocab, max_positions, label=ex.label, gt_nodes=ex.gt_nodes, query_nodes=q.nodes)
    return s, t


def make_ood_variant(
    d: Dataset,
    kind: str,
    seed: int = 0,
    dialect: Dialect | str | None = None,
    force_names: Sequence[str] | None = None,
) -> Dataset:
    """Re-render the test split with random node names or another dialect.

    Labels and ground-truth sets are unchanged; the vocabulary is extended
    with any new words (the model maps ids beyond its table to ``<unk>``).
    ``force_names`` pins the renaming map (node index -> name).
    """
    if kind not in ("renamed_nodes", "dialect_shift"):
        raise DatasetError(f"unknown OOD kind {kind!r}")
    test = d.split("test")
    if not test:
        raise DatasetError("dataset has no test split")
    rng = np.random.default_rng(seed)
    if kind == "dialect_shift":
        target = Dialect(dialect) if dialect is not None else (Dialect.EDGES if d.dialect is not Dialect.EDGES else Dialect.CGDL)
    else:
        target = Dialect(dialect) if dialect is not None else d.dialect
    rendered = []
    for ex in test:
        if ex.graph is None:
            raise DatasetError(f"example {ex.id} carries no graph")
        if force_names is not None:
            names = list(force_names[: ex.graph.num_nodes])
        elif kind == "renamed_nodes":
            names = None
        else:
            names = ex.serialized.node_names if ex.serialized else [str(i) for i in range(ex.graph.num_nodes)]
        if names is None:
            s = serialize(ex.graph, ex.query, target, NamePolicy.RANDOM_STRING, rng)
        else:
            s = serialize(ex.graph, ex.query, target, node_names=names)
        rendered.append(s)
    vocab = d.vocabulary.extended(w for s in rendered for w in split_words(s.text()))
    examples = []
    for ex, s in zip(test, rendered):
        tok = tokenize(s, vocab, label=ex.label, gt_nodes=ex.gt_nodes, query_nodes=ex.query.nodes)
        examples.append(Example(ex.id, "test", ex.graph, ex.query, ex.label, ex.gt_nodes, s, tok, s.text()))
    provenance = dict(d.provenance, ood=kind, ood_seed=seed, dialect=target.value)
    if kind == "renamed_nodes" and force_names is None:
        provenance["name_policy"] = NamePolicy.RANDOM_STRING.value
    return Dataset(d.task, examples, vocab, provenance)


# ---------------------------------------------------------------------------
# persistence

def vocab_path_for(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".vocab.json")


def _graph_record(g: Graph | None, q: TaskQuery | None, names) -> dict | None:
    if g is None:
        return None
    rec = {"num_nodes": g.num_nodes, "edges": sorted([list(e) for e in g.edges])}
    if g.node_features is not None:
        rec["node_features"] = [[list(kv) for kv in f] for f in g.node_features]
    if g.edge_features:
        rec["edge_features"] = [[i, j, v] for (i, j), v in sorted(g.edge_features.items())]
    if q is not None:
        rec["query"] = {"task": q.task.value, "nodes": list(q.nodes)}
    if names is not None:
        rec["node_names"] = list(names)
    return rec


def save(d: Dataset, path: str | Path) -> None:
    """Write the dataset as JSON Lines plus a sibling ``.vocab.json`` token array."""
    path = Path(path)
    header = {
        "version": DATASET_VERSION,
        "task": d.task.task.value,
        "num_classes": d.task.num_classes,
        "size": d.task.size,
        "max_nodes": d.task.max_nodes,
        "dialect": d.provenance.get("dialect", "cgdl"),
        "seed": d.provenance.get("seed"),
        "provenance": d.provenance,
        "num_node_tokens": d.vocabulary.num_node_tokens,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in d.examples:
            rec = {
                "id": ex.id,
                "split": ex.split,
                "text": ex.text,
                "segments": ex.segments(),
                "label": ex.label,
                "gt_nodes": None if ex.gt_nodes is None else sorted(ex.gt_nodes),
                "graph": _graph_record(ex.graph, ex.query, ex.serialized.node_names if ex.serialized else None),
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(vocab_path_for(path), "w", encoding="utf-8") as f:
        json.dump(list(d.vocabulary.tokens), f)


def _require(rec: dict, key: str, line: int, kind):
    if key not in rec:
        raise DatasetFormatError(line, key, "missing")
    val = rec[key]
    if kind is not None and not isinstance(val, kind):
        raise DatasetFormatError(line, key, f"expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
    return val


def load(path: str | Path, vocab_path: str | Path | None = None) -> Dataset:
    path = Path(path)
    vpath = Path(vocab_path) if vocab_path else vocab_path_for(path)
    try:
        tokens = json.loads(vpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetFormatError(e.lineno, "vocabulary", str(e)) from None
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(1, "header", "empty file")

    def parse(i):
        try:
            rec = json.loads(lines[i])
        except json.JSONDecodeError as e:
            raise DatasetFormatError(i + 1, "json", e.msg) from None
        if not isinstance(rec, dict):
            raise DatasetFormatError(i + 1, "json", "line is not an object")
        return rec

    header = parse(0)
    version = header.get("version")
    if version != DATASET_VERSION:
        raise VersionMismatch(DATASET_VERSION, version)
    try:
        task = TaskSpec(_require(header, "task", 1, str), _require(header, "num_classes", 1, int),
                        header.get("size", 1), header.get("max_nodes", 2))
    except ValueError as e:
        raise DatasetFormatError(1, "task", str(e)) from None
    vocab = Vocabulary(tuple(tokens), header.get("num_node_tokens", 0))
    dialect = Dialect(header.get("dialect", "cgdl"))
    examples = []
    for i in range(1, len(lines)):
        ln = i + 1
        rec = parse(i)
        ex_id = _require(rec, "id", ln, int)
        split = _require(rec, "split", ln, str)
        if split not in SPLITS:
            raise DatasetFormatError(ln, "split", f"unknown split {split!r}")
        text = _require(rec, "text", ln, str)
        segments = _require(rec, "segments", ln, list)
        label = _require(rec, "label", ln, int)
        gt = rec.get("gt_nodes")
        try:
            tok = tokenize_spans(segments, text, vocab)
        except (ValueError, TypeError) as e:
            raise DatasetFormatError(ln, "segments", str(e)) from None
        graph = query = serialized = None
        grec = rec.get("graph")
        if grec is not None:
            try:
                graph = Graph.from_edges(
                    grec["num_nodes"], grec["edges"], grec.get("node_features"),
                    {(a, b): v for a, b, v in grec.get("edge_features", [])} or None,
                )
                if "query" in grec:
                    query = TaskQuery(grec["query"]["task"], grec["query"]["nodes"])
                    names = grec.get("node_names") or [str(k) for k in range(graph.num_nodes)]
                    serialized = serialize(graph, query, dialect, node_names=names)
            except (KeyError, TypeError, GraphError) as e:
                raise DatasetFormatError(ln, "graph", str(e)) from None
        tok.label = label
        tok.gt_nodes = None if gt is None else frozenset(gt)
        tok.query_nodes = query.nodes if query is not None else ()
        examples.append(Example(ex_id, split, graph, query, label, tok.gt_nodes, serialized, tok, text))
    return Dataset(task, examples, vocab, header.get("provenance", {}))


def subset(d: Dataset, examples: Iterable[Example]) -> Dataset:
    return Dataset(d.task, list(examples), d.vocabulary, dict(d.provenance))
