"""Node-importance attribution, Recall@k, layerwise query attention and
the sufficiency fidelity metric."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .datasets import Dataset, Example, reserialize
from .graphs import bfs_distances
from .model import ModelParams, forward
from .text import TokenizedSample
from .training import predictions


class Method(str, Enum):
    QUERY_ATTENTION = "query_attention"
    SALIENCY = "saliency"
    INPUT_X_GRADIENT = "input_x_gradient"
    ORACLE = "oracle"
    RANDOM = "random"


def rank_nodes(scores: np.ndarray) -> np.ndarray:
    """Descending score; ties broken by the lower node index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


@dataclass
class InterpretationResult:
    node_scores: np.ndarray
    ranking: np.ndarray
    method: Method
    layer: int | str | None = None
    self_score: float | None = None  # query slot's attention to itself

    def __post_init__(self):
        self.node_scores = np.asarray(self.node_scores, dtype=np.float64)
        if not np.all(np.isfinite(self.node_scores)):
            raise ValueError("node scores must be finite")
        if sorted(self.ranking.tolist()) != list(range(len(self.node_scores))):
            raise ValueError("ranking must be a permutation of the nodes")

    @classmethod
    def from_scores(cls, scores, method: Method, layer=None, self_score=None) -> InterpretationResult:
        scores = np.asarray(scores, dtype=np.float64)
        return cls(scores, rank_nodes(scores), method, layer, self_score)

    def top(self, k: int) -> list[int]:
        return [int(x) for x in self.ranking[:k]]


# ---------------------------------------------------------------------------
# explainers

def query_attention_importance(sample: TokenizedSample, params: ModelParams,
                               layer_policy: str = "last") -> InterpretationResult:
    """Head-averaged attention from the query slot to each node slot in the
    global block, at the last layer or averaged over layers."""
    with ad.no_grad():
        res = forward([sample], params)
    rows = [a[0].mean(axis=0) for a in res.query_attention]  # per layer [S]
    if layer_policy == "last":
        row, layer = rows[-1], len(rows) - 1
    elif layer_policy == "mean_layers":
        row, layer = np.mean(rows, axis=0), "mean"
    else:
        raise ValueError(f"unknown layer policy {layer_policy!r}")
    scores = np.zeros(sample.num_nodes)
    for slot, node in enumerate(res.batch.slot_node[0]):
        if node >= 0:
            scores[node] = row[slot]
    return InterpretationResult.from_scores(scores, Method.QUERY_ATTENTION, layer, float(row[-1]))


def layer_node_attention(sample: TokenizedSample, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Per global layer: node scores [layers, n] and the query self score [layers]."""
    with ad.no_grad():
        res = forward([sample], params)
    nodes = res.batch.slot_node[0]
    out = np.zeros((len(res.query_attention), sample.num_nodes))
    self_mass = np.zeros(len(res.query_attention))
    for layer, a in enumerate(res.query_attention):
        row = a[0].mean(axis=0)
        for slot, node in enumerate(nodes):
            if node >= 0:
                out[layer, node] = row[slot]
        self_mass[layer] = row[-1]
    return out, self_mass


def gradient_importance(sample: TokenizedSample, params: ModelParams,
                        method: str = "saliency") -> InterpretationResult:
    """Gradient of the predicted-class logit w.r.t. the input token
    embeddings. Token score is the gradient's L2 norm (saliency) or the sum
    of gradient times embedding; a node's score is the mean over its tokens."""
    method = Method(method)
    if method not in (Method.SALIENCY, Method.INPUT_X_GRADIENT):
        raise ValueError(f"{method.value} is not a gradient method")
    params.zero_grad()
    res = forward([sample], params, train=False)
    logits = res.logits
    pred = int(np.argmax(logits.data[0]))
    onehot = np.zeros_like(logits.data)
    onehot[0, pred] = 1.0
    logits.backward(onehot)
    emb = res.token_embeddings
    grad = emb.grad if emb.grad is not None else np.zeros_like(emb.data)
    params.zero_grad()
    order = res.batch.compact_index(0)
    g = grad[order].astype(np.float64)
    e = emb.data[order].astype(np.float64)
    if method is Method.SALIENCY:
        tok = np.linalg.norm(g, axis=1)
    else:
        tok = np.sum(g * e, axis=1)
    scores = np.zeros(sample.num_nodes)
    for node in range(sample.num_nodes):
        mask = sample.seg_node == node
        if mask.any():
            scores[node] = tok[mask].mean()
    return InterpretationResult.from_scores(scores, method)


def oracle_importance(ex: Example) -> InterpretationResult:
    """Ground-truth nodes first, then the rest by hop distance to the
    ground-truth set (unreachable last), ties by node index."""
    g = ex.graph
    gt = sorted(ex.gt_nodes or ())
    adj = g.adjacency()
    dist = np.full(g.num_nodes, np.inf)
    for u in gt:
        dist = np.minimum(dist, bfs_distances(adj, u))
    scores = np.where(np.isinf(dist), -float(g.num_nodes + 1), -dist)
    return InterpretationResult.from_scores(scores, Method.ORACLE)


def random_importance(n: int, rng: np.random.Generator) -> InterpretationResult:
    return InterpretationResult.from_scores(rng.random(n), Method.RANDOM)


# ---------------------------------------------------------------------------
# recall

def recall_at_k(result: InterpretationResult, gt_nodes: Iterable[int]) -> np.ndarray:
    """Recall(k) = |top-k ∩ gt| / |gt| for k = 1..n."""
    gt = {int(x) for x in gt_nodes}
    if not gt:
        raise ValueError("ground-truth set is empty")
    hits = np.cumsum([int(r) in gt for r in result.ranking])
    return hits / len(gt)


def random_recall_baseline(n: int, gt_size: int) -> np.ndarray:
    """Expected Recall(k) of a uniformly random ranking: k / n."""
    del gt_size  # the expectation does not depend on it
    return np.arange(1, n + 1) / n


# ---------------------------------------------------------------------------
# fidelity

@dataclass
class FidelityReport:
    sparsity: list[float]
    fidelity: list[float]
    counts: list[int]  # samples evaluated per point
    notes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sparsity", "fidelity"])
        for s, f in zip(self.sparsity, self.fidelity):
            w.writerow([f"{s:.4f}", repr(float(f))])
        return buf.getvalue()


def restrict(ex: Example, dataset: Dataset, keep: Iterable[int],
             max_positions: int | None = None) -> TokenizedSample:
    """Re-serialize the example using only the induced subgraph on ``keep``
    (the queried nodes are always kept), preserving original node names."""
    kept = set(int(x) for x in keep) | set(ex.query.nodes)
    sub, old = ex.graph.induced_subgraph(kept)
    new_of = {o: i for i, o in enumerate(old)}
    q = type(ex.query)(ex.query.task, tuple(new_of[u] for u in ex.query.nodes))
    names = ex.serialized.node_names if ex.serialized is not None else [str(i) for i in range(ex.graph.num_nodes)]
    _, tok = reserialize(ex, dataset.dialect, [names[o] for o in old], dataset.vocabulary, graph=sub, query=q,
                         max_positions=max_positions)
    return tok


def fidelity(examples: Sequence[Example], dataset: Dataset, params: ModelParams,
             result_provider: Callable[[Example], InterpretationResult],
             sparsity_grid: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8),
             batch_size: int = 64) -> FidelityReport:
    """Mean of 1[pred = y] - 1[pred on top-k nodes = y] per sparsity, where
    k = round((1 - s) n)."""
    if not examples:
        raise ValueError("no examples")
    labels = np.array([e.label for e in examples])
    base = predictions([e.sample for e in examples], params, batch_size) == labels
    results = [result_provider(e) for e in examples]
    report = FidelityReport([], [], [])
    for s in sparsity_grid:
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"sparsity {s} outside [0, 1]")
        restricted, idx = [], []
        for i, (e, r) in enumerate(zip(examples, results)):
            n = e.graph.num_nodes
            k = int(round((1.0 - s) * n))
            if k == 0:
                continue
            if k >= n:
                restricted.append(e.sample)
            else:
                restricted.append(restrict(e, dataset, r.top(k), params.config.max_positions))
            idx.append(i)
        if not idx:
            report.notes.append(f"sparsity {s}: k = 0 for every sample, skipped")
            continue
        if len(idx) < len(examples):
            report.notes.append(f"sparsity {s}: {len(examples) - len(idx)} samples with k = 0 skipped")
        kept = predictions(restricted, params, batch_size) == labels[idx]
        report.sparsity.append(float(s))
        report.fidelity.append(float(np.mean(base[idx].astype(float) - kept.astype(float))))
        report.counts.append(len(idx))
    return report


# ---------------------------------------------------------------------------
# layerwise attention

@dataclass
class LayerCurve:
    gt: list[float]  # per layer, mean attention on a ground-truth node
    non_gt: list[float]  # per layer, mean attention on a non-ground-truth node
    self_mass: list[float]  # per layer, mean attention of the query slot on itself
    gt_mass: list[float] = field(default_factory=list)  # per layer, mean total mass on GT nodes
    non_gt_mass: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "group", "mean_score"])
        for layer in range(len(self.gt)):
            w.writerow([layer, "gt", repr(self.gt[layer])])
            w.writerow([layer, "non_gt", repr(self.non_gt[layer])])
            w.writerow([layer, "query_self", repr(self.self_mass[layer])])
        return buf.getvalue()


def layerwise_attention_curve(samples: Sequence[TokenizedSample], params: ModelParams) -> LayerCurve:
    """Head mean, then per-sample mean over nodes in each group, then mean over samples."""
    per_gt, per_non, per_self, mass_gt, mass_non = [], [], [], [], []
    for s in samples:
        if not s.gt_nodes:
            raise ValueError("sample has no ground-truth set")
        scores, self_mass = layer_node_attention(s, params)
        gt = np.zeros(s.num_nodes, dtype=bool)
        gt[list(s.gt_nodes)] = True
        per_gt.append(scores[:, gt].mean(axis=1))
        per_non.append(scores[:, ~gt].mean(axis=1) if (~gt).any() else np.full(len(scores), np.nan))
        per_self.append(self_mass)
        mass_gt.append(scores[:, gt].sum(axis=1))
        mass_non.append(scores[:, ~gt].sum(axis=1))
    return LayerCurve(
        [float(x) for x in np.mean(per_gt, axis=0)],
        [float(x) for x in np.nanmean(per_non, axis=0)],
        [float(x) for x in np.mean(per_self, axis=0)],
        [float(x) for x in np.mean(mass_gt, axis=0)],
        [float(x) for x in np.mean(mass_non, axis=0)],
    )


def recall_csv(rows: Iterable[tuple[int, np.ndarray]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "k", "recall"])
    for sid, curve in rows:
        for k, r in enumerate(curve, start=1):
            w.writerow([sid, k, repr(float(r))])
    return buf.getvalue()


__all__ = [
    "Method", "InterpretationResult", "rank_nodes", "query_attention_importance", "layer_node_attention",
    "gradient_importance", "oracle_importance", "random_importance", "recall_at_k", "random_recall_baseline",
    "FidelityReport", "restrict", "fidelity", "LayerCurve", "layerwise_attention_curve", "recall_csv",
]
