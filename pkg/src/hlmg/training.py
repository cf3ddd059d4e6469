"""Training loop, evaluation, the relabeling robustness protocol, the
local-embedding similarity analysis and the attention complexity benchmark."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .datasets import Dataset, Example, TaskSpec, build_dataset, reserialize
from .graphs import Graph, Permutation, Task, bfs_distances, permute
from .model import (
    ModelConfig,
    ModelParams,
    attention_flops,
    attention_kernel,
    forward,
    make_batch,
    model_preset,
)
from .text import TokenizedSample


class TrainingDiverged(RuntimeError):
    """The loss (or a gradient) stopped being finite."""

    def __init__(self, step: int, last_finite_step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}; last finite step {last_finite_step}")
        self.step = step
        self.last_finite_step = last_finite_step


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    precision: str = "float32"
    eps: float = 1e-8
    clip_norm: float | None = 1.0  # None disables clipping
    warmup_steps: int = 0
    schedule: str = "constant"  # or "cosine" (decay to 10% of lr)
    decay_matrices_only: bool = True  # biases, norms, alpha and embeddings' bias-like params skip decay
    eval_batch_size: int = 64

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unsupported precision {self.precision!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


TRAIN_PRESETS = {
    # settings used for the large pretrained models
    "paper": dict(lr=5e-6, weight_decay=0.1, beta1=0.9, beta2=0.95, epochs=5, batch_size=16,
                  schedule="constant", warmup_steps=0),
    # a randomly initialised desk model needs much larger steps
    "desk": dict(lr=1e-3, weight_decay=0.01, beta1=0.9, beta2=0.95, epochs=10, batch_size=16,
                 schedule="cosine", warmup_steps=100),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise KeyError(f"unknown train preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    return TrainConfig(**{**TRAIN_PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adam with decoupled weight decay.

    Each step: ``w -= lr * wd * w`` (for decayed tensors), then the usual
    bias-corrected Adam update ``w -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """

    def __init__(self, params: ModelParams | dict[str, ad.Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, decay_matrices_only: bool = True):
        self.tensors = params.tensors if isinstance(params, ModelParams) else params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = {k: (t.data.ndim >= 2 or not decay_matrices_only) for k, t in self.tensors.items()}
        self.m = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.tensors.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and self.decay[k]:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def global_grad_norm(params: ModelParams) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grads(params: ModelParams, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "cosine":
        span = max(1, total - cfg.warmup_steps)
        frac = min(1.0, (step - cfg.warmup_steps) / span)
        return cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))
    return cfg.lr


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    train_loss: list[float] = field(default_factory=list)  # per epoch
    val_accuracy: list[float] = field(default_factory=list)  # per epoch
    alpha: list[float] = field(default_factory=list)  # after each epoch
    best_epoch: int = -1  # 0-based
    best_val_accuracy: float = float("nan")
    test_accuracy: float | None = None
    steps: int = 0
    wall_time: float = 0.0
    stopped_early: bool = False  # the time budget ran out before the last epoch

    def rows(self) -> list[tuple[int, str, str, float]]:
        out = []
        for e, v in enumerate(self.train_loss):
            out.append((e + 1, "train", "loss", v))
        for e, v in enumerate(self.val_accuracy):
            out.append((e + 1, "val", "accuracy", v))
        for e, v in enumerate(self.alpha):
            out.append((e + 1, "train", "alpha", v))
        if self.test_accuracy is not None:
            out.append((self.best_epoch + 1, "test", "accuracy", self.test_accuracy))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for r in self.rows():
            w.writerow([r[0], r[1], r[2], repr(float(r[3]))])
        return buf.getvalue()

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def same_run(self, other: MetricsReport) -> bool:
        """Equality ignoring wall time."""
        a, b = self.to_json(), other.to_json()
        a.pop("wall_time")
        b.pop("wall_time")
        return json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.to_csv())
        (out / "metrics.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# training and evaluation

def _check_labels(samples: Sequence[TokenizedSample], num_classes: int) -> None:
    for s in samples:
        if not 0 <= s.label < num_classes:
            raise ValueError(f"label {s.label} outside [0, {num_classes})")


def predictions(samples: Sequence[TokenizedSample], params: ModelParams, batch_size: int = 64) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            logits = forward(samples[i:i + batch_size], params).logits.data
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(samples: Sequence[TokenizedSample], params: ModelParams, batch_size: int = 64) -> float:
    """Accuracy on a list of samples (eval mode, no dropout)."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = predictions(samples, params, batch_size)
    labels = np.array([s.label for s in samples])
    return float(np.mean(pred == labels))


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
          init: ModelParams | None = None, time_budget: float | None = None,
          log: Callable[[str], None] | None = None) -> tuple[ModelParams, MetricsReport]:
    """Train on the ``train`` split, keep the parameters with the best
    validation accuracy (ties go to the earlier epoch), and report test
    accuracy for that checkpoint if a test split exists.

    ``time_budget`` (seconds) stops training once another epoch would not
    fit, judged by the slowest epoch so far; the first epoch always runs.
    """
    cfg = train_config
    train_set = dataset.samples("train")
    val_set = dataset.samples("val")
    test_set = dataset.samples("test")
    if not train_set or not val_set:
        raise ValueError("dataset needs non-empty train and val splits")
    if model_config.dtype != cfg.precision:
        model_config = dataclasses.replace(model_config, dtype=cfg.precision)
    for split in (train_set, val_set, test_set):
        _check_labels(split, model_config.num_classes)

    params = init.astype(cfg.precision) if init is not None else ModelParams.init(model_config, seed=cfg.seed)
    opt = AdamW(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay, cfg.decay_matrices_only)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    report = MetricsReport()
    best_state = params.state()
    start = time.perf_counter()
    step = 0
    last_finite = -1
    slowest = 0.0
    for epoch in range(cfg.epochs):
        epoch_start = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = make_batch([train_set[i] for i in idx], params.config)
            res = forward(batch, params, train=True, rng=rng)
            loss = ad.cross_entropy(res.logits, batch.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, last_finite, value)
            params.zero_grad()
            loss.backward()
            if cfg.clip_norm is not None:
                norm = clip_grads(params, cfg.clip_norm)
            else:
                norm = global_grad_norm(params)
            if not math.isfinite(norm):
                raise TrainingDiverged(step, last_finite, norm)
            opt.step(lr_at(step, total, cfg))
            last_finite = step
            losses.append(value)
            step += 1
        params.zero_grad()
        val_acc = evaluate(val_set, params, cfg.eval_batch_size)
        report.train_loss.append(float(np.mean(losses)))
        report.val_accuracy.append(val_acc)
        report.alpha.append(params.alpha)
        if report.best_epoch < 0 or val_acc > report.best_val_accuracy:
            report.best_epoch = epoch
            report.best_val_accuracy = val_acc
            best_state = params.state()
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {report.train_loss[-1]:.4f} val {val_acc:.4f} "
                f"alpha {params.alpha:.3f} ({time.perf_counter() - start:.0f}s)")
        now = time.perf_counter()
        slowest = max(slowest, now - epoch_start)
        if time_budget is not None and now - start + slowest > time_budget and epoch + 1 < cfg.epochs:
            report.stopped_early = True
            break
    params.load_state(best_state)
    report.steps = step
    if test_set:
        report.test_accuracy = evaluate(test_set, params, cfg.eval_batch_size)
    report.wall_time = time.perf_counter() - start
    return params, report


# ---------------------------------------------------------------------------
# per-task desk recipes

# Model and optimiser overrides on top of the desk presets. Epoch counts
# let the cosine schedule finish inside ten CPU-minutes on 12-node graphs;
# a deeper global block is used for the multi-hop and counting tasks.
DESK_RECIPES: dict[Task, dict[str, dict]] = {
    Task.CYCLE: {"model": {}, "train": {"epochs": 36}},
    Task.EDGE_EXISTENCE: {"model": {}, "train": {"epochs": 36}},
    Task.NODE_DEGREE: {"model": {}, "train": {"epochs": 36}},
    Task.REACHABLE: {"model": {}, "train": {"epochs": 36}},
    Task.SHORTEST_DISTANCE: {"model": {"global_layers": 3}, "train": {"epochs": 18}},
    Task.EDGE_COUNT: {"model": {"global_layers": 3}, "train": {"epochs": 24}},
    Task.COMPONENTS: {"model": {"global_layers": 3}, "train": {"epochs": 23}},
}


@dataclass
class DeskRun:
    dataset: Dataset
    params: ModelParams
    report: MetricsReport
    seconds: float  # generation, training and test evaluation


def desk_run(task: Task | str, seed: int = 0, budget: float = 600.0,
             log: Callable[[str], None] | None = None) -> DeskRun:
    """Generate the desk dataset for ``task`` and train the desk recipe on
    it, keeping generation plus training inside ``budget`` seconds."""
    start = time.perf_counter()
    task = Task(task)
    dataset = build_dataset(TaskSpec.preset(task, "desk"), seed=seed)
    recipe = DESK_RECIPES[task]
    mc = model_preset("desk", len(dataset.vocabulary), dataset.task.num_classes, **recipe["model"])
    tc = train_preset("desk", **{**recipe["train"], "seed": seed})
    # leave room for the final test evaluation
    remaining = budget - (time.perf_counter() - start) - 15.0
    params, report = train(dataset, mc, tc, time_budget=remaining, log=log)
    return DeskRun(dataset, params, report, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# relabeling robustness

@dataclass
class RobustnessReport:
    baseline: float
    permuted: list[float]  # accuracy after each cumulative relabeling

    @property
    def drops(self) -> list[float]:
        return [self.baseline - a for a in self.permuted]

    @property
    def mean_drop(self) -> float:
        return float(np.mean(self.drops))

    @property
    def max_drop(self) -> float:
        return float(np.max(self.drops))

    def to_json(self) -> dict:
        return {"baseline": self.baseline, "permuted": self.permuted, "mean_drop": self.mean_drop,
                "max_drop": self.max_drop}


def permuted_samples(examples: Sequence[Example], dataset: Dataset, perms: Sequence[Permutation],
                     max_positions: int | None = None) -> list[TokenizedSample]:
    out = []
    for ex, p in zip(examples, perms):
        _, tok = reserialize(ex, dataset.dialect, None, dataset.vocabulary, graph=permute(ex.graph, p),
                             query=ex.query.permuted(p), max_positions=max_positions)
        out.append(tok)
    return out


def robustness_eval(dataset: Dataset, params: ModelParams, num_permutations: int = 10, seed: int = 0,
                    split: str = "test", identity: bool = False, batch_size: int = 64) -> RobustnessReport:
    """Relabel every graph ``num_permutations`` times, each new relabeling
    applied on top of the previous one, and re-evaluate after each.

    The drop is baseline minus permuted accuracy, so it can be negative.
    """
    examples = dataset.split(split)
    if not examples:
        raise ValueError(f"split {split!r} is empty")
    baseline = evaluate([e.sample for e in examples], params, batch_size)
    rng = np.random.default_rng(seed)
    current = [Permutation.identity(e.graph.num_nodes) for e in examples]
    accs = []
    for _ in range(num_permutations):
        if not identity:
            current = [Permutation.random(len(c), rng).compose(c) for c in current]
        samples = permuted_samples(examples, dataset, current, params.config.max_positions)
        accs.append(evaluate(samples, params, batch_size))
    return RobustnessReport(baseline, accs)


# ---------------------------------------------------------------------------
# local-embedding similarity

@dataclass
class SimilarityTable:
    by_hop: dict[str, tuple[float, int]]  # "1", "2", "3+" (reachable pairs only)
    by_hop_common: dict[tuple[str, int], tuple[float, int]]  # (hop, common neighbours) for 1 and 2 hops
    by_degree_diff: dict[int, tuple[float, int]]  # 3+ hop pairs, grouped by |degree difference|
    num_pairs: int  # reachable pairs analysed
    notes: list[str] = field(default_factory=list)

    def to_rows(self) -> list[tuple[str, str, float, int]]:
        rows = [("hop", k, v[0], v[1]) for k, v in self.by_hop.items()]
        rows += [("hop_common", f"{h}:{c}", v[0], v[1]) for (h, c), v in sorted(self.by_hop_common.items())]
        rows += [("degree_diff", str(k), v[0], v[1]) for k, v in sorted(self.by_degree_diff.items())]
        return rows


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def structure_embeddings(samples: Sequence[TokenizedSample], params: ModelParams,
                         batch_size: int = 64) -> list[np.ndarray]:
    """Pooled structure-span embedding of every node, indexed by node id."""
    out = []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            res = forward(chunk, params)
            zs = res.pooled.z_struct.data
            for b, s in enumerate(chunk):
                nodes = res.batch.slot_node[b]
                z = np.zeros((s.num_nodes, zs.shape[-1]))
                for slot, node in enumerate(nodes):
                    if node >= 0:
                        z[node] = zs[b, slot]
                out.append(z)
    return out


def embedding_similarity_analysis(params: ModelParams, graphs: Sequence[Graph],
                                  samples: Sequence[TokenizedSample], min_pairs: int = 10_000,
                                  min_group: int = 20) -> SimilarityTable:
    """Cosine similarity of structure embeddings for node pairs of the same
    graph, grouped by hop distance, common neighbours and degree difference.
    Pairs in different components have no hop distance and are skipped.

    Groups with fewer than ``min_group`` pairs are omitted with a note.
    """
    if len(graphs) != len(samples):
        raise ValueError("graphs and samples must align")
    embs = structure_embeddings(samples, params)
    hop: dict[str, list[float]] = {"1": [], "2": [], "3+": []}
    hop_common: dict[tuple[str, int], list[float]] = {}
    deg: dict[int, list[float]] = {}
    pairs = 0
    for g, z in zip(graphs, embs):
        adj = g.adjacency()
        nbrs = [set(a) for a in adj]
        for u in range(g.num_nodes):
            dist = bfs_distances(adj, u)
            for v in range(u + 1, g.num_nodes):
                d = dist[v]
                if d == float("inf"):
                    continue
                c = _cos(z[u], z[v])
                common = len(nbrs[u] & nbrs[v])
                pairs += 1
                if d <= 2:
                    key = str(int(d))
                    hop[key].append(c)
                    hop_common.setdefault((key, common), []).append(c)
                else:  # 3 or more hops, so no common neighbour
                    hop["3+"].append(c)
                    deg.setdefault(abs(len(nbrs[u]) - len(nbrs[v])), []).append(c)
    notes = []
    if pairs < min_pairs:
        notes.append(f"only {pairs} pairs (< {min_pairs})")

    def summarise(groups, label):
        out = {}
        for k, vals in groups.items():
            if len(vals) < min_group:
                notes.append(f"{label} {k}: {len(vals)} pairs, omitted")
                continue
            out[k] = (float(np.mean(vals)), len(vals))
        return out

    return SimilarityTable(summarise(hop, "hop"), summarise(hop_common, "hop/common"),
                           summarise(deg, "degree difference"), pairs, notes)


# ---------------------------------------------------------------------------
# complexity benchmark

@dataclass
class BenchRow:
    nodes: int
    tokens_per_node: int
    local_ms: float
    full_ms: float
    local_flops: int
    full_flops: int


def _time(fn, repeats: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best * 1000.0


def complexity_benchmark(model_config: ModelConfig, node_counts: Sequence[int], tokens_per_node: int = 16,
                         repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    """Time one attention layer: per-segment (block-diagonal) vs full masked
    attention over the whole sequence, with fixed tokens per node."""
    if not node_counts or min(node_counts) <= 0 or tokens_per_node <= 0:
        raise ValueError("node counts and tokens_per_node must be positive")
    rng = np.random.default_rng(seed)
    H, dh = model_config.heads, model_config.head_dim
    rows = []
    for n in node_counts:
        L = tokens_per_node
        T = n * L
        q, k, v = (rng.standard_normal((H, T, dh)).astype(np.float32) for _ in range(3))
        seg = np.repeat(np.arange(n), L)
        keep = seg[:, None] == seg[None, :]
        qs, ks, vs = (x.reshape(H, n, L, dh).transpose(1, 0, 2, 3) for x in (q, k, v))

        def local():
            attention_kernel(qs, ks, vs)

        def full():
            attention_kernel(q, k, v, keep)

        lf, ff = attention_flops(model_config, [L] * n)
        rows.append(BenchRow(n, L, _time(local, repeats), _time(full, repeats), lf, ff))
    return rows


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["nodes", "tokens_per_node", "local_ms", "full_ms", "local_flops", "full_flops"])
    for r in rows:
        w.writerow([r.nodes, r.tokens_per_node, f"{r.local_ms:.4f}", f"{r.full_ms:.4f}", r.local_flops, r.full_flops])
    return buf.getvalue()
