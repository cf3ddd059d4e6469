"""The hierarchical graph language model.

Pipeline for one batch:

1. **Local block.** Every node segment (its structure span, then its
   feature span) and the query are packed into rows of a
   ``[rows, max_segment_len]`` token grid. Attention runs inside each row
   only, which is exactly the block-diagonal intra-node mask over the full
   sequence. Position ids restart at 0 in every segment.
2. **Pooling.** Span means give ``z_struct`` and ``z_feat`` per node; they
   are mixed with ``alpha = sigmoid(alpha_raw)`` (or concatenated and
   projected back to ``dim``). The query row is mean-pooled the same way.
3. **Global block.** ``[z_1 .. z_n, z_q]`` (padded per batch) goes through
   ordinary multi-head attention layers with no positional encoding, and
   the final query slot feeds an MLP classifier.

A dense reference path (:func:`local_forward` with ``impl="dense"``) builds
the full ``T x T`` score matrix and applies the segment mask with
``masked_fill``; it exists to check the packed path and to measure the
cost of full attention.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .text import FEATURE, QUERY, QUERY_SPAN, STRUCTURE, SequenceTooLong, TokenizedSample

CHECKPOINT_VERSION = 1
_MAGIC = b"HLMGCKPT"


class ConfigMismatch(ValueError):
    """A checkpoint does not match the expected model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_classes: int
    dim: int = 64
    heads: int = 4
    local_layers: int = 2
    global_layers: int = 2
    hidden_dim: int = 256
    dropout: float = 0.1
    attn_dropout: float = 0.1
    max_positions: int = 512
    pooling: str = "mean_alpha"  # or "concatenate"
    alpha_init: float = 0.5
    use_global_positional: bool = False
    max_graph_nodes: int = 64  # only used by the optional global positional table
    norm: str = "pre"  # or "post"
    head_hidden: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.local_layers < 1 or self.global_layers < 1:
            raise ValueError("need at least one local and one global layer")
        if self.pooling not in ("mean_alpha", "concatenate"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.norm not in ("pre", "post"):
            raise ValueError(f"unknown norm placement {self.norm!r}")
        if not 0.0 < self.alpha_init < 1.0:
            raise ValueError("alpha_init must lie strictly inside (0, 1)")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


MODEL_PRESETS = {
    # full-scale reference size
    "paper": dict(dim=768, heads=12, local_layers=6, global_layers=2, hidden_dim=3072,
                  dropout=0.1, attn_dropout=0.1, max_positions=4096),
    # full-scale depth for the reasoning tasks (4 local layers)
    "paper_reasoning": dict(dim=768, heads=12, local_layers=4, global_layers=2, hidden_dim=3072,
                            dropout=0.1, attn_dropout=0.1, max_positions=4096),
    "desk": dict(dim=64, heads=4, local_layers=2, global_layers=2, hidden_dim=256,
                 dropout=0.1, attn_dropout=0.1, max_positions=512),
    "tiny": dict(dim=8, heads=2, local_layers=1, global_layers=1, hidden_dim=16,
                 dropout=0.0, attn_dropout=0.0, max_positions=512, head_hidden=8),
}


def model_preset(name: str, vocab_size: int, num_classes: int, **overrides) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
    return ModelConfig(vocab_size=vocab_size, num_classes=num_classes, **{**MODEL_PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# parameters

def _block_shapes(prefix: str, d: int, h: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
        f"{prefix}.wk": (d, d),  # no key bias: it shifts a whole score row, which softmax ignores
        f"{prefix}.wv": (d, d), f"{prefix}.bv": (d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.w1": (d, h), f"{prefix}.b1": (h,),
        f"{prefix}.w2": (h, d), f"{prefix}.b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_positions, d)}
    for layer in range(cfg.local_layers):
        shapes.update(_block_shapes(f"local.{layer}", d, cfg.hidden_dim))
    if cfg.norm == "pre":
        shapes.update({"local_ln.g": (d,), "local_ln.b": (d,)})
    shapes["alpha_raw"] = (1,)
    if cfg.pooling == "concatenate":
        shapes.update({"cat.w": (2 * d, d), "cat.b": (d,)})
    if cfg.use_global_positional:
        shapes["global_pos"] = (cfg.max_graph_nodes + 1, d)
    for layer in range(cfg.global_layers):
        shapes.update(_block_shapes(f"global.{layer}", d, cfg.hidden_dim))
    if cfg.norm == "pre":
        shapes.update({"global_ln.g": (d,), "global_ln.b": (d,)})
    hh = cfg.head_hidden or d
    shapes.update({"head.w1": (d, hh), "head.b1": (hh,), "head.w2": (hh, cfg.num_classes), "head.b2": (cfg.num_classes,)})
    return shapes


class ModelParams:
    """Named trainable tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigMismatch(f"parameter names differ from config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigMismatch(f"{name}: shape {tensors[name].shape} but config implies {shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, std: float = 0.02) -> ModelParams:
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        tensors = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "alpha_raw":
                a = config.alpha_init
                data = np.full(shape, math.log(a / (1 - a)))
            elif leaf == "g":
                data = np.ones(shape)
            elif leaf.startswith("b") and len(shape) == 1:
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, std, size=shape)
            tensors[name] = Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def values(self):
        return self.tensors.values()

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.tensors["alpha_raw"].data[0])))

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()})

    def astype(self, dtype: str) -> ModelParams:
        cfg = dataclasses.replace(self.config, dtype=dtype)
        return ModelParams(cfg, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.tensors.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.tensors[k].data = v.astype(self.tensors[k].dtype, copy=True)


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    """Packed local-block input for a list of samples.

    Rows are laid out sample-major with ``slots = max_nodes + 1`` rows per
    sample: node segments in the order they appear in the text, padding
    rows, and finally the query row.
    """

    tokens: np.ndarray  # [R, L]
    positions: np.ndarray  # [R, L]
    valid: np.ndarray  # [R, L] bool
    w_struct: np.ndarray  # [R, L] span-mean weights (query tokens for the query row)
    w_feat: np.ndarray  # [R, L]
    has_feat: np.ndarray  # [R] bool
    slot_valid: np.ndarray  # [B, S] bool
    slot_node: np.ndarray  # [B, S - 1] node index per node slot, -1 for padding
    token_row: list[np.ndarray]  # per sample: packed (row, col) of each token, sequence order
    labels: np.ndarray  # [B]
    batch_size: int
    slots: int
    flat_index: np.ndarray = None  # grid cell (row * L + col) of each real token, compact order

    def __post_init__(self):
        if self.flat_index is None:
            self.flat_index = np.flatnonzero(self.valid.reshape(-1))

    def compact_index(self, sample: int) -> np.ndarray:
        """Compact-token index of each token of ``sample``, in sequence order."""
        where = self.token_row[sample]
        return np.searchsorted(self.flat_index, where[:, 0] * self.tokens.shape[1] + where[:, 1])

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]


def make_batch(samples: Sequence[TokenizedSample], config: ModelConfig) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    max_nodes = max(s.num_nodes for s in samples)
    slots = max_nodes + 1
    per_sample_segments = []
    max_len = 1
    for s in samples:
        if len(s) > config.max_positions:
            raise SequenceTooLong(len(s), config.max_positions)
        order: list[int] = []
        members: dict[int, list[int]] = {}
        for t, node in enumerate(s.seg_node):
            node = int(node)
            if node not in members:
                members[node] = []
                if node != QUERY:
                    order.append(node)
            members[node].append(t)
        if QUERY not in members:
            raise ValueError("sample has no query span")
        per_sample_segments.append((order, members))
        max_len = max(max_len, max(len(v) for v in members.values()))
    if max_len > config.max_positions:
        raise SequenceTooLong(max_len, config.max_positions)

    B, R, L = len(samples), len(samples) * slots, max_len
    tokens = np.zeros((R, L), dtype=np.int64)
    valid = np.zeros((R, L), dtype=bool)
    kinds = np.full((R, L), -1, dtype=np.int64)
    slot_valid = np.zeros((B, slots), dtype=bool)
    slot_node = np.full((B, slots - 1), -1, dtype=np.int64)
    token_row = []
    for b, (s, (order, members)) in enumerate(zip(samples, per_sample_segments)):
        where = np.zeros((len(s), 2), dtype=np.int64)
        ids = np.where(s.token_ids < config.vocab_size, s.token_ids, 1)
        for k, node in enumerate(order + [QUERY]):
            row = b * slots + (k if node != QUERY else slots - 1)
            idx = members[node]
            n = len(idx)
            tokens[row, :n] = ids[idx]
            valid[row, :n] = True
            kinds[row, :n] = s.seg_kind[idx]
            where[idx, 0] = row
            where[idx, 1] = np.arange(n)
            slot_valid[b, row - b * slots] = True
            if node != QUERY:
                slot_node[b, k] = node
        token_row.append(where)

    def span_weights(mask):
        counts = mask.sum(axis=1, keepdims=True)
        return np.where(mask, 1.0 / np.maximum(counts, 1), 0.0)

    w_struct = span_weights((kinds == STRUCTURE) | (kinds == QUERY_SPAN))
    w_feat = span_weights(kinds == FEATURE)
    has_feat = (kinds == FEATURE).any(axis=1)
    positions = np.broadcast_to(np.arange(L), (R, L)).copy()
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return Batch(tokens, positions, valid, w_struct, w_feat, has_feat, slot_valid, slot_node,
                 token_row, labels, B, slots)


# ---------------------------------------------------------------------------
# transformer pieces

@dataclass
class RunState:
    train: bool = False
    rng: np.random.Generator | None = None
    keep_attention: bool = False


def _attention(x: Tensor, p: ModelParams, prefix: str, keep: np.ndarray, cfg: ModelConfig, st: RunState,
               grid: tuple[np.ndarray, int, int] | None = None):
    """Multi-head self-attention.

    ``x`` is [N, T, d], or compact tokens [tokens, d] when ``grid`` =
    (flat_index, rows, row_len) says where each token sits in the padded
    [rows, row_len] layout. ``keep`` broadcasts to [N, heads, T, T] and
    marks the allowed (query, key) pairs.
    """
    H, dh = cfg.heads, cfg.head_dim
    d = cfg.dim
    if grid is None:
        N, T, _ = x.shape
    else:
        index, N, T = grid

    def split(t):
        if grid is not None:
            t = ad.scatter_rows(t, index, N * T)
        return t.reshape(N, T, H, dh).transpose((0, 2, 1, 3))

    q = split(ad.linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
    k = split(ad.linear(x, p[f"{prefix}.wk"]))
    v = split(ad.linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
    scores = ad.scale(q @ k.transpose((0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    scores = ad.masked_fill(scores, ~keep)
    probs = ad.softmax(scores, keep)
    attn = ad.dropout(probs, cfg.attn_dropout, st.train, st.rng)
    out = (attn @ v).transpose((0, 2, 1, 3))
    if grid is None:
        out = out.reshape(N, T, d)
    else:
        out = ad.gather_rows(out.reshape(N * T, d), index)
    return ad.linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"]), probs


def _ffn(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"])), p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _block(x: Tensor, p: ModelParams, prefix: str, keep: np.ndarray, cfg: ModelConfig, st: RunState,
           grid=None):
    drop = lambda t: ad.dropout(t, cfg.dropout, st.train, st.rng)  # noqa: E731
    ln = lambda t, name: ad.layer_norm(t, p[f"{prefix}.{name}.g"], p[f"{prefix}.{name}.b"])  # noqa: E731
    if cfg.norm == "pre":
        a, probs = _attention(ln(x, "ln1"), p, prefix, keep, cfg, st, grid)
        x = x + drop(a)
        x = x + drop(_ffn(ln(x, "ln2"), p, prefix))
    else:
        a, probs = _attention(x, p, prefix, keep, cfg, st, grid)
        x = ln(x + drop(a), "ln1")
        x = ln(x + drop(_ffn(x, p, prefix)), "ln2")
    return x, probs


# ---------------------------------------------------------------------------
# forward passes

@dataclass
class PooledEmbeddings:
    z: Tensor  # [B, S, d] node slots then the query slot (dim 2d before projection when concatenating)
    z_struct: Tensor  # [B, S, d]
    z_feat: Tensor  # [B, S, d]
    slot_valid: np.ndarray
    slot_node: np.ndarray

    @property
    def z_query(self) -> Tensor:
        return self.z[:, -1, :]


@dataclass
class ForwardResult:
    logits: Tensor
    query_attention: list[np.ndarray]  # per global layer [B, heads, S]
    pooled: PooledEmbeddings
    token_embeddings: Tensor  # compact [tokens, d], before positions are added
    batch: Batch
    local_attention: list[np.ndarray] = field(default_factory=list)  # per local layer [R, heads, L, L]

    def node_attention(self, layer: int = -1, sample: int = 0) -> np.ndarray:
        """Head-averaged query attention on each node (by node index)."""
        row = self.query_attention[layer][sample].mean(axis=0)
        nodes = self.batch.slot_node[sample]
        out = np.zeros(int(nodes.max()) + 1 if (nodes >= 0).any() else 0)
        for slot, node in enumerate(nodes):
            if node >= 0:
                out[node] = row[slot]
        return out


def local_block(batch: Batch, params: ModelParams, st: RunState):
    """Returns (compact hidden [tokens, d], compact token embeddings, attention maps)."""
    cfg = params.config
    R, L = batch.tokens.shape
    index = batch.flat_index
    tok = ad.embedding(params["tok_emb"], batch.tokens.reshape(-1)[index])
    x = tok + ad.embedding(params["pos_emb"], batch.positions.reshape(-1)[index])
    x = ad.dropout(x, cfg.dropout, st.train, st.rng)
    keep = batch.valid[:, None, None, :]
    maps = []
    for layer in range(cfg.local_layers):
        x, probs = _block(x, params, f"local.{layer}", keep, cfg, st, (index, R, L))
        if st.keep_attention:
            maps.append(probs.data)
    if cfg.norm == "pre":
        x = ad.layer_norm(x, params["local_ln.g"], params["local_ln.b"])
    return x, tok, maps


def pool(hidden: Tensor, batch: Batch, params: ModelParams) -> PooledEmbeddings:
    """Span-mean pooling and the structure/feature mix."""
    cfg = params.config
    B, S = batch.batch_size, batch.slots
    empty = ~batch.valid.any(axis=1) & batch.slot_valid.reshape(-1)
    if empty.any():
        raise ValueError("empty segment in batch")
    R, L = batch.tokens.shape
    hidden = ad.scatter_rows(hidden, batch.flat_index, R * L).reshape(R, L, cfg.dim)
    z_struct = ad.mean_over(hidden, batch.w_struct)
    z_feat = ad.mean_over(hidden, batch.w_feat)
    hf = batch.has_feat.astype(hidden.dtype)[:, None]
    if cfg.pooling == "mean_alpha":
        alpha = ad.sigmoid(params["alpha_raw"])
        # nodes with features: alpha*z_struct + (1-alpha)*z_feat; others: z_struct
        c_struct = 1.0 + hf * (alpha - 1.0)
        c_feat = hf * (1.0 - alpha)
        z = z_struct * c_struct + z_feat * c_feat
    else:
        z = ad.concat([z_struct, z_feat], axis=-1)
    d = z.shape[-1]
    return PooledEmbeddings(z.reshape(B, S, d), z_struct.reshape(B, S, cfg.dim), z_feat.reshape(B, S, cfg.dim),
                            batch.slot_valid, batch.slot_node)


def global_block(pooled: PooledEmbeddings, params: ModelParams, st: RunState):
    cfg = params.config
    z = pooled.z
    if cfg.pooling == "concatenate":
        z = ad.linear(z, params["cat.w"], params["cat.b"])
    if cfg.use_global_positional:
        S = z.shape[1]
        idx = np.arange(S)
        idx[-1] = cfg.max_graph_nodes
        z = z + ad.embedding(params["global_pos"], idx)[None]
    keep = pooled.slot_valid[:, None, None, :]
    rows = []
    for layer in range(cfg.global_layers):
        z, probs = _block(z, params, f"global.{layer}", keep, cfg, st)
        rows.append(probs.data[:, :, -1, :].copy())
    if cfg.norm == "pre":
        z = ad.layer_norm(z, params["global_ln.g"], params["global_ln.b"])
    zq = z[:, -1, :]
    h = ad.gelu(ad.linear(zq, params["head.w1"], params["head.b1"]))
    return ad.linear(h, params["head.w2"], params["head.b2"]), rows


def forward(samples: Sequence[TokenizedSample] | Batch, params: ModelParams, train: bool = False,
            rng: np.random.Generator | None = None, keep_attention: bool = False) -> ForwardResult:
    batch = samples if isinstance(samples, Batch) else make_batch(samples, params.config)
    st = RunState(train, rng, keep_attention)
    hidden, tok, local_maps = local_block(batch, params, st)
    pooled = pool(hidden, batch, params)
    logits, rows = global_block(pooled, params, st)
    return ForwardResult(logits, rows, pooled, tok, batch, local_maps)


def loss(samples: Sequence[TokenizedSample] | Batch, params: ModelParams, train: bool = False,
         rng: np.random.Generator | None = None) -> Tensor:
    res = forward(samples, params, train, rng)
    return ad.cross_entropy(res.logits, res.batch.labels)


def predict_logits(samples: Sequence[TokenizedSample], params: ModelParams) -> np.ndarray:
    with ad.no_grad():
        return forward(samples, params).logits.data


def predict(sample: TokenizedSample | Sequence[TokenizedSample], params: ModelParams):
    """Argmax class (lowest index on ties); a list in gives an array out."""
    single = isinstance(sample, TokenizedSample)
    logits = predict_logits([sample] if single else sample, params)
    out = np.argmax(logits, axis=1)  # argmax returns the first maximum
    return int(out[0]) if single else out


# ---------------------------------------------------------------------------
# local block on one sample, in sequence order

@dataclass
class LocalOutput:
    hidden: np.ndarray  # [T, d] per token, sequence order
    attention: list[np.ndarray]  # per layer [heads, T, T] over the full sequence


def _segment_ids(sample: TokenizedSample) -> np.ndarray:
    return sample.seg_node.copy()


def _segment_positions(sample: TokenizedSample) -> np.ndarray:
    pos = np.zeros(len(sample), dtype=np.int64)
    counts: dict[int, int] = {}
    for t, node in enumerate(sample.seg_node):
        node = int(node)
        pos[t] = counts.get(node, 0)
        counts[node] = pos[t] + 1
    return pos


def local_forward(sample: TokenizedSample, params: ModelParams, train: bool = False,
                  rng: np.random.Generator | None = None, impl: str = "packed") -> LocalOutput:
    """Local-block hidden states for every token of one sample.

    ``impl="packed"`` runs the production path (one row per segment);
    ``impl="dense"`` runs full-sequence attention with the block-diagonal
    mask applied through ``masked_fill``.
    """
    cfg = params.config
    if len(sample) > cfg.max_positions:
        raise SequenceTooLong(len(sample), cfg.max_positions)
    st = RunState(train, rng, keep_attention=True)
    with ad.no_grad():
        if impl == "packed":
            batch = make_batch([sample], cfg)
            hidden, _, maps = local_block(batch, params, st)
            where = batch.token_row[0]
            h = hidden.data[batch.compact_index(0)]
            T = len(sample)
            full = []
            for m in maps:
                a = np.zeros((cfg.heads, T, T), dtype=m.dtype)
                rows = where[:, 0]
                for r in np.unique(rows):
                    idx = np.flatnonzero(rows == r)
                    cols = where[idx, 1]
                    a[:, idx[:, None], idx[None, :]] = m[r][:, cols[:, None], cols[None, :]]
                full.append(a)
            return LocalOutput(h, full)
        if impl != "dense":
            raise ValueError(f"unknown impl {impl!r}")
        seg = _segment_ids(sample)
        keep = (seg[:, None] == seg[None, :])[None, None]
        ids = np.where(sample.token_ids < cfg.vocab_size, sample.token_ids, 1)
        x = ad.embedding(params["tok_emb"], ids[None]) + ad.embedding(params["pos_emb"], _segment_positions(sample)[None])
        x = ad.dropout(x, cfg.dropout, st.train, st.rng)
        maps = []
        for layer in range(cfg.local_layers):
            x, probs = _block(x, params, f"local.{layer}", keep, cfg, st)
            maps.append(probs.data[0])
        if cfg.norm == "pre":
            x = ad.layer_norm(x, params["local_ln.g"], params["local_ln.b"])
        return LocalOutput(x.data[0], maps)


def attention_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    """Plain scaled dot-product attention on arrays, used for timing."""
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    if keep is not None:
        s = np.where(keep, s, ad.MASK_VALUE)
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    if keep is not None:
        s *= keep
    s /= s.sum(axis=-1, keepdims=True)
    return s @ v


def attention_flops(config: ModelConfig, segment_lengths: Sequence[int]) -> tuple[int, int]:
    """Score-matrix multiply-accumulates per layer: block-diagonal vs full attention."""
    lengths = [int(n) for n in segment_lengths]
    if not lengths or min(lengths) <= 0:
        raise ValueError("segment lengths must be positive")
    d = config.dim
    return sum(n * n for n in lengths) * d, sum(lengths) ** 2 * d


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    """Write magic, a length-prefixed JSON header, then little-endian f32 blobs."""
    manifest = {}
    offset = 0
    blobs = []
    for name, t in params:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    header = {"version": CHECKPOINT_VERSION, "config": params.config.to_dict(), "tensors": manifest,
              "extra": extra or {}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ConfigMismatch(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None, dtype: str | None = None):
    """Load parameters; returns (ModelParams, extra). Rejects config or manifest mismatches."""
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ConfigMismatch(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
        body = f.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigMismatch(f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    cfg = ModelConfig.from_dict(header["config"])
    if dtype is not None:
        cfg = dataclasses.replace(cfg, dtype=dtype)
    if expected is not None:
        want = dataclasses.replace(expected, dtype=cfg.dtype).to_dict()
        got = cfg.to_dict()
        diff = {k: (want[k], got[k]) for k in want if want[k] != got[k]}
        if diff:
            raise ConfigMismatch(f"checkpoint config differs: {diff}")
    shapes = param_shapes(cfg)
    manifest = header["tensors"]
    if set(manifest) != set(shapes):
        raise ConfigMismatch("tensor manifest does not match the configuration")
    tensors = {}
    for name, shape in shapes.items():
        entry = manifest[name]
        if tuple(entry["shape"]) != shape:
            raise ConfigMismatch(f"{name}: manifest shape {entry['shape']} != {list(shape)}")
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + 4 * count > len(body):
            raise ConfigMismatch(f"{name}: blob truncated")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=start).reshape(shape)
        tensors[name] = Tensor(arr.astype(cfg.dtype), requires_grad=True)
    return ModelParams(cfg, tensors), header.get("extra", {})
