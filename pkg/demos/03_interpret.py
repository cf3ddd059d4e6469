"""Node importance from the global block's query attention.

Trains a short shortest-distance model, then compares query attention,
gradient saliency, the ground-truth oracle and a random ranking by
Recall@k and by fidelity (how much accuracy is lost when only the top
ranked nodes are kept).
"""

import numpy as np

from hlmg.datasets import GenConfig, TaskSpec, build_dataset
from hlmg.graphs import Task
from hlmg.interpret import (
    fidelity,
    gradient_importance,
    layerwise_attention_curve,
    oracle_importance,
    query_attention_importance,
    random_importance,
    random_recall_baseline,
    recall_at_k,
)
from hlmg.model import model_preset
from hlmg.training import train, train_preset

spec = TaskSpec.preset(Task.SHORTEST_DISTANCE, "desk", size=800, max_nodes=8)
data = build_dataset(spec, GenConfig(min_nodes=5, max_nodes=8), seed=1)
params, report = train(data, model_preset("desk", len(data.vocabulary), spec.num_classes),
                       train_preset("desk", epochs=6, lr=2e-3))
print(f"test accuracy {report.test_accuracy:.3f}")

test = data.split("test")
ex = test[0]
att = query_attention_importance(ex.sample, params)
print(ex.text)
print(f"ground truth {sorted(ex.gt_nodes)}, attention ranking {att.ranking.tolist()}")
print("attention per node:", np.round(att.node_scores, 3).tolist())

rng = np.random.default_rng(0)
explainers = {
    "query attention": lambda e: query_attention_importance(e.sample, params),
    "saliency": lambda e: gradient_importance(e.sample, params, "saliency"),
    "oracle": oracle_importance,
    "random": lambda e: random_importance(e.graph.num_nodes, rng),
}
for name, fn in explainers.items():
    rec = np.mean([recall_at_k(fn(e), e.gt_nodes)[:4] for e in test], axis=0)
    fid = fidelity(test, data, params, fn)
    print(f"{name:>16}: Recall@1..4 {np.round(rec, 3).tolist()}  fidelity {np.round(fid.fidelity, 3).tolist()}")
print(f"{'k/n baseline':>16}: {np.round(random_recall_baseline(8, 2)[:4], 3).tolist()}")

curve = layerwise_attention_curve([e.sample for e in test], params)
for layer, (a, b) in enumerate(zip(curve.gt, curve.non_gt)):
    print(f"global layer {layer}: mean attention on ground-truth nodes {a:.3f}, on the rest {b:.3f}")
