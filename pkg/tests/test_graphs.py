import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hlmg.graphs import (
    FAMILIES,
    GRAPHON_P_RANGES,
    Graph,
    GraphError,
    GraphonKind,
    GraphonSpec,
    Permutation,
    Task,
    TaskQuery,
    evaluate_graphon,
    generate_graph,
    oracle,
    permute,
)

from oracles import components_dfs, degree_count, floyd_warshall, has_cycle_dfs, shortest_path_union, simple_path_union


@st.composite
def graphs(draw, min_n=2, max_n=9):
    n = draw(st.integers(min_n, max_n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    return Graph.from_edges(n, [p for p, m in zip(pairs, mask) if m])


# -- graph type --------------------------------------------------------------

def test_edges_canonical_and_deduplicated():
    g = Graph.from_edges(3, [(1, 0), (0, 1), (2, 1)])
    assert g.edges == frozenset({(0, 1), (1, 2)})
    assert g.num_edges == 2


@pytest.mark.parametrize("edges", [[(0, 0)], [(0, 3)], [(-1, 0)]])
def test_invalid_edges_rejected(edges):
    with pytest.raises(GraphError):
        Graph.from_edges(3, edges)


def test_induced_subgraph_compacts_indices():
    g = Graph.from_edges(5, [(0, 1), (1, 4), (3, 4), (2, 3)])
    sub, old = g.induced_subgraph([4, 1, 3])
    assert old == [1, 3, 4]
    assert sub.edges == frozenset({(0, 2), (1, 2)})


# -- generators --------------------------------------------------------------

def test_complete_graph_edge_count():
    assert generate_graph("complete", 4, seed=0).num_edges == 6


def test_cycle_graph():
    g = generate_graph("cycle", 5, seed=0)
    assert g.num_edges == 5
    assert all(g.degree(i) == 2 for i in range(5))


def test_family_shapes_match_networkx():
    for n in (6, 7, 10):
        pairs = {
            "star": nx.star_graph(n - 1),
            "path": nx.path_graph(n),
            "wheel": nx.wheel_graph(n),
            "complete": nx.complete_graph(n),
        }
        for fam, ref in pairs.items():
            g = generate_graph(fam, n, seed=1)
            ours = nx.Graph(list(g.edges))
            ours.add_nodes_from(range(n))
            assert nx.is_isomorphic(ours, ref), fam


def test_barbell_is_two_cliques_and_bridge():
    g = generate_graph("barbell", 8, seed=0)
    ref = nx.barbell_graph(4, 0)
    ours = nx.Graph(list(g.edges))
    assert nx.is_isomorphic(ours, ref)
    g = generate_graph("barbell", 9, seed=0)
    assert nx.is_isomorphic(nx.Graph(list(g.edges)), nx.barbell_graph(4, 1))


def test_tree_is_spanning_tree():
    for seed in range(30):
        g = generate_graph("tree", 9, seed=seed)
        ng = nx.Graph(list(g.edges))
        ng.add_nodes_from(range(9))
        assert nx.is_tree(ng)


def test_prufer_trees_are_roughly_uniform():
    # 4 labelled nodes have 16 trees; each should appear about 1/16 of the time
    counts = {}
    for seed in range(3200):
        key = tuple(sorted(generate_graph("tree", 4, seed=seed).edges))
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 16
    expected = 3200 / 16
    assert all(abs(c - expected) < 5 * math.sqrt(expected) for c in counts.values())


@pytest.mark.parametrize("family,n", [("barbell", 5), ("wheel", 3), ("cycle", 2)])
def test_family_minimum_sizes(family, n):
    with pytest.raises(GraphError, match=f"n >= "):
        generate_graph(family, n, seed=0)


def test_graphon_spec_required_iff_graphon_family():
    with pytest.raises(GraphError):
        generate_graph("graphon", 5, None, seed=0)
    with pytest.raises(GraphError):
        generate_graph("path", 5, GraphonSpec("linear"), seed=0)


def test_generation_is_deterministic():
    for fam in FAMILIES:
        spec = GraphonSpec.sample("sin", np.random.default_rng(0)) if fam == "graphon" else None
        assert generate_graph(fam, 8, spec, seed=3) == generate_graph(fam, 8, spec, seed=3)


def test_dense_graphon_density():
    # p is drawn from [0.8, 1.0]; edges are Bernoulli(p) per pair
    rng = np.random.default_rng(0)
    dens, ps = [], []
    for seed in range(100):
        spec = GraphonSpec.sample("dense", rng)
        g = generate_graph("graphon", 20, spec, seed=seed)
        dens.append(g.num_edges / 190)
        ps.append(spec.p)
    sigma = math.sqrt(0.8 * 0.2 / 190)
    assert min(dens) >= 0.8 - 3 * sigma
    assert abs(np.mean(dens) - np.mean(ps)) < 3 * sigma / math.sqrt(100) + 1e-3


def test_graphon_edge_frequency_matches_formula():
    # fix the latent positions by reusing the generator's draw order
    spec = GraphonSpec("linear")
    hits = np.zeros((6, 6))
    expected = np.zeros((6, 6))
    trials = 3000
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        latent = rng.uniform(0, 1, size=6)
        g = generate_graph("graphon", 6, spec, seed=np.random.default_rng(seed))
        for i in range(6):
            for j in range(i + 1, 6):
                expected[i, j] += latent[i] * latent[j]
                hits[i, j] += g.has_edge(i, j)
    iu = np.triu_indices(6, 1)
    assert np.allclose(hits[iu] / trials, expected[iu] / trials, atol=0.03)


# -- graphon formulas ----------------------------------------------------------

def test_graphon_examples():
    assert evaluate_graphon(GraphonSpec("linear"), 0.5, 0.5) == 0.25
    assert evaluate_graphon(GraphonSpec("sigmoidal"), 0.3, 0.3) == 0.5
    assert evaluate_graphon(GraphonSpec("sin"), 0.5, 0.5) == pytest.approx(1.0)
    assert evaluate_graphon(GraphonSpec("quadratic"), 0.5, 1.0) == 0.25
    assert evaluate_graphon(GraphonSpec("avg"), 0.2, 0.6) == pytest.approx(0.4)
    assert evaluate_graphon(GraphonSpec("exp_decay"), 0.0, 0.0) == 1.0
    assert evaluate_graphon(GraphonSpec("softmax"), 0.4, 0.4) == 0.5
    assert evaluate_graphon(GraphonSpec("step", threshold=0.5), 0.6, 0.7) == 1.0
    assert evaluate_graphon(GraphonSpec("step", threshold=0.5), 0.4, 0.7) == 0.0
    assert evaluate_graphon(GraphonSpec("constant", p=0.4), 0.1, 0.9) == 0.4


@given(st.sampled_from(list(GraphonKind)), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_graphon_values_are_probabilities(kind, v1, v2, seed):
    spec = GraphonSpec.sample(kind, np.random.default_rng(seed))
    assert 0.0 <= evaluate_graphon(spec, v1, v2) <= 1.0


def test_graphon_out_of_range_inputs():
    with pytest.raises(GraphError):
        evaluate_graphon(GraphonSpec("linear"), 1.2, 0.5)


def test_sampled_p_respects_range():
    rng = np.random.default_rng(1)
    for kind, (lo, hi) in GRAPHON_P_RANGES.items():
        for _ in range(50):
            assert lo <= GraphonSpec.sample(kind, rng).p <= hi
    with pytest.raises(GraphError):
        GraphonSpec("sparse", p=0.5)


# -- permutations ------------------------------------------------------------

def test_identity_permutation():
    g = generate_graph("tree", 7, seed=2)
    assert permute(g, Permutation.identity(7)) == g


def test_reverse_path():
    g = Graph.from_edges(3, [(0, 1), (1, 2)])
    assert permute(g, Permutation((2, 1, 0))).edges == g.edges


@given(graphs(), st.integers(0, 10_000))
def test_permutation_inverse_roundtrip(g, seed):
    p = Permutation.random(g.num_nodes, np.random.default_rng(seed))
    assert permute(permute(g, p), p.inverse()) == g
    assert p.compose(p.inverse()) == Permutation.identity(g.num_nodes)


def test_permutation_rejects_non_bijection():
    with pytest.raises(GraphError):
        Permutation((0, 0, 1))
    with pytest.raises(GraphError):
        permute(Graph.from_edges(3, []), Permutation.identity(4))


def test_permute_matches_matrix_form():
    rng = np.random.default_rng(5)
    g = generate_graph("graphon", 8, GraphonSpec("constant", p=0.5), seed=1)
    p = Permutation.random(8, rng)
    P = np.zeros((8, 8))
    for i in range(8):
        P[p(i), i] = 1
    assert np.array_equal(permute(g, p).adjacency_matrix(), P @ g.adjacency_matrix() @ P.T)


# -- oracles -----------------------------------------------------------------

def test_oracle_examples():
    tri = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    assert oracle(tri, TaskQuery(Task.CYCLE)).value is True
    path = Graph.from_edges(3, [(0, 1), (1, 2)])
    ans = oracle(path, TaskQuery(Task.SHORTEST_DISTANCE, (0, 2)))
    assert ans.value == 2 and ans.gt_nodes == {0, 1, 2}
    two = Graph.from_edges(4, [(0, 1), (2, 3)])
    assert oracle(two, TaskQuery(Task.COMPONENTS)).value == 2
    assert oracle(two, TaskQuery(Task.SHORTEST_DISTANCE, (0, 3))).value == math.inf
    assert oracle(two, TaskQuery(Task.REACHABLE, (0, 3))).value is False
    assert oracle(two, TaskQuery(Task.EDGE_EXISTENCE, (2, 3))).gt_nodes == {2, 3}
    assert oracle(two, TaskQuery(Task.NODE_DEGREE, (1,))).gt_nodes == {1}


def test_oracle_rejects_bad_query_nodes():
    with pytest.raises(GraphError):
        oracle(Graph.from_edges(2, [(0, 1)]), TaskQuery(Task.NODE_DEGREE, (5,)))
    with pytest.raises(GraphError):
        TaskQuery(Task.EDGE_EXISTENCE, (1, 1))


@settings(max_examples=150, deadline=None)
@given(graphs(max_n=8), st.data())
def test_oracles_match_brute_force(g, data):
    n, edges = g.num_nodes, list(g.edges)
    u = data.draw(st.integers(0, n - 1))
    v = data.draw(st.integers(0, n - 1).filter(lambda x: x != u))
    fw = floyd_warshall(n, edges)
    assert oracle(g, TaskQuery(Task.SHORTEST_DISTANCE, (u, v))).value == fw[u, v]
    assert oracle(g, TaskQuery(Task.REACHABLE, (u, v))).value == (fw[u, v] < math.inf)
    assert oracle(g, TaskQuery(Task.EDGE_EXISTENCE, (u, v))).value == ((min(u, v), max(u, v)) in edges)
    assert oracle(g, TaskQuery(Task.NODE_DEGREE, (u,))).value == degree_count(n, edges, u)
    assert oracle(g, TaskQuery(Task.COMPONENTS)).value == components_dfs(n, edges)
    assert oracle(g, TaskQuery(Task.CYCLE)).value == has_cycle_dfs(n, edges)
    assert oracle(g, TaskQuery(Task.EDGE_COUNT)).value == len(edges)


@settings(max_examples=150, deadline=None)
@given(graphs(max_n=9), st.data())
def test_ground_truth_sets_match_enumeration(g, data):
    n, edges = g.num_nodes, list(g.edges)
    u = data.draw(st.integers(0, n - 1))
    v = data.draw(st.integers(0, n - 1).filter(lambda x: x != u))
    sp = shortest_path_union(n, edges, u, v) or {u, v}
    assert oracle(g, TaskQuery(Task.SHORTEST_DISTANCE, (u, v))).gt_nodes == sp
    rp = simple_path_union(n, edges, u, v) or {u, v}
    assert oracle(g, TaskQuery(Task.REACHABLE, (u, v))).gt_nodes == rp


@settings(max_examples=100, deadline=None)
@given(graphs(max_n=8), st.integers(0, 10_000), st.sampled_from(list(Task)))
def test_oracle_permutation_invariance(g, seed, task):
    rng = np.random.default_rng(seed)
    n = g.num_nodes
    nodes = tuple(int(x) for x in rng.choice(n, size={Task.NODE_DEGREE: 1}.get(task, 2 if task in (
        Task.EDGE_EXISTENCE, Task.SHORTEST_DISTANCE, Task.REACHABLE) else 0), replace=False))
    q = TaskQuery(task, nodes)
    p = Permutation.random(n, rng)
    a = oracle(g, q)
    b = oracle(permute(g, p), q.permuted(p))
    assert a.value == b.value
    if a.gt_nodes is not None:
        assert b.gt_nodes == frozenset(p(x) for x in a.gt_nodes)
