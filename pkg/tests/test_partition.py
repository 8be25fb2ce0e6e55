import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgfusion.kg import parse_triples
from kgfusion.partition import (
    EntityGraph,
    GraphPartitioner,
    PartitionAssignment,
    PartitionConfig,
    PartitionInfeasibleError,
    assign_triples,
    balance_bound,
    brute_force_partition,
    build_entity_graph,
    count_dropped,
    edge_cut,
    format_assignment,
    is_balanced,
    partition,
    read_assignment,
    refine_pass,
    write_assignment,
)
from kgfusion.synthetic import random_connected_graph

PATH = EntityGraph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
K4 = EntityGraph.from_edges(4, [(u, v) for u in range(4) for v in range(u + 1, 4)])
TRIANGLE = EntityGraph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


def groups(a: PartitionAssignment):
    return sorted(sorted(a.members(p)) for p in range(a.k) if a.members(p))


# -- graph construction ----------------------------------------------------------------

def test_entity_graph_from_triples():
    g = build_entity_graph(parse_triples(["a\tr\tb", "c\tr\tb"]))
    assert g.node_count == 3
    assert sorted(g.edges()) == [(0, 1, 1), (1, 2, 1)]


def test_parallel_triples_add_weight():
    g = build_entity_graph(parse_triples(["a\tr\tb", "a\tq\tb", "b\tr\ta"]))
    assert list(g.edges()) == [(0, 1, 3)]


def test_self_loop_gives_no_edge():
    g = build_entity_graph(parse_triples(["a\tr\ta"]))
    assert g.node_count == 1 and list(g.edges()) == []
    g.validate()


def test_validate_rejects_asymmetry_and_bad_weights():
    with pytest.raises(ValueError):
        EntityGraph(2, [{1: 1}, {}]).validate()
    with pytest.raises(ValueError):
        EntityGraph(2, [{}, {}], [1, 0]).validate()
    with pytest.raises(ValueError):
        EntityGraph(2, [{}])


# -- cut and balance -------------------------------------------------------------------

def test_edge_cut_examples():
    assert edge_cut(TRIANGLE, PartitionAssignment([0, 0, 1], 2)) == 2
    assert edge_cut(PATH, PartitionAssignment([0, 1, 0, 1], 2)) == 3
    assert edge_cut(K4, PartitionAssignment([0] * 4, 1)) == 0
    with pytest.raises(ValueError):
        edge_cut(PATH, PartitionAssignment([0, 1], 2))


def test_balance_bound_arithmetic():
    assert balance_bound(4, 2, 0.03) == 2
    assert balance_bound(100, 20, 0.03) == 5
    assert balance_bound(10, 3, 0.03) == 4
    assert balance_bound(1000, 20, 0.03) == 51


def test_config_validation():
    for bad in ({"k": 0}, {"epsilon": -0.1}, {"epsilon": 1.0}, {"n_init": 0}, {"max_refine_passes": -1}):
        with pytest.raises(ValueError):
            PartitionConfig(**bad)


# -- partition -------------------------------------------------------------------------

def test_path_partition_is_optimal():
    a = partition(PATH, PartitionConfig(k=2, epsilon=0.03, seed=0))
    assert edge_cut(PATH, a) == 1
    assert groups(a) == [[0, 1], [2, 3]]


def test_k1_puts_everything_in_one_part():
    a = partition(K4, PartitionConfig(k=1))
    assert a.part_of == [0, 0, 0, 0] and edge_cut(K4, a) == 0


def test_k_equal_n_gives_singletons():
    a = partition(K4, PartitionConfig(k=4))
    assert sorted(a.part_of) == [0, 1, 2, 3]
    assert edge_cut(K4, a) == K4.total_edge_weight


def test_k_above_n_is_an_error():
    with pytest.raises(ValueError):
        partition(PATH, PartitionConfig(k=5))


def test_infeasible_balance_is_reported():
    g = EntityGraph.from_edges(3, [(0, 1), (1, 2)], [5, 1, 1])
    with pytest.raises(PartitionInfeasibleError):
        partition(g, PartitionConfig(k=2))
    with pytest.raises(PartitionInfeasibleError):
        brute_force_partition(g, PartitionConfig(k=2))


def test_isolated_nodes_fill_lightest_parts():
    g = EntityGraph.from_edges(6, [(0, 1)])
    a = partition(g, PartitionConfig(k=3))
    assert is_balanced(g, a, 0.03)
    assert sorted(a.part_weights(g)) == [2, 2, 2]


def test_partition_is_deterministic():
    g = random_connected_graph(60, 0.08, np.random.default_rng(5))
    cfg = PartitionConfig(k=4, seed=9)
    assert partition(g, cfg).part_of == partition(g, cfg).part_of


def test_planted_blocks_are_recovered():
    rng = np.random.default_rng(0)
    edges = []
    for block in range(4):
        nodes = range(block * 25, block * 25 + 25)
        edges += [(u, v) for u in nodes for v in nodes if u < v and rng.random() < 0.3]
    g = EntityGraph.from_edges(100, edges)
    a = partition(g, PartitionConfig(k=4, seed=1))
    assert edge_cut(g, a) == 0


# -- refinement ------------------------------------------------------------------------

def test_refine_keeps_optimum():
    a = PartitionAssignment([0, 0, 1, 1], 2)
    assert refine_pass(PATH, a, PartitionConfig(k=2)).part_of == [0, 0, 1, 1]


def test_refine_fixes_interleaved_path():
    a = PartitionAssignment([0, 1, 0, 1], 2)
    out = refine_pass(PATH, a, PartitionConfig(k=2))
    assert edge_cut(PATH, out) == 1
    assert is_balanced(PATH, out, 0.03)


def test_refine_k1_is_noop():
    a = PartitionAssignment([0] * 4, 1)
    assert refine_pass(K4, a, PartitionConfig(k=1)).part_of == [0] * 4


@given(st.integers(4, 30), st.integers(2, 5), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_refine_never_increases_cut(n, k, seed):
    rng = np.random.default_rng(seed)
    g = random_connected_graph(n, 0.2, rng, max_edge_weight=3)
    k = min(k, n)
    a = PartitionAssignment([i % k for i in rng.permutation(n)], k)
    cfg = PartitionConfig(k=k, epsilon=0.03)
    assert is_balanced(g, a, cfg.epsilon)
    out = refine_pass(g, a, cfg)
    assert edge_cut(g, out) <= edge_cut(g, a)
    assert is_balanced(g, out, cfg.epsilon)


# -- oracle ----------------------------------------------------------------------------

def test_brute_force_examples():
    assert brute_force_partition(PATH, PartitionConfig(k=2))[1] == 1
    assert brute_force_partition(K4, PartitionConfig(k=2))[1] == 4
    single = EntityGraph.from_edges(1, [])
    assert brute_force_partition(single, PartitionConfig(k=1))[1] == 0


def test_brute_force_guard():
    with pytest.raises(ValueError):
        brute_force_partition(EntityGraph.from_edges(15, []), PartitionConfig(k=2))


@given(st.integers(2, 10), st.integers(2, 3), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_oracle_is_consistent_and_never_beaten(n, k, seed):
    g = random_connected_graph(n, 0.3, np.random.default_rng(seed), max_edge_weight=2)
    cfg = PartitionConfig(k=min(k, n), epsilon=0.03, seed=seed)
    a, best = brute_force_partition(g, cfg)
    assert edge_cut(g, a) == best
    assert is_balanced(g, a, cfg.epsilon)
    assert edge_cut(g, partition(g, cfg)) >= best


@given(st.integers(2, 40), st.integers(2, 8), st.integers(1, 3), st.integers(0, 10_000))
@settings(max_examples=80, deadline=None)
def test_successful_partitions_are_balanced(n, k, max_w, seed):
    g = random_connected_graph(n, 0.15, np.random.default_rng(seed), max_node_weight=max_w)
    cfg = PartitionConfig(k=min(k, n), seed=seed)
    try:
        a = partition(g, cfg)
    except PartitionInfeasibleError:
        return
    assert all(0 <= p < cfg.k for p in a.part_of)
    assert max(a.part_weights(g)) <= balance_bound(g.total_node_weight, cfg.k, cfg.epsilon)


# -- triples to subgraphs ----------------------------------------------------------------

@pytest.fixture
def crossing_kg():
    return parse_triples(["a\tr\tb", "c\tr\td", "a\tq\tc"])


def test_internal_triple_goes_to_its_part(crossing_kg):
    a = PartitionAssignment([0, 0, 1, 1], 2)
    subs = assign_triples(crossing_kg, a)
    assert [len(s.triples) for s in subs] == [1, 1]
    assert subs[0].entity_ids == [0, 1]
    assert count_dropped(crossing_kg, a) == 1


def test_subject_policy_keeps_crossing_triple(crossing_kg):
    a = PartitionAssignment([0, 0, 1, 1], 2)
    subs = assign_triples(crossing_kg, a, "subject")
    assert [len(s.triples) for s in subs] == [2, 1]
    assert subs[0].entity_ids == [0, 1, 2]


def test_unknown_policy(crossing_kg):
    with pytest.raises(ValueError):
        assign_triples(crossing_kg, PartitionAssignment([0] * 4, 1), "object")


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_retention_accounting(seed):
    rng = np.random.default_rng(seed)
    lines = [f"e{rng.integers(12)}\tr\te{rng.integers(12)}" for _ in range(25)]
    kg = parse_triples(lines)
    k = int(rng.integers(1, 4))
    a = PartitionAssignment([int(x) for x in rng.integers(0, k, kg.n_entities)], k)
    subs = assign_triples(kg, a)
    assert sum(len(s.triples) for s in subs) + count_dropped(kg, a) == len(kg.triples)
    for s in subs:
        assert all(a.part_of[t.subject] == s.partition_index == a.part_of[t.object] for t in s.triples)


# -- files and estimator -----------------------------------------------------------------

def test_assignment_file_round_trip(tmp_path, crossing_kg):
    cfg = PartitionConfig(k=2, epsilon=0.03, seed=1)
    g = build_entity_graph(crossing_kg)
    a = partition(g, cfg)
    path = tmp_path / "parts.tsv"
    write_assignment(path, crossing_kg, a, cfg, edge_cut(g, a), count_dropped(crossing_kg, a))
    header = path.read_text().splitlines()[0]
    assert header == f"# k=2\tepsilon=0.03\tseed=1\tcut={edge_cut(g, a)}\tdropped={count_dropped(crossing_kg, a)}"
    back, meta = read_assignment(path, crossing_kg)
    assert back == a and meta["k"] == "2"
    assert format_assignment(crossing_kg, a, cfg, 0, 0).count("\n") == 5


def test_read_assignment_rejects_unknown_entities(tmp_path, crossing_kg):
    path = tmp_path / "parts.tsv"
    path.write_text("# k=2\nzzz\t0\n")
    with pytest.raises(ValueError):
        read_assignment(path, crossing_kg)


def test_graph_partitioner_estimator(crossing_kg):
    est = GraphPartitioner(n_parts=2, random_state=0)
    assert est.get_params()["n_parts"] == 2
    est.fit(PATH)
    assert est.edge_cut_ == 1 and list(est.part_weights_) == [2, 2]
    assert est.labels_.shape == (4,)
    assert edge_cut(PATH, est.refine(PATH)) == 1
    assert GraphPartitioner(n_parts=2).fit(crossing_kg).labels_.shape == (4,)
    with pytest.raises(TypeError):
        GraphPartitioner().fit([[0, 1]])
