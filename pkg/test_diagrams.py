import itertools
from collections import defaultdict

import networkx as nx
import pytest

from utils.errors import ArgumentError, GraphError
from utils.diagrams import (
    FeynmanGraph, ForestShape, ScaleAssignment, build_forest, bubble, bubble_chain, choose_spanning_tree,
    classify_four_legged, crossed_ladder, derivative_bound_report, enumerate_labelings, exponent_identity_sweep,
    external_path, find_overlapping_triple, fork_scale_sum, insert_two_legged, is_one_particle_irreducible,
    ledger_table, loop_of_line, parse_graph, power_count_bound, random_graph, renormalized_forest, ring, sunset,
)
from utils.sampling import get_rng

INNER = frozenset({3, 4, 5})


@pytest.fixture
def dressed_sunset():
    # sunset whose third line carries a sunset insertion; lines 3, 4, 5 form the inner sunset
    return insert_two_legged(sunset(), 2)


def oracle_forest(graph, scales):
    """Components of G^(≥j) straight from networkx"""
    multigraph = graph.to_networkx()
    sets = set()
    for j in set(scales):
        keep = [(u, v, i) for u, v, i in multigraph.edges(keys=True) if scales[i] >= j]
        sub = multigraph.edge_subgraph(keep)
        for component in nx.connected_components(sub):
            sets.add(frozenset(i for u, v, i in keep if u in component))
    return sets


def restricts_to_every_fork(graph, tree, forest):
    def spans(lines, n_vertices):
        sub = nx.MultiGraph([graph.lines[i] for i in lines])
        return len(lines) == n_vertices - 1 and (n_vertices == 1 or nx.is_connected(sub))
    return spans(tree, graph.n_vertices) and all(spans(tree & f.lines, f.n_vertices) for f in forest.forks)


def test_text_format_round_trip():
    text = "# sunset\n0 1\n0 1\n0 1\nX 0\nX 1\n"
    graph = parse_graph(text)
    assert graph == sunset()
    assert parse_graph(graph.to_text()) == graph


@pytest.mark.parametrize("text", ["0 1 2\n", "0 2\n0 2\n0 2\nX 0\nX 2\n", "a b\n"])
def test_malformed_graph_text_is_rejected(text):
    with pytest.raises(GraphError):
        parse_graph(text)


@pytest.mark.parametrize("lines, legs", [
    (((0, 0), (0, 1), (0, 1)), (1, 1)),
    (((0, 1), (0, 1), (0, 1)), (0,)),
])
def test_invalid_graphs_are_rejected(lines, legs):
    with pytest.raises(GraphError):
        FeynmanGraph(lines, legs)


def test_one_particle_irreducibility():
    assert is_one_particle_irreducible(sunset())
    assert is_one_particle_irreducible(bubble_chain(2))
    dressed_leg = FeynmanGraph(((0, 2), (1, 2), (1, 2), (1, 2)), (0, 0, 0, 1))
    assert not is_one_particle_irreducible(dressed_leg)


def test_uniform_sunset_forest_is_the_root():
    forest = build_forest(sunset(), (-2, -2, -2))
    assert len(forest.forks) == 1
    assert forest.root.scale == -2 and forest.root.external_legs == 2


def test_sunset_forest_with_a_high_line():
    forest = build_forest(sunset(), (-3, -3, -1))
    assert forest.shape == ForestShape.of([{0, 1, 2}, {2}])
    assert forest.root.scale == -3 and forest.root.external_legs == 2
    inner = forest.forks[forest.index_of({2})]
    assert inner.scale == -1
    assert inner.external_legs == 6
    assert inner.parent == 0


def test_constant_scales_give_a_single_fork():
    for graph in (ring(), bubble_chain(3), crossed_ladder()):
        forest = build_forest(graph, [-4] * graph.n_lines)
        assert [f.lines for f in forest.forks] == [frozenset(range(graph.n_lines))]


@pytest.mark.parametrize("graph", [sunset(), bubble(), bubble_chain(2), crossed_ladder(), ring()],
                         ids=['sunset', 'bubble', 'chain', 'crossed', 'ring'])
def test_forest_matches_components_exhaustively(graph):
    for scales in itertools.product((-3, -2, -1), repeat=graph.n_lines):
        forest = build_forest(graph, scales)
        assert forest.shape.line_sets == oracle_forest(graph, scales)
        for fork in forest.forks:
            assert fork.scale == min(scales[i] for i in fork.lines)
            if fork.parent is not None:
                assert fork.scale > forest.forks[fork.parent].scale
                assert fork.lines < forest.forks[fork.parent].lines


def test_build_forest_rejects_disconnected_graphs():
    graph = FeynmanGraph(((0, 1), (0, 1), (2, 3), (2, 3)), (0, 0, 1, 1, 2, 2, 3, 3))
    with pytest.raises(GraphError):
        build_forest(graph, [-1] * 4)


def test_scale_assignments_must_fit_the_graph():
    with pytest.raises(ArgumentError):
        ScaleAssignment((-1, 0))
    with pytest.raises(ArgumentError):
        build_forest(sunset(), (-1, -1))


def test_euler_identities_on_random_forests():
    rng = get_rng(3)
    for _ in range(300):
        graph = random_graph(int(rng.integers(2, 6)), 2, rng)
        forest = build_forest(graph, rng.integers(-4, 0, size=graph.n_lines))
        tree = choose_spanning_tree(graph, forest)
        for fork in forest.forks:
            vertices = graph.vertices_of(fork.lines)
            assert 2 * len(fork.lines) == sum(graph.degree(v) for v in vertices) - fork.external_legs
            assert len(tree & fork.lines) == fork.n_vertices - 1


def test_enumeration_matches_brute_force(dressed_sunset):
    for graph in (sunset(), bubble_chain(2), dressed_sunset):
        expected = defaultdict(set)
        for scales in itertools.product((-3, -2, -1), repeat=graph.n_lines):
            expected[(build_forest(graph, scales).shape, min(scales))].add(scales)
        for (shape, j_root), assignments in expected.items():
            labelings = enumerate_labelings(graph, j_root, -3, shape)
            assert labelings.consistent
            assert {a.scales for a in labelings} == assignments


def test_sunset_single_fork_enumeration():
    single = ForestShape.of([{0, 1, 2}])
    assert [a.scales for a in enumerate_labelings(sunset(), -2, -3, single)] == [(-2, -2, -2)]
    assert [a.scales for a in enumerate_labelings(sunset(), -2, -2, single)] == [(-2, -2, -2)]


def test_floor_at_root_leaves_only_uniform_scales(dressed_sunset):
    cases = [(ring(), [range(6)], {}), (sunset(), [range(3)], {}),
             (dressed_sunset, [range(7), INNER], {INNER: 'c'})]
    for graph, shape, labels in cases:
        labelings = enumerate_labelings(graph, -2, -2, shape, labels)
        assert len(labelings) == 1
        assert set(labelings.assignments[0].scales) == {-2}


def test_counterterm_forks_sit_at_or_below_their_parent(dressed_sunset):
    shape = ForestShape.of([range(7), INNER])
    labelings = enumerate_labelings(dressed_sunset, -2, -3, shape, {INNER: 'c'})
    assert labelings.consistent
    assert sorted(a.scales for a in labelings) == [(-2, -2, -2, -3, -3, -3, -2), (-2, -2, -2, -2, -2, -2, -2)]

    renormalized = enumerate_labelings(dressed_sunset, -2, -3, shape, {INNER: 'r'})
    assert [a.scales for a in renormalized] == [(-2, -2, -2, -1, -1, -1, -2)]


def test_counterterm_demanded_above_its_parent_is_flagged(dressed_sunset):
    forest = build_forest(dressed_sunset, (-2, -2, -2, -1, -1, -1, -2))
    labelings = enumerate_labelings(dressed_sunset, -2, -3, forest, {INNER: 'c'})
    assert not labelings.consistent
    assert len(labelings) == 0
    assert "counterterm" in labelings.reason


@pytest.mark.parametrize("shape, labels", [
    ([{0, 1, 2}, {2}], {frozenset({2}): 'r'}),
    ([{0, 1, 2}, {0, 1}, {1, 2}], {}),
    ([{0, 1}], {}),
])
def test_inconsistent_shapes_are_flagged(shape, labels):
    labelings = enumerate_labelings(sunset(), -2, -3, shape, labels)
    assert not labelings.consistent and len(labelings) == 0


def test_enumeration_needs_an_ordered_window():
    with pytest.raises(ArgumentError):
        enumerate_labelings(sunset(), -3, -2, [{0, 1, 2}])


def test_sunset_spanning_tree_follows_the_scales():
    forest = build_forest(sunset(), (-3, -3, -1))
    tree = choose_spanning_tree(sunset(), forest)
    assert tree == {2}
    assert restricts_to_every_fork(sunset(), tree, forest)
    assert choose_spanning_tree(sunset(), build_forest(sunset(), (-2, -2, -2))) == {0}
    assert choose_spanning_tree(ring(), build_forest(ring(), [-1] * 6)) == {0, 1, 2}


def test_counterterm_forest_tree_is_built_fork_by_fork(dressed_sunset):
    shape = ForestShape.of([range(7), INNER])
    forest = renormalized_forest(dressed_sunset, (-2, -2, -2, -3, -3, -3, -2), shape, {INNER: 'c'})
    inner = forest.forks[forest.index_of(INNER)]
    assert inner.label == 'c' and inner.scale == -3 and forest.root.scale == -2
    tree = choose_spanning_tree(dressed_sunset, forest)
    assert tree == {0, 2, 3}
    assert restricts_to_every_fork(dressed_sunset, tree, forest)


def test_renormalized_forest_rejects_inconsistent_scales(dressed_sunset):
    shape = ForestShape.of([range(7), INNER])
    with pytest.raises(GraphError):
        renormalized_forest(dressed_sunset, (-2, -2, -2, -1, -1, -1, -2), shape, {INNER: 'c'})


def test_spanning_tree_restriction_on_random_graphs():
    rng = get_rng(5)
    for _ in range(2000):
        graph = random_graph(int(rng.integers(2, 6)), 2, rng)
        forest = build_forest(graph, rng.integers(-4, 0, size=graph.n_lines))
        assert restricts_to_every_fork(graph, choose_spanning_tree(graph, forest), forest)


def test_sunset_loops_and_external_path():
    tree = frozenset({2})
    assert loop_of_line(sunset(), tree, 0) == {0, 2}
    assert loop_of_line(sunset(), tree, 1) == {1, 2}
    assert external_path(sunset(), tree) == {2}
    with pytest.raises(ArgumentError):
        loop_of_line(sunset(), tree, 2)


def test_ring_loops_close_through_the_arc():
    tree = frozenset({0, 1, 2})
    assert loop_of_line(ring(), tree, 3) == {0, 1, 2, 3}
    assert loop_of_line(ring(), tree, 4) == {0, 1, 4}
    assert loop_of_line(ring(), tree, 5) == {1, 2, 5}


def test_overlapping_triples():
    triple = find_overlapping_triple(sunset(), frozenset({2}))
    assert (triple.tree_line, triple.first, triple.second) == (2, 0, 1)
    assert find_overlapping_triple(bubble(), frozenset({0})) is None
    assert find_overlapping_triple(bubble_chain(2), frozenset({0, 2})) is None


def test_dressed_bubble_chain_is_a_ladder():
    graph = insert_two_legged(bubble_chain(3), 0, 'sunset')
    graph = insert_two_legged(graph, 3, 'vertex')
    assert classify_four_legged(graph) == 'ladder'


@pytest.mark.parametrize("lines, legs, expected", [
    ((), (0, 0, 0, 0), 'ladder'),
    (((0, 1), (0, 1)), (0, 0, 1, 1), 'ladder'),
    (((0, 2), (0, 2), (1, 2), (1, 2)), (0, 0, 1, 1), 'ladder'),
    (((0, 1), (0, 1), (1, 2), (0, 2)), (0, 1, 2, 2), 'overlapping'),
    (((0, 2), (1, 2), (1, 2), (1, 2)), (0, 0, 0, 1), 'ladder'),
])
def test_every_small_four_legged_graph_is_classified(lines, legs, expected):
    assert classify_four_legged(FeynmanGraph(lines, legs)) == expected


def test_overlapping_four_legged_graphs():
    assert classify_four_legged(crossed_ladder()) == 'overlapping'
    assert classify_four_legged(ring()) == 'overlapping'
    assert find_overlapping_triple(crossed_ladder(), frozenset({0, 2})) is not None


def test_classifier_needs_four_legs():
    with pytest.raises(GraphError):
        classify_four_legged(sunset())


def test_fork_scale_sums():
    six = fork_scale_sum(6, 2.0, -5)
    assert six.exact == pytest.approx(15 / 16)
    assert six.bound == pytest.approx(1.0) and six.exact <= six.bound
    four = fork_scale_sum(4, 2.0, -5)
    assert four.exact == pytest.approx(4.0) and four.bound == 5.0
    with pytest.raises(ArgumentError):
        fork_scale_sum(2, 2.0, -5)


def test_sunset_power_counting():
    forest = build_forest(sunset(), (-3, -3, -1))
    report = power_count_bound(sunset(), forest, M=2.0)
    assert report.m_power == pytest.approx(1.0)
    assert report.j_power == 4
    assert report.identity_holds
    assert report.classification == 'two-legged'
    assert [e.scale_sum for e in report.ledger] == ['geometric']
    assert report.ledger[0].exponent == pytest.approx(-2.0)
    assert power_count_bound(sunset(), forest, M=2.0, s0=1).m_power == pytest.approx(0.0)


def test_two_legged_insertion_counts_as_a_vertex(dressed_sunset):
    forest = build_forest(dressed_sunset, (-2, -2, -2, -1, -1, -1, -2))
    report = power_count_bound(dressed_sunset, forest)
    assert len(report.insertions) == 1
    assert report.insertions[0].j_power == 5
    assert report.depth == 1
    assert report.j_power == 3 * 4 - 2


def test_symmetry_factor_counts_branches():
    forest = build_forest(ring(), (-1, -2, -1, -2, -2, -2))
    assert len(forest.root.children) == 2
    assert power_count_bound(ring(), forest).symmetry_factor == pytest.approx(0.5)


def test_power_counting_rejects_a_foreign_forest():
    with pytest.raises(GraphError):
        power_count_bound(ring(), build_forest(sunset(), (-1, -1, -1)))


def test_report_text_and_ledger_table():
    forest = build_forest(sunset(), (-3, -3, -1))
    report = power_count_bound(sunset(), forest)
    assert "order n = 2" in report.to_text()
    table = ledger_table(report)
    assert list(table.columns) == ['fork', 'lines', 'E_f', 'j_f', 'j_parent', 'coefficient', 'exponent',
                                   'scale_sum', 'bound', 'j_power', 'label']
    assert table.loc[0, 'E_f'] == 6


def test_derivative_bounds_on_the_sunset():
    forest = build_forest(sunset(), (-3, -3, -1))
    one = derivative_bound_report(sunset(), forest, s0=1, epsilon=0.1)
    assert one.m_power == pytest.approx(0.1)
    assert one.discount_line == 2
    plain = derivative_bound_report(sunset(), forest, s0=0, s1=0, epsilon=0.1)
    assert plain.m_power == pytest.approx(power_count_bound(sunset(), forest).m_power)
    assert plain.discount_line is None
    two = derivative_bound_report(sunset(), forest, s0=1, s1=1, epsilon=0.1)
    assert two.m_power == pytest.approx(-0.9)


def test_derivative_bounds_reject_bad_input():
    with pytest.raises(GraphError):
        derivative_bound_report(bubble(), build_forest(bubble(), (-1, -1)), s0=1)
    with pytest.raises(ArgumentError):
        derivative_bound_report(sunset(), build_forest(sunset(), (-1, -1, -1)), s0=1, epsilon=1.5)


def test_random_graphs_are_two_legged_and_irreducible():
    rng = get_rng(9)
    for n in range(2, 7):
        graph = random_graph(n, 2, rng)
        assert graph.order == n and graph.n_legs == 2
        assert is_one_particle_irreducible(graph)


def test_exponent_identity_over_random_graphs():
    table = exponent_identity_sweep(n_graphs=200, max_order=6, seed=1)
    assert (table['graph_order'] == table['order']).all()
    assert (table['expected'] == 3 * table['order'] - 2).all()
    assert table['identity_holds'].all()
    assert (table['j_power'] == table['expected']).all()
    assert (table['realized'] <= table['j_power']).all()
    assert (table['fork_count'] <= table['ceiling']).all()


@pytest.mark.parametrize("scales", [(-3, -3, -3, -1, -1, -1, -3), (-2, -2, -2, -2, -2, -2, -2)])
def test_dressed_sunset_power_matches_its_order(dressed_sunset, scales):
    # four four-legged vertices: |j|^(3·4−2)
    assert dressed_sunset.order == 4
    report = power_count_bound(dressed_sunset, build_forest(dressed_sunset, scales))
    assert report.j_power == 10
    assert report.realized_j_factors <= report.j_power


def test_labels_follow_the_parent_scale_rule(dressed_sunset):
    shape = ForestShape.of([range(7), INNER])
    below = renormalized_forest(dressed_sunset, (-2, -2, -2, -3, -3, -3, -2), shape, {INNER: 'c'})
    with pytest.raises(GraphError):
        below.with_labels({INNER: 'r'})
    assert below.with_labels({INNER: 'c'}).forks[below.index_of(INNER)].label == 'c'

    above = build_forest(dressed_sunset, (-3, -3, -3, -1, -1, -1, -3))
    assert above.with_labels({INNER: 'r'}).forks[above.index_of(INNER)].label == 'r'
    with pytest.raises(GraphError):
        above.with_labels({INNER: 'c'})
    with pytest.raises(GraphError):
        above.with_labels({INNER: 'x'})
