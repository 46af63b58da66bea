"""Combinatorics of scale-decomposed Feynman graphs.

Graphs carry explicit line indices so multi-lines are unambiguous; a line is
an unordered vertex pair and an external leg is the vertex it attaches to.
Scale assignments give each line a negative integer scale, the forest of a
labelling collects the connected components of every G^(≥j), and the power
counting report turns a forest into the exponent ledger and scale sums of
the naive bound.
"""
import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np
import pandas as pd
from networkx.utils import UnionFind

from utils.errors import ArgumentError, GraphError
from utils.sampling import get_rng

logger = logging.getLogger(__name__)

LABELS = ('r', 'c')


@dataclass(frozen=True)
class FeynmanGraph:
    """Lines ``(u, v)`` by index, legs by vertex; every vertex has degree 2 or 4"""
    lines: tuple
    legs: tuple
    n_vertices: int = 0

    def __post_init__(self):
        lines = tuple(tuple(sorted((int(u), int(v)))) for u, v in self.lines)
        legs = tuple(sorted(int(v) for v in self.legs))
        used = [v for line in lines for v in line] + list(legs)
        n_vertices = max(self.n_vertices, max(used) + 1 if used else 0)
        if n_vertices == 0:
            raise GraphError("graph has no vertices")
        if used and min(used) < 0:
            raise GraphError("vertex indices must be nonnegative")
        loops = [i for i, (u, v) in enumerate(lines) if u == v]
        if loops:
            raise GraphError(f"self-loops are not allowed (lines {loops})")
        degrees = Counter(used)
        bad = [v for v in range(n_vertices) if degrees[v] not in (2, 4)]
        if bad:
            raise GraphError(f"vertices {bad} have degree {[degrees[v] for v in bad]}; expected 2 or 4")
        object.__setattr__(self, 'lines', lines)
        object.__setattr__(self, 'legs', legs)
        object.__setattr__(self, 'n_vertices', n_vertices)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_legs(self) -> int:
        return len(self.legs)

    def degree(self, v: int) -> int:
        return sum(v in line for line in self.lines) + self.legs.count(v)

    @property
    def order(self) -> int:
        """Number of four-legged vertices"""
        return sum(self.degree(v) == 4 for v in range(self.n_vertices))

    def to_networkx(self) -> nx.MultiGraph:
        graph = nx.MultiGraph()
        for v in range(self.n_vertices):
            graph.add_node(v, legs=self.legs.count(v))
        for i, (u, v) in enumerate(self.lines):
            graph.add_edge(u, v, key=i)
        return graph

    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())

    def vertices_of(self, lines: Iterable[int]) -> frozenset:
        return frozenset(v for i in lines for v in self.lines[i])

    def external_legs_of(self, lines: Iterable[int]) -> int:
        """E_f: graph legs at G_f's vertices plus one per endpoint inside G_f of every line outside G_f"""
        lines = frozenset(lines)
        vertices = self.vertices_of(lines)
        count = sum(v in vertices for v in self.legs)
        for i, (u, v) in enumerate(self.lines):
            if i not in lines:
                count += (u in vertices) + (v in vertices)
        return count

    def to_text(self) -> str:
        rows = [f"{u} {v}" for u, v in self.lines] + [f"X {v}" for v in self.legs]
        return "\n".join(rows) + "\n"


def parse_graph(text: str) -> FeynmanGraph:
    """Read one internal line per row as ``u v`` and external legs as ``X v``; ``#`` starts a comment"""
    lines, legs = [], []
    for number, row in enumerate(text.splitlines(), start=1):
        row = row.split('#', 1)[0].strip()
        if not row:
            continue
        parts = row.split()
        try:
            if len(parts) == 2 and parts[0].upper() == 'X':
                legs.append(int(parts[1]))
            elif len(parts) == 2:
                lines.append((int(parts[0]), int(parts[1])))
            else:
                raise ValueError(row)
        except ValueError:
            raise GraphError(f"cannot parse graph row {number}: '{row}'")
    used = {v for line in lines for v in line} | set(legs)
    if used and used != set(range(max(used) + 1)):
        raise GraphError(f"vertices must be numbered 0..n-1, got {sorted(used)}")
    return FeynmanGraph(tuple(lines), tuple(legs))


def is_one_particle_irreducible(graph: FeynmanGraph) -> bool:
    """Connected, and stays connected after removing any single line"""
    multigraph = graph.to_networkx()
    if not nx.is_connected(multigraph):
        return False
    for i, (u, v) in enumerate(graph.lines):
        multigraph.remove_edge(u, v, key=i)
        connected = nx.is_connected(multigraph)
        multigraph.add_edge(u, v, key=i)
        if not connected:
            return False
    return True


# Named graphs

def sunset() -> FeynmanGraph:
    return FeynmanGraph(((0, 1),) * 3, (0, 1))


def bubble() -> FeynmanGraph:
    return FeynmanGraph(((0, 1),) * 2, (0, 0, 1, 1))


def bubble_chain(k: int) -> FeynmanGraph:
    """k bubbles in a row; vertex 0 and vertex k carry two legs each"""
    if k < 1:
        raise ArgumentError(f"a bubble chain needs at least one bubble, got {k}")
    lines = [(i, i + 1) for i in range(k) for _ in range(2)]
    return FeynmanGraph(tuple(lines), (0, 0, k, k))


def crossed_ladder() -> FeynmanGraph:
    """Third-order four-legged graph whose two loops share a line"""
    return FeynmanGraph(((0, 1), (0, 1), (1, 2), (0, 2)), (0, 1, 2, 2))


def ring() -> FeynmanGraph:
    """Four-vertex ring 0-1-2-3-0 with both chords and one leg per vertex"""
    return FeynmanGraph(((0, 1), (1, 2), (2, 3), (0, 3), (0, 2), (1, 3)), (0, 1, 2, 3))


def insert_two_legged(graph: FeynmanGraph, line: int, kind: str = 'sunset') -> FeynmanGraph:
    """Replace ``line`` by a string carrying a sunset (``'sunset'``) or a bare two-legged vertex (``'vertex'``).

    Later lines shift down by one index; the inserted lines are appended.
    """
    if not 0 <= line < graph.n_lines:
        raise ArgumentError(f"line {line} is not in the graph")
    a, b = graph.lines[line]
    x, y = graph.n_vertices, graph.n_vertices + 1
    kept = graph.lines[:line] + graph.lines[line + 1:]
    if kind == 'sunset':
        added = ((a, x), (x, y), (x, y), (x, y), (y, b))
    elif kind == 'vertex':
        added = ((a, x), (x, b))
    else:
        raise ArgumentError(f"unknown insertion kind '{kind}'")
    return FeynmanGraph(kept + added, graph.legs)


def random_graph(n: int, n_legs: int, rng: np.random.Generator, one_particle_irreducible: bool = True,
                 max_tries: int = 10000) -> FeynmanGraph:
    """Uniform stub pairing over n four-legged vertices, rejecting self-loops and disconnected draws"""
    if n < 2 or n_legs < 0 or n_legs > 4 * n or (4 * n - n_legs) % 2:
        raise ArgumentError(f"no four-regular graph with n={n} and {n_legs} legs")
    stubs = np.repeat(np.arange(n), 4)
    for _ in range(max_tries):
        order = rng.permutation(stubs)
        legs, rest = order[:n_legs], order[n_legs:]
        pairs = rest.reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            continue
        graph = FeynmanGraph(tuple(map(tuple, pairs)), tuple(legs), n_vertices=n)
        if not graph.is_connected():
            continue
        if one_particle_irreducible and not is_one_particle_irreducible(graph):
            continue
        return graph
    raise GraphError(f"no admissible graph with n={n}, {n_legs} legs after {max_tries} draws")


# Scales and forests

@dataclass(frozen=True)
class ScaleAssignment:
    scales: tuple

    def __post_init__(self):
        scales = tuple(int(j) for j in self.scales)
        if any(j >= 0 for j in scales):
            raise ArgumentError(f"all scales must be negative, got {scales}")
        object.__setattr__(self, 'scales', scales)

    def __getitem__(self, line: int) -> int:
        return self.scales[line]

    def __len__(self) -> int:
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)


@dataclass(frozen=True)
class Fork:
    lines: frozenset
    scale: int
    parent: int | None
    external_legs: int
    n_vertices: int
    label: str | None = None
    children: tuple = ()

    @property
    def two_legged(self) -> bool:
        return self.external_legs == 2


@dataclass(frozen=True)
class ForestShape:
    """The line sets of a forest; parents follow from containment"""
    line_sets: frozenset

    @classmethod
    def of(cls, sets: Iterable[Iterable[int]]) -> "ForestShape":
        return cls(frozenset(frozenset(s) for s in sets))


@dataclass(frozen=True)
class GNForest:
    """Forks ordered root first, then by decreasing size and smallest line index"""
    graph: FeynmanGraph
    assignment: ScaleAssignment
    forks: tuple

    @property
    def root(self) -> Fork:
        return self.forks[0]

    @property
    def shape(self) -> ForestShape:
        return ForestShape(frozenset(f.lines for f in self.forks))

    def index_of(self, lines: Iterable[int]) -> int | None:
        lines = frozenset(lines)
        for i, fork in enumerate(self.forks):
            if fork.lines == lines:
                return i
        return None

    @property
    def depth(self) -> int:
        """Longest chain of nested two-legged forks above the root"""
        best = 0
        for i, fork in enumerate(self.forks[1:], start=1):
            chain, k = 0, i
            while k is not None and k != 0:
                chain += self.forks[k].two_legged
                k = self.forks[k].parent
            best = max(best, chain)
        return best

    def with_labels(self, labels: Mapping) -> "GNForest":
        """Attach r/c labels to two-legged non-root forks.

        An r-fork sits strictly above its parent (j_f > j_π(f)); a c-fork does not.
        """
        forks = list(self.forks)
        for lines, label in labels.items():
            i = self.index_of(lines)
            if i is None or i == 0:
                raise GraphError(f"labelled line set {sorted(lines)} is not a non-root fork")
            fork = forks[i]
            if label not in LABELS:
                raise GraphError(f"label must be one of {LABELS}, got '{label}'")
            if not fork.two_legged:
                raise GraphError(f"fork {sorted(lines)} has {fork.external_legs} legs; only two-legged forks are labelled")
            parent_scale = forks[fork.parent].scale
            if label == 'c' and fork.scale > parent_scale:
                raise GraphError(f"counterterm fork {sorted(lines)} at scale {fork.scale} lies above its parent at {parent_scale}")
            if label == 'r' and fork.scale <= parent_scale:
                raise GraphError(f"renormalized fork {sorted(lines)} at scale {fork.scale} does not lie above its parent at {parent_scale}")
            forks[i] = replace(fork, label=label)
        return replace(self, forks=tuple(forks))


def _components(graph: FeynmanGraph, lines: Iterable[int]) -> list[frozenset]:
    """Line sets of the connected components spanned by ``lines``"""
    lines = list(lines)
    uf = UnionFind()
    for i in lines:
        u, v = graph.lines[i]
        uf.union(u, v)
    groups = {}
    for i in lines:
        groups.setdefault(uf[graph.lines[i][0]], set()).add(i)
    return [frozenset(g) for g in groups.values()]


def _link(sets: Sequence[frozenset]) -> list[int | None]:
    """Parent index of every set: the smallest set strictly containing it"""
    parents = []
    for s in sets:
        above = [k for k, t in enumerate(sets) if s < t]
        parents.append(min(above, key=lambda k: len(sets[k])) if above else None)
    return parents


def _assemble(graph: FeynmanGraph, assignment: ScaleAssignment, scales: Mapping, labels: Mapping) -> GNForest:
    sets = sorted(scales, key=lambda s: (-len(s), min(s)))
    parents = _link(sets)
    children = {k: tuple(i for i, p in enumerate(parents) if p == k) for k in range(len(sets))}
    forks = tuple(Fork(lines=s, scale=scales[s], parent=parents[k],
                       external_legs=graph.external_legs_of(s), n_vertices=len(graph.vertices_of(s)),
                       label=labels.get(s), children=children[k])
                  for k, s in enumerate(sets))
    return GNForest(graph=graph, assignment=assignment, forks=forks)


def _as_assignment(graph: FeynmanGraph, assignment) -> ScaleAssignment:
    if not isinstance(assignment, ScaleAssignment):
        assignment = ScaleAssignment(tuple(assignment))
    if len(assignment) != graph.n_lines:
        raise ArgumentError(f"assignment has {len(assignment)} scales for {graph.n_lines} lines")
    return assignment


def build_forest(graph: FeynmanGraph, assignment) -> GNForest:
    """All connected components of G^(≥j) over every scale j, with j_f the minimum scale on G_f"""
    assignment = _as_assignment(graph, assignment)
    if graph.n_lines == 0:
        raise GraphError("graph has no internal lines")
    if not graph.is_connected():
        raise GraphError("graph is not connected")
    scales = {}
    for j in sorted(set(assignment)):
        for component in _components(graph, [i for i in range(graph.n_lines) if assignment[i] >= j]):
            scales.setdefault(component, min(assignment[i] for i in component))
    return _assemble(graph, assignment, scales, {})


# Renormalization labels

@dataclass(frozen=True)
class _ShapeInfo:
    sets: tuple
    parents: tuple
    owner: tuple
    labels: tuple


def _shape_info(graph: FeynmanGraph, line_sets: Iterable[frozenset], labels: Mapping) -> _ShapeInfo | str:
    """Validated forest shape with labels, or the reason it admits no labelling"""
    everything = frozenset(range(graph.n_lines))
    sets = sorted({frozenset(s) for s in line_sets}, key=lambda s: (-len(s), min(s) if s else -1))
    if everything not in sets:
        return "shape does not contain the whole graph as its root"
    if any(not s or not s <= everything for s in sets):
        return "every fork must be a nonempty set of the graph's lines"
    for a, b in itertools.combinations(sets, 2):
        if a & b and not (a <= b or b <= a):
            return f"forks {sorted(a)} and {sorted(b)} overlap without nesting"
    if any(len(_components(graph, s)) != 1 for s in sets):
        return "every fork must be connected"
    parents = _link(sets)
    owner = []
    for i in range(graph.n_lines):
        owner.append(min((k for k, s in enumerate(sets) if i in s), key=lambda k: len(sets[k])))
    if set(owner) != set(range(len(sets))):
        return "every fork needs a line outside the forks above it"
    label_of = [None] * len(sets)
    for lines, label in labels.items():
        lines = frozenset(lines)
        if lines not in sets or lines == everything:
            return f"labelled line set {sorted(lines)} is not a non-root fork of the shape"
        if label not in LABELS:
            return f"label must be one of {LABELS}, got '{label}'"
        if graph.external_legs_of(lines) != 2:
            return f"fork {sorted(lines)} is not two-legged and cannot carry a label"
        label_of[sets.index(lines)] = label
    for a, b in itertools.combinations(range(1, len(sets)), 2):
        if label_of[a] == 'c' or label_of[b] == 'c' or sets[a] <= sets[b] or sets[b] <= sets[a]:
            continue
        if graph.vertices_of(sets[a]) & graph.vertices_of(sets[b]):
            return f"forks {sorted(sets[a])} and {sorted(sets[b])} share a vertex without nesting"
    return _ShapeInfo(sets=tuple(sets), parents=tuple(parents), owner=tuple(owner), labels=tuple(label_of))


def _respects_labels(info: _ShapeInfo, fork_scales: Sequence[int]) -> bool:
    for k in range(1, len(info.sets)):
        above = fork_scales[k] > fork_scales[info.parents[k]]
        if above == (info.labels[k] == 'c'):
            return False
    return True


@dataclass(frozen=True)
class Labelings:
    """Scale assignments consistent with a forest shape and its labels"""
    assignments: tuple
    consistent: bool = True
    reason: str = ''

    def __iter__(self):
        return iter(self.assignments)

    def __len__(self) -> int:
        return len(self.assignments)


def _resolve_shape(shape) -> tuple[frozenset, dict]:
    if isinstance(shape, GNForest):
        return shape.shape.line_sets, {f.lines: (f.scale, shape.forks[f.parent].lines if f.parent is not None else None)
                                       for f in shape.forks}
    if isinstance(shape, ForestShape):
        return shape.line_sets, {}
    return ForestShape.of(shape).line_sets, {}


def enumerate_labelings(graph: FeynmanGraph, j_root: int, j_floor: int, shape, labels: Mapping | None = None) -> Labelings:
    """All J with root scale ``j_root`` and scales in [j_floor, −1] consistent with ``shape`` and ``labels``.

    Lines owned by a fork (in it but in no fork above it) share one scale j_f.
    Unlabelled and r-labelled forks sit strictly above their parent and
    c-labelled forks at or below it. ``shape`` may be a GNForest, whose fork
    scales are then checked against the labels.
    """
    labels = {frozenset(k): v for k, v in (labels or {}).items()}
    if not j_floor <= j_root < 0:
        raise ArgumentError(f"need j_floor <= j_root < 0, got j_floor={j_floor}, j_root={j_root}")
    line_sets, demanded = _resolve_shape(shape)
    info = _shape_info(graph, line_sets, labels)
    if isinstance(info, str):
        return _flagged(info)
    for lines, label in labels.items():
        if label == 'c' and lines in demanded:
            scale, parent = demanded[lines]
            if scale > demanded[parent][0]:
                return _flagged(f"counterterm fork {sorted(lines)} is demanded at scale {scale} "
                                f"above its parent at {demanded[parent][0]}")
    results = []
    choices = [range(j_floor, 0)] * (len(info.sets) - 1)
    for combo in itertools.product(*choices):
        fork_scales = (j_root,) + combo
        if _respects_labels(info, fork_scales):
            results.append(ScaleAssignment(tuple(fork_scales[k] for k in info.owner)))
    return Labelings(assignments=tuple(results))


def _flagged(reason: str) -> Labelings:
    logger.warning(f"Inconsistent forest shape or labels: {reason}")
    return Labelings(assignments=(), consistent=False, reason=reason)


def renormalized_forest(graph: FeynmanGraph, assignment, shape, labels: Mapping | None = None) -> GNForest:
    """The labelled forest of ``assignment`` for a shape it is consistent with; j_f is the scale of f's own lines"""
    assignment = _as_assignment(graph, assignment)
    labels = {frozenset(k): v for k, v in (labels or {}).items()}
    line_sets, _ = _resolve_shape(shape)
    info = _shape_info(graph, line_sets, labels)
    if isinstance(info, str):
        raise GraphError(info)
    fork_scales = []
    for k in range(len(info.sets)):
        own = {assignment[i] for i in range(graph.n_lines) if info.owner[i] == k}
        if len(own) != 1:
            raise GraphError(f"lines owned by fork {sorted(info.sets[k])} carry several scales {sorted(own)}")
        fork_scales.append(own.pop())
    if not _respects_labels(info, fork_scales):
        raise GraphError("assignment violates the parent-scale constraints of the labelled shape")
    scales = dict(zip(info.sets, fork_scales))
    label_map = {s: lab for s, lab in zip(info.sets, info.labels) if lab}
    return _assemble(graph, assignment, scales, label_map)


# Trees, loops and overlaps

def _tree_restricts(graph: FeynmanGraph, tree: frozenset, forest: GNForest) -> bool:
    if len(tree) != graph.n_vertices - 1 or len(_components(graph, tree)) != 1:
        return False
    for fork in forest.forks:
        inside = tree & fork.lines
        if len(inside) != fork.n_vertices - 1 or len(_components(graph, inside)) != 1:
            return False
    return True


def choose_spanning_tree(graph: FeynmanGraph, forest: GNForest) -> frozenset:
    """Greedy spanning tree over lines in decreasing scale, ties by index; T ∩ G_f spans every G_f.

    Forests with counterterm forks can defeat the greedy order; the tree is
    then built fork by fork, smallest forks first.
    """
    if not graph.is_connected():
        raise GraphError("graph is not connected")
    order = sorted(range(graph.n_lines), key=lambda i: (-forest.assignment[i], i))
    uf = UnionFind(range(graph.n_vertices))
    tree = set()
    for i in order:
        u, v = graph.lines[i]
        if uf[u] != uf[v]:
            uf.union(u, v)
            tree.add(i)
    tree = frozenset(tree)
    if _tree_restricts(graph, tree, forest):
        return tree

    logger.debug("Greedy tree does not restrict to every fork; building fork by fork")
    tree = set()
    for fork in sorted(forest.forks, key=lambda f: len(f.lines)):
        uf = UnionFind(range(graph.n_vertices))
        for i in tree & fork.lines:
            uf.union(*graph.lines[i])
        for i in order:
            if i in fork.lines:
                u, v = graph.lines[i]
                if uf[u] != uf[v]:
                    uf.union(u, v)
                    tree.add(i)
    tree = frozenset(tree)
    if not _tree_restricts(graph, tree, forest):
        raise GraphError("no spanning tree restricts to a spanning tree of every fork")
    return tree


def _tree_path(graph: FeynmanGraph, tree: frozenset, a: int, b: int) -> frozenset:
    t = nx.Graph()
    t.add_nodes_from(range(graph.n_vertices))
    index = {}
    for i in tree:
        u, v = graph.lines[i]
        t.add_edge(u, v)
        index[(u, v)] = i
    path = nx.shortest_path(t, a, b)
    return frozenset(index[tuple(sorted(step))] for step in zip(path, path[1:]))


def loop_of_line(graph: FeynmanGraph, tree: frozenset, line: int) -> frozenset:
    """Λ_ℓ: the line plus the tree path joining its ends"""
    if line in tree:
        raise ArgumentError(f"line {line} belongs to the spanning tree")
    if not 0 <= line < graph.n_lines:
        raise ArgumentError(f"line {line} is not in the graph")
    u, v = graph.lines[line]
    return _tree_path(graph, tree, u, v) | {line}


def external_path(graph: FeynmanGraph, tree: frozenset) -> frozenset:
    """Tree lines joining the external legs"""
    ends = sorted(set(graph.legs))
    path = frozenset()
    for v in ends[1:]:
        path |= _tree_path(graph, tree, ends[0], v)
    return path


@dataclass(frozen=True)
class OverlappingTriple:
    tree_line: int
    first: int
    second: int


def find_overlapping_triple(graph: FeynmanGraph, tree: frozenset,
                            assignment: ScaleAssignment | None = None) -> OverlappingTriple | None:
    """First tree line, by decreasing scale then index, lying on two loops; loop pairs by index"""
    loops = {i: loop_of_line(graph, tree, i) for i in range(graph.n_lines) if i not in tree}
    scale = (lambda i: assignment[i]) if assignment is not None else (lambda i: 0)
    for t in sorted(tree, key=lambda i: (-scale(i), i)):
        through = [i for i in sorted(loops) if t in loops[i]]
        if len(through) >= 2:
            return OverlappingTriple(tree_line=t, first=through[0], second=through[1])
    return None


def _contract_two_legged(graph: FeynmanGraph) -> tuple[list, Counter, set]:
    """Lines, legs and vertices after repeatedly collapsing two-legged vertex sets into strings"""
    lines = list(graph.lines)
    legs = Counter(graph.legs)
    vertices = set(range(graph.n_vertices))
    changed = True
    while changed:
        changed = False
        for size in range(1, len(vertices)):
            for subset in itertools.combinations(sorted(vertices), size):
                inside = set(subset)
                crossing = [(u, v) for u, v in lines if (u in inside) != (v in inside)]
                n_legs = sum(legs[v] for v in inside)
                if n_legs + len(crossing) != 2:
                    continue
                induced = nx.MultiGraph()
                induced.add_nodes_from(inside)
                induced.add_edges_from((u, v) for u, v in lines if u in inside and v in inside)
                if not nx.is_connected(induced):
                    continue
                outer = [v if u in inside else u for u, v in crossing]
                lines = [(u, v) for u, v in lines if u not in inside and v not in inside]
                for v in inside:
                    legs.pop(v, None)
                vertices -= inside
                if len(outer) == 2:
                    lines.append(tuple(sorted(outer)))
                elif len(outer) == 1:
                    legs[outer[0]] += 1
                changed = True
                break
            if changed:
                break
    return lines, legs, vertices


def classify_four_legged(graph: FeynmanGraph) -> str:
    """``'ladder'`` when two-legged strings contract to a chain joined pairwise by exactly two lines"""
    if graph.n_legs != 4:
        raise GraphError(f"expected a four-legged graph, got {graph.n_legs} legs")
    if not graph.is_connected():
        raise GraphError("graph is not connected")
    lines, legs, vertices = _contract_two_legged(graph)
    if len(vertices) == 1:
        return 'ladder'
    if any(u == v for u, v in lines):
        return 'overlapping'
    multiplicity = Counter(lines)
    simple = nx.Graph(list(multiplicity))
    simple.add_nodes_from(vertices)
    is_path = nx.is_tree(simple) and max(d for _, d in simple.degree()) <= 2
    if is_path and all(m == 2 for m in multiplicity.values()):
        return 'ladder'
    return 'overlapping'


# Power counting

@dataclass(frozen=True)
class ForkScaleSum:
    exact: float
    bound: float
    kind: str


def fork_scale_sum(external_legs: int, M: float, j_parent: int) -> ForkScaleSum:
    """Σ_{j_π < j_f ≤ −1} M^{½(j_f−j_π)(4−E_f)} with its bound |j_π| (E_f = 4) or 1/(M−1) (E_f > 4)"""
    if M <= 1:
        raise ArgumentError(f"M must exceed 1, got {M}")
    if external_legs < 4:
        raise ArgumentError(f"forks with {external_legs} legs need renormalization, not a scale sum")
    if j_parent >= 0:
        raise ArgumentError(f"parent scale must be negative, got {j_parent}")
    exact = sum(M ** (0.5 * (jf - j_parent) * (4 - external_legs)) for jf in range(j_parent + 1, 0))
    if external_legs == 4:
        return ForkScaleSum(exact=exact, bound=float(abs(j_parent)), kind='abs_j')
    return ForkScaleSum(exact=exact, bound=1.0 / (M - 1.0), kind='geometric')


@dataclass(frozen=True)
class ForkLedgerEntry:
    fork: int
    lines: frozenset
    external_legs: int
    scale: int
    parent_scale: int
    coefficient: float
    exponent: float
    scale_sum: str
    bound: float
    j_power: int
    label: str | None = None


@dataclass(frozen=True)
class PowerCountingReport:
    order: int
    external_legs: int
    M: float
    s0: int
    s: int
    m_power: float
    j_power: int
    realized_j_factors: int
    fork_count: int
    fork_count_ceiling: int
    loop_lines: int
    tree_lines: int
    ledger: tuple
    insertions: tuple
    depth: int
    symmetry_factor: float
    classification: str
    epsilon: float | None = None
    discount_line: int | None = None
    triple: OverlappingTriple | None = None

    @property
    def identity_holds(self) -> bool:
        return self.external_legs != 2 or self.j_power == 3 * self.order - 2

    def to_text(self) -> str:
        rows = [f"order n = {self.order}, E = {self.external_legs}, class = {self.classification}",
                f"bound ~ |j|^{self.j_power} M^({self.m_power:g} j)   (s0={self.s0}, s={self.s})",
                f"realized |j| factors {self.realized_j_factors}; forks {self.fork_count} <= {self.fork_count_ceiling}",
                f"depth {self.depth}, symmetry factor {self.symmetry_factor:g}"]
        if self.discount_line is not None:
            rows.append(f"overlap discount M^({self.epsilon:g} j) on line {self.discount_line}")
        for entry in self.insertions + self.ledger:
            rows.append(f"  fork {entry.fork} lines {sorted(entry.lines)} E={entry.external_legs} "
                        f"j={entry.scale} parent={entry.parent_scale} sum={entry.scale_sum} |j|^{entry.j_power}")
        return "\n".join(rows)


def ledger_table(report: PowerCountingReport) -> pd.DataFrame:
    columns = ['fork', 'lines', 'E_f', 'j_f', 'j_parent', 'coefficient', 'exponent', 'scale_sum', 'bound', 'j_power', 'label']
    rows = [{'fork': e.fork, 'lines': " ".join(map(str, sorted(e.lines))), 'E_f': e.external_legs,
             'j_f': e.scale, 'j_parent': e.parent_scale, 'coefficient': e.coefficient, 'exponent': e.exponent,
             'scale_sum': e.scale_sum, 'bound': e.bound, 'j_power': e.j_power, 'label': e.label or ''}
            for e in report.insertions + report.ledger]
    return pd.DataFrame(rows, columns=columns)


def _minimal_two_legged(forest: GNForest) -> list[int]:
    minimal = []
    for i, fork in enumerate(forest.forks[1:], start=1):
        if not fork.two_legged:
            continue
        k, nested = fork.parent, False
        while k is not None and k != 0:
            nested |= forest.forks[k].two_legged
            k = forest.forks[k].parent
        if not nested:
            minimal.append(i)
    return minimal


def _classification(graph: FeynmanGraph) -> str:
    if graph.n_legs == 2:
        return 'two-legged'
    if graph.n_legs == 4:
        return 'ladder' if classify_four_legged(graph) == 'ladder' else 'overlapping-four-legged'
    return 'higher'


def power_count_bound(graph: FeynmanGraph, forest: GNForest, M: float = 2.0, s0: int = 0, s: int = 0) -> PowerCountingReport:
    """Exponent ledger of the naive bound and its scale sums, highest forks first.

    Minimal two-legged forks become generalized vertices contributing
    |j|^{3n_f−1}; the remaining forks contribute M^{½(j_f−j_π)(4−E_f)}, summed
    to |j| (E_f = 4) or 1/(M−1) (E_f > 4). The |j|-power uses the fork-count
    ceiling L̃−1.
    """
    if forest.graph != graph:
        raise GraphError("forest was built for a different graph")
    if M <= 1:
        raise ArgumentError(f"M must exceed 1, got {M}")
    if s0 < 0 or s < 0:
        raise ArgumentError("derivative orders must be nonnegative")
    forks = forest.forks
    minimal = _minimal_two_legged(forest)
    absorbed = set()
    for i in minimal:
        absorbed |= {k for k, f in enumerate(forks) if f.lines <= forks[i].lines}
    for a, b in itertools.combinations(minimal, 2):
        if graph.vertices_of(forks[a].lines) & graph.vertices_of(forks[b].lines):
            raise GraphError(f"two-legged forks {a} and {b} share a vertex")

    rep = {}
    for i in minimal:
        for v in graph.vertices_of(forks[i].lines):
            rep[v] = ('insertion', i)
    inserted_lines = set().union(*(forks[i].lines for i in minimal)) if minimal else set()
    kept_lines = [k for k in range(graph.n_lines) if k not in inserted_lines]

    def node(v):
        return rep.get(v, v)

    nodes = {node(v) for v in range(graph.n_vertices)}
    degree = Counter(node(v) for v in graph.legs)
    for k in kept_lines:
        for v in graph.lines[k]:
            degree[node(v)] += 1
    loop_lines, tree_lines = len(kept_lines), len(nodes) - 1

    insertions = tuple(ForkLedgerEntry(fork=i, lines=forks[i].lines, external_legs=2, scale=forks[i].scale,
                                       parent_scale=forks[forks[i].parent].scale, coefficient=1.0,
                                       exponent=float(forks[i].scale - forks[forks[i].parent].scale),
                                       scale_sum='insertion', bound=math.nan,
                                       j_power=3 * forks[i].n_vertices - 1, label=forks[i].label or 'r')
                       for i in minimal)
    ledger = []
    for i, fork in enumerate(forks[1:], start=1):
        if i in absorbed:
            continue
        kept = [k for k in fork.lines if k not in inserted_lines]
        legs_tilde = sum(degree[x] for x in {node(v) for k in kept for v in graph.lines[k]}) - 2 * len(kept)
        parent_scale = forks[fork.parent].scale
        coefficient = 0.5 * (4 - legs_tilde)
        if legs_tilde == 4:
            kind, bound, power = 'abs_j', float(abs(forest.root.scale)), 1
        else:
            kind, bound, power = 'geometric', 1.0 / (M - 1.0), 0
        ledger.append(ForkLedgerEntry(fork=i, lines=fork.lines, external_legs=legs_tilde, scale=fork.scale,
                                      parent_scale=parent_scale, coefficient=coefficient,
                                      exponent=coefficient * (fork.scale - parent_scale), scale_sum=kind,
                                      bound=bound, j_power=power, label=fork.label))
    insertion_power = sum(e.j_power for e in insertions)
    ceiling = loop_lines - 1
    symmetry = 1.0
    for fork in forks:
        symmetry /= math.factorial(len(fork.children))
    return PowerCountingReport(
        order=graph.order, external_legs=graph.n_legs, M=M, s0=s0, s=s,
        m_power=0.5 * (4 - graph.n_legs) - s0 - s,
        j_power=(loop_lines - tree_lines) + ceiling + insertion_power,
        realized_j_factors=(loop_lines - tree_lines) + sum(e.j_power for e in ledger) + insertion_power,
        fork_count=len(ledger), fork_count_ceiling=ceiling, loop_lines=loop_lines, tree_lines=tree_lines,
        ledger=tuple(ledger), insertions=insertions, depth=forest.depth, symmetry_factor=symmetry,
        classification=_classification(graph))


def derivative_bound_report(graph: FeynmanGraph, forest: GNForest, M: float = 2.0, s0: int = 0, s1: int = 0,
                            epsilon: float = 0.1) -> PowerCountingReport:
    """Improved exponent (1 − s₀ − s₁ + ε·1(s₀+s₁ ≥ 1))·j, the M^{εj} discount sitting on an overlapping tree line"""
    if graph.n_legs != 2:
        raise GraphError(f"derivative bounds are for two-legged graphs, got {graph.n_legs} legs")
    if s0 not in (0, 1, 2) or s1 not in (0, 1, 2):
        raise ArgumentError(f"derivative orders must lie in {{0, 1, 2}}, got s0={s0}, s1={s1}")
    if not 0 < epsilon < 1:
        raise ArgumentError(f"epsilon must lie in (0, 1), got {epsilon}")
    report = power_count_bound(graph, forest, M, s0, s1)
    if s0 + s1 == 0:
        return replace(report, epsilon=epsilon)
    tree = choose_spanning_tree(graph, forest)
    triple = find_overlapping_triple(graph, tree, forest.assignment)
    if triple is None:
        raise GraphError("two-legged graph has no overlapping loops; is it one-particle irreducible?")
    return replace(report, m_power=report.m_power + epsilon, epsilon=epsilon,
                   discount_line=triple.tree_line, triple=triple)


def exponent_identity_sweep(n_graphs: int = 200, max_order: int = 6, seed: int = 0, M: float = 2.0,
                            j_floor: int = -4) -> pd.DataFrame:
    """Power counting over random two-legged 1PI graphs and random scale assignments"""
    rng = get_rng(seed)
    rows = []
    for _ in range(n_graphs):
        n = int(rng.integers(2, max_order + 1))
        graph = random_graph(n, 2, rng)
        assignment = ScaleAssignment(tuple(int(j) for j in rng.integers(j_floor, 0, size=graph.n_lines)))
        report = power_count_bound(graph, build_forest(graph, assignment), M)
        expected = 3 * graph.order - 2
        rows.append({'order': n, 'graph_order': graph.order, 'n_lines': graph.n_lines, 'j_power': report.j_power,
                     'expected': expected, 'realized': report.realized_j_factors,
                     'fork_count': report.fork_count, 'ceiling': report.fork_count_ceiling, 'depth': report.depth,
                     'identity_holds': report.j_power == expected})
    table = pd.DataFrame(rows)
    failures = int((~table['identity_holds']).sum()) if len(table) else 0
    logger.info(f"Exponent identity over {n_graphs} graphs: {failures} failures")
    return table
