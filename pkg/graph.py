"""
Routing Topology - AOSPR Routing Lab
====================================
Directed-acyclic network model for single source/destination routing:
  - build_dag / load_dag   validate, prune dead edges, densify edge ids
  - enumerate_paths        exhaustive s→d path list under a cap
  - covering_set           greedy maximum-coverage covering strategies
  - shortest_path          min-weight path with lexicographic tie-break

Edges are addressed by 0-based index everywhere in code; the public edge id
is index + 1 (ids are dense 1..n in file order after pruning).
"""

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path as FilePath
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)

Vertex = Hashable
EdgeList = Sequence[Tuple[Vertex, Vertex]]


# ─────────────────────────────────────────────
#  Errors
# ─────────────────────────────────────────────

class GraphError(ValueError):
    pass


class CycleDetected(GraphError):
    pass


class NoPath(GraphError):
    pass


class PathExplosion(GraphError):
    pass


class TooFewPaths(GraphError):
    pass


# ─────────────────────────────────────────────
#  Domain types
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class Path:
    """Ordered edge-index sequence. Subset strategies reuse it with sorted indices."""
    edges: Tuple[int, ...]

    def __post_init__(self):
        edges = tuple(int(e) for e in self.edges)
        if not edges:
            raise GraphError("a path needs at least one edge")
        if len(set(edges)) != len(edges):
            raise GraphError(f"repeated edge in path {edges}")
        object.__setattr__(self, 'edges', edges)

    def __len__(self) -> int:
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)

    def __contains__(self, e) -> bool:
        return e in self.edges

    @property
    def edge_ids(self) -> Tuple[int, ...]:
        return tuple(e + 1 for e in self.edges)

    @property
    def index_array(self) -> np.ndarray:
        return np.fromiter(self.edges, dtype=np.int64, count=len(self.edges))

    def incidence(self, n: int) -> np.ndarray:
        row = np.zeros(n, dtype=bool)
        row[list(self.edges)] = True
        return row


@dataclass(frozen=True)
class PruneReport:
    kept: Tuple[int, ...]                        # input positions, in new edge order
    dropped: Tuple[Tuple[Vertex, Vertex], ...]   # edges on no s→d path

    @property
    def pruned(self) -> int:
        return len(self.dropped)


@dataclass(frozen=True)
class Dag:
    vertices: Tuple[Vertex, ...]                 # topological order
    edges: Tuple[Tuple[Vertex, Vertex], ...]
    source: Vertex
    destination: Vertex
    out_edges: Dict[Vertex, Tuple[int, ...]] = field(init=False, repr=False, compare=False)
    in_edges: Dict[Vertex, Tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        out_map: Dict[Vertex, List[int]] = {v: [] for v in self.vertices}
        in_map: Dict[Vertex, List[int]] = {v: [] for v in self.vertices}
        for idx, (u, v) in enumerate(self.edges):
            out_map[u].append(idx)
            in_map[v].append(idx)
        object.__setattr__(self, 'out_edges', {v: tuple(es) for v, es in out_map.items()})
        object.__setattr__(self, 'in_edges', {v: tuple(es) for v, es in in_map.items()})

    @property
    def n(self) -> int:
        return len(self.edges)

    def tail(self, e: int) -> Vertex:
        return self.edges[e][0]

    def head(self, e: int) -> Vertex:
        return self.edges[e][1]

    def is_route(self, edges: Sequence[int]) -> bool:
        if not edges or self.tail(edges[0]) != self.source or self.head(edges[-1]) != self.destination:
            return False
        return all(self.head(a) == self.tail(b) for a, b in zip(edges, edges[1:]))

    def path_from_ids(self, ids: Sequence[int]) -> Path:
        edges = tuple(int(i) - 1 for i in ids)
        if any(e < 0 or e >= self.n for e in edges) or not self.is_route(edges):
            raise GraphError(f"edge ids {list(ids)} do not form an s→d path")
        return Path(edges)


@dataclass(frozen=True)
class PathSet:
    paths: Tuple[Path, ...]
    n: int
    incidence: np.ndarray = field(init=False, repr=False, compare=False)
    index: Dict[Path, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.paths) < 2:
            raise TooFewPaths(f"need at least 2 candidate paths, got {len(self.paths)}")
        if len(set(self.paths)) != len(self.paths):
            raise GraphError("candidate paths must be distinct")
        inc = np.zeros((len(self.paths), self.n), dtype=np.float64)
        for i, p in enumerate(self.paths):
            inc[i, list(p.edges)] = 1.0
        uncovered = np.flatnonzero(inc.sum(axis=0) == 0)
        if uncovered.size:
            raise GraphError(f"edges {[int(e) + 1 for e in uncovered]} lie on no candidate path")
        inc.setflags(write=False)
        object.__setattr__(self, 'incidence', inc)
        object.__setattr__(self, 'index', {p: i for i, p in enumerate(self.paths)})

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> Path:
        return self.paths[i]

    @property
    def N(self) -> int:
        return len(self.paths)

    @property
    def k(self) -> int:
        return max(len(p) for p in self.paths)


@dataclass(frozen=True)
class CoveringSet:
    """
    Covering strategies plus the designated cover of every edge.
    `assignment[e]` is the position (in `paths`) of the one designated
    covering path of edge e; `indices` are PathSet indices when the cover
    was drawn from an enumerated PathSet, empty otherwise.
    """
    paths: Tuple[Path, ...]
    assignment: Tuple[int, ...]
    indices: Tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def designated(self) -> Dict[int, int]:
        """edge -> PathSet index (or cover position when not enumerated)"""
        ref = self.indices or tuple(range(len(self.paths)))
        return {e: ref[pos] for e, pos in enumerate(self.assignment)}

    def position_of(self, path: Path) -> Optional[int]:
        try:
            return self.paths.index(path)
        except ValueError:
            return None

    def incidence(self) -> np.ndarray:
        inc = np.zeros((len(self.paths), self.n), dtype=np.float64)
        for c, p in enumerate(self.paths):
            inc[c, list(p.edges)] = 1.0
        return inc

    @cached_property
    def _designation(self) -> np.ndarray:
        return np.asarray(self.assignment, dtype=np.int64)

    def mixture_masses(self, eps: np.ndarray) -> np.ndarray:
        """Exploration mass of each covering path: ε summed over the edges it is designated for."""
        return np.bincount(self._designation, weights=eps, minlength=len(self.paths))


# ─────────────────────────────────────────────
#  Construction
# ─────────────────────────────────────────────

def build_dag(edges: EdgeList, s: Vertex, d: Vertex) -> Tuple[Dag, PruneReport]:
    """
    Validate an edge list and keep only edges that lie on some s→d path.
    Retained edges keep their relative input order; ids are re-densified.
    """
    if not edges:
        raise GraphError("edge list is empty")
    if s == d:
        raise GraphError("source and destination must differ")

    g = nx.MultiDiGraph()
    first_seen: Dict[Vertex, int] = {}
    for pos, (u, v) in enumerate(edges):
        for x in (u, v):
            first_seen.setdefault(x, len(first_seen))
        g.add_edge(u, v, key=pos)

    if not nx.is_directed_acyclic_graph(g):
        cycle = nx.find_cycle(g)
        raise CycleDetected(f"directed cycle through {[c[0] for c in cycle]}")
    if s not in g or d not in g:
        raise NoPath(f"{'source' if s not in g else 'destination'} is not incident to any edge")

    reach = nx.descendants(g, s) | {s}
    coreach = nx.ancestors(g, d) | {d}
    if d not in reach:
        raise NoPath(f"no path from {s!r} to {d!r}")

    kept = tuple(pos for pos, (u, v) in enumerate(edges) if u in reach and v in coreach)
    kept_set = set(kept)
    dropped = tuple((u, v) for pos, (u, v) in enumerate(edges) if pos not in kept_set)
    kept_edges = tuple((edges[pos][0], edges[pos][1]) for pos in kept)

    sub = nx.MultiDiGraph()
    sub.add_edges_from(kept_edges)
    order = tuple(nx.lexicographical_topological_sort(sub, key=lambda v: first_seen[v]))

    if dropped:
        logger.info(f"[GRAPH] pruned {len(dropped)} edge(s) off every {s!r}→{d!r} path: {list(dropped)}")
    dag = Dag(vertices=order, edges=kept_edges, source=s, destination=d)
    return dag, PruneReport(kept=kept, dropped=dropped)


def load_dag(path) -> Tuple[Dag, PruneReport]:
    """Read {vertices, edges: [[u,v],...], source, destination} JSON."""
    return build_dag(*read_graph(path))


def read_graph(path) -> Tuple[List[Tuple[Hashable, Hashable]], Hashable, Hashable]:
    """(edges, source, destination) of a graph file, unpruned."""
    file_path = FilePath(path)
    try:
        doc = json.loads(file_path.read_text())
    except OSError as e:
        raise GraphError(f"cannot read graph file {file_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise GraphError(f"graph file {file_path} is not valid JSON: {e}") from e

    missing = [key for key in ('edges', 'source', 'destination') if key not in doc]
    if missing:
        raise GraphError(f"graph file {file_path} lacks {missing}")
    edges = [tuple(e) for e in doc['edges']]
    if any(len(e) != 2 for e in edges):
        raise GraphError(f"graph file {file_path}: every edge must be a [u, v] pair")
    declared = doc.get('vertices')
    if declared is not None:
        unknown = {x for e in edges for x in e} - set(declared)
        if unknown:
            raise GraphError(f"graph file {file_path}: undeclared vertices {sorted(map(str, unknown))}")
    return edges, doc['source'], doc['destination']


# ─────────────────────────────────────────────
#  Paths
# ─────────────────────────────────────────────

def count_paths(dag: Dag) -> int:
    counts: Dict[Vertex, int] = {dag.destination: 1}
    for v in reversed(dag.vertices):
        if v == dag.destination:
            continue
        counts[v] = sum(counts.get(dag.head(e), 0) for e in dag.out_edges[v])
    return counts.get(dag.source, 0)


def enumerate_paths(dag: Dag, cap: int) -> PathSet:
    """All s→d paths in lexicographic edge-id order, or PathExplosion past `cap`."""
    if cap < 1:
        raise GraphError(f"cap must be positive, got {cap}")
    total = count_paths(dag)
    if total > cap:
        raise PathExplosion(f"{total} s→d paths exceed the enumeration cap {cap}; use a sampler space")

    found: List[Path] = []
    stack: List[Tuple[Vertex, Tuple[int, ...]]] = [(dag.source, ())]
    while stack:
        v, prefix = stack.pop()
        if v == dag.destination:
            found.append(Path(prefix))
            continue
        # reversed push keeps ascending edge order on pop
        for e in reversed(dag.out_edges[v]):
            stack.append((dag.head(e), prefix + (e,)))

    if total > 0.8 * cap:
        logger.warning(f"[GRAPH] {total} paths is close to the enumeration cap {cap}")
    return PathSet(paths=tuple(found), n=dag.n)


def covering_set(paths: PathSet) -> CoveringSet:
    """Greedy maximum coverage; first selected path containing an edge is its designated cover."""
    uncovered = np.ones(paths.n, dtype=bool)
    assignment = np.full(paths.n, -1, dtype=np.int64)
    chosen: List[int] = []
    while uncovered.any():
        gains = paths.incidence @ uncovered
        best = int(np.argmax(gains))        # first maximum = lexicographically smallest
        fresh = uncovered & paths.incidence[best].astype(bool)
        assignment[fresh] = len(chosen)
        uncovered &= ~fresh
        chosen.append(best)

    cover = CoveringSet(
        paths=tuple(paths[i] for i in chosen),
        assignment=tuple(int(a) for a in assignment),
        indices=tuple(chosen),
    )
    ideal = -(-paths.n // paths.k)
    if len(cover) > ideal:
        logger.info(f"[COVER] greedy cover has {len(cover)} paths, above the disjoint size {ideal}")
    return cover


def best_path(dag: Dag, costs: np.ndarray) -> Path:
    """Min-cost s→d path for arbitrary finite costs; ties go to the lexicographically smallest."""
    best: Dict[Vertex, Tuple[float, Tuple[int, ...]]] = {dag.destination: (0.0, ())}
    for v in reversed(dag.vertices):
        if v == dag.destination:
            continue
        options = [
            (float(costs[e]) + best[dag.head(e)][0], (e,) + best[dag.head(e)][1])
            for e in dag.out_edges[v]
            if dag.head(e) in best
        ]
        if options:
            best[v] = min(options)
    return Path(best[dag.source][1])


def shortest_path(dag: Dag, weights) -> Path:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (dag.n,):
        raise GraphError(f"expected {dag.n} edge weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise GraphError("edge weights must be finite and nonnegative")
    return best_path(dag, w)


def dag_covering_paths(dag: Dag) -> CoveringSet:
    """covering_set's greedy rule without enumeration: each pick is a max-gain DAG path."""
    uncovered = np.ones(dag.n, dtype=bool)
    assignment = np.full(dag.n, -1, dtype=np.int64)
    chosen: List[Path] = []
    while uncovered.any():
        pick = best_path(dag, -uncovered.astype(np.float64))
        idx = pick.index_array
        fresh = idx[uncovered[idx]]
        assignment[fresh] = len(chosen)
        uncovered[fresh] = False
        chosen.append(pick)
    return CoveringSet(paths=tuple(chosen), assignment=tuple(int(a) for a in assignment))


# ─────────────────────────────────────────────
#  Synthetic topologies
# ─────────────────────────────────────────────

def parallel_chains(count: int, length: int) -> List[Tuple[str, str]]:
    """`count` vertex-disjoint s→d chains of `length` edges, chain by chain."""
    edges: List[Tuple[str, str]] = []
    for j in range(count):
        hops = ['s'] + [f'c{j}_{i}' for i in range(1, length)] + ['d']
        edges.extend(zip(hops, hops[1:]))
    return edges


def parallel_edges(count: int) -> List[Tuple[str, str]]:
    return [('s', 'd')] * count


def layered(width: int, layers: int) -> List[Tuple[str, str]]:
    """Fully connected layers: width**layers s→d paths."""
    edges: List[Tuple[str, str]] = [('s', f'L1_{j}') for j in range(width)]
    for layer in range(1, layers):
        for a in range(width):
            for b in range(width):
                edges.append((f'L{layer}_{a}', f'L{layer + 1}_{b}'))
    edges.extend((f'L{layers}_{j}', 'd') for j in range(width))
    return edges


def subset_lattice(n: int, k: int) -> Tuple[List[Tuple[Tuple[int, int], Tuple[int, int]]], List[int]]:
    """
    DAG whose s→d paths are exactly the k-subsets of n items in index order.
    Vertex (i, j): first i items decided, j taken. Returns (edges, item_of_edge)
    with item_of_edge = -1 for skip edges.
    """
    if not 1 <= k <= n:
        raise GraphError(f"need 1 <= k <= n, got k={k}, n={n}")
    edges = []
    items = []
    for i in range(n):
        for j in range(max(0, k - (n - i)), min(i, k) + 1):
            if j < k:
                edges.append(((i, j), (i + 1, j + 1)))
                items.append(i)
            if n - i - 1 >= k - j:
                edges.append(((i, j), (i + 1, j)))
                items.append(-1)
    return edges, items
