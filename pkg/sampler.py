"""
Efficient Route Sampling - AOSPR Routing Lab
============================================
Sampling from exponential weights without listing every strategy:
  - DpTables / build_tables     suffix and prefix elementary-symmetric sums
  - sample_path                 link-by-link scan in increasing edge index
  - marginals                   prefix × w × suffix over W(1, k)
  - SubsetSpace                 all k-subsets of n edges (index order)
  - DagSpace                    s→d routes of a DAG by weight pushing

All table arithmetic is in the log domain.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from config import PATH_CAP
from graph import (
    CoveringSet, Dag, GraphError, Path, PathSet, TooFewPaths, best_path, count_paths,
    dag_covering_paths, enumerate_paths,
)
from policy import ActionSpace, NumericUnderflow

logger = logging.getLogger(__name__)


class InternalInvariant(RuntimeError):
    pass


# ─────────────────────────────────────────────
#  DP tables
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class DpTables:
    """
    suffix_rows[k̄, ē] = log W(ē, k̄) for ē = 1..n+1 (column 0 unused),
    prefix_rows[k̄, ē] = log W̄(ē, k̄) for ē = 0..n. Edge ē is log_w[ē-1].
    One row per subset size, so a fixed-k̄ slice is contiguous; `falling_rows`
    is -suffix_rows, non-decreasing along ē, for the sampler's searches.
    """
    log_w: np.ndarray
    k: int
    suffix_rows: np.ndarray
    prefix_rows: np.ndarray
    falling_rows: np.ndarray

    @property
    def n(self) -> int:
        return self.log_w.size

    @property
    def log_suffix(self) -> np.ndarray:
        """[ē, k̄] view of the suffix table."""
        return self.suffix_rows.T

    @property
    def log_prefix(self) -> np.ndarray:
        return self.prefix_rows.T

    @property
    def log_total(self) -> float:
        return float(self.suffix_rows[self.k, 1])

    def W(self, e: int, kk: int) -> float:
        return math.exp(self.suffix_rows[kk, e])

    def W_bar(self, e: int, kk: int) -> float:
        return math.exp(self.prefix_rows[kk, e])


def build_tables(weights, k: int) -> DpTables:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("DP weights must be a vector of finite positive reals")
    return build_tables_log(np.log(w), k)


def build_tables_log(log_w: np.ndarray, k: int) -> DpTables:
    """
    Both tables are prefix sums: W̄ over edges 1..n and W over the reversed
    order n..1. Each subset size is one log-sum-exp accumulate over both
    orders at once.
    """
    log_w = np.asarray(log_w, dtype=np.float64)
    n = log_w.size
    if not 0 <= k <= n:
        raise ValueError(f"subset size must satisfy 0 <= k <= n, got k={k}, n={n}")

    orders = np.stack([log_w, log_w[::-1]])
    runs = np.full((k + 1, 2, n + 1), -np.inf)          # [k̄, order, edges taken]
    runs[0] = 0.0
    for kk in range(1, k + 1):
        runs[kk, :, 1:] = np.logaddexp.accumulate(orders + runs[kk - 1, :, :n], axis=1)

    suffix = np.full((k + 1, n + 2), -np.inf)
    suffix[:, 1:] = runs[:, 1, ::-1]                    # W(ē, k̄) sums over the last n-ē+1 edges
    prefix = np.ascontiguousarray(runs[:, 0, :])

    if k > 0 and not np.isfinite(suffix[k, 1]):
        raise NumericUnderflow(f"W(1,{k}) underflowed: fewer than {k} edges carry weight")
    return DpTables(log_w=log_w, k=k, suffix_rows=suffix, prefix_rows=prefix, falling_rows=-suffix)


def _select_prob(tables: DpTables, e: int, remaining: int) -> float:
    """P(pick edge e | `remaining` picks still needed from e..n)."""
    rows = tables.suffix_rows
    if not np.isfinite(rows[remaining, e + 1]):
        return 1.0
    return math.exp(tables.log_w[e - 1] + rows[remaining - 1, e + 1] - rows[remaining, e])


def sample_path(tables: DpTables, rng: np.random.Generator) -> Path:
    """
    Scan edges in increasing index, selecting e with w(e)·W(e+1, r-1)/W(e, r).
    The skips before a selection telescope: the next pick from `start` is
    at or before e with probability 1 - W(e+1, r)/W(start, r), so each pick
    is one search on the (non-increasing) suffix row.
    """
    k = tables.k
    falling = tables.falling_rows
    log_tail = np.log1p(-rng.random(k)).tolist()        # log(1 - u)
    chosen: List[int] = []
    start = 1
    for remaining in range(k, 0, -1):
        top = float(falling[remaining, start])           # -log W(start, r)
        if top == math.inf:
            raise InternalInvariant(f"subset scan ran out of weight at edge {start} with {remaining} picks left")
        e = start + int(falling[remaining, start + 1:].searchsorted(top - log_tail[k - remaining], side='right'))
        chosen.append(e - 1)
        start = e + 1
    if len(chosen) != k or (chosen and chosen[-1] >= tables.n):
        raise InternalInvariant(f"subset scan selected {chosen}, expected {k} of {tables.n} edges")
    return Path(tuple(chosen))


def sequential_log_prob(tables: DpTables, subset: Path) -> float:
    """Log of the product of the scan's selection factors along `subset`."""
    members = set(subset.edges)
    total = 0.0
    picked = 0
    for e in range(1, tables.n + 1):
        remaining = tables.k - picked
        if remaining == 0:
            break
        p = _select_prob(tables, e, remaining)
        if (e - 1) in members:
            total += math.log(p) if p > 0 else -math.inf
            picked += 1
        else:
            total += math.log1p(-p) if p < 1 else -math.inf
    return total if picked == len(members) else -math.inf


def marginals(tables: DpTables) -> np.ndarray:
    """P(e ∈ subset) under ∏w/W(1,k), for every edge."""
    n, k = tables.n, tables.k
    if k == 0:
        return np.zeros(n)
    before = tables.prefix_rows[:k, :n]                 # W̄(e-1, k') for k' = 0..k-1
    after = tables.suffix_rows[k - 1::-1, 2:]           # W(e+1, k-k'-1)
    log_m = np.logaddexp.reduce(before + after, axis=0) + tables.log_w - tables.log_total
    return np.exp(log_m)


def marginal(tables: DpTables, e: int, eps: Optional[np.ndarray] = None,
             cover: Optional[CoveringSet] = None) -> float:
    """
    Link probability of edge index `e`: the exponential-weights part scaled
    by (1 - Σε) plus the exploration mass of covering paths through e.
    """
    exp_part = float(marginals(tables)[e])
    if eps is None:
        return exp_part
    mixed = (1.0 - float(np.sum(eps))) * exp_part
    if cover is not None:
        mixed += float((cover.incidence().T @ cover.mixture_masses(eps))[e])
    return mixed


class _TableCache:
    """
    Reuses the last build for the same log-weight array within a round.
    Policies hand a fresh array to every round and never write into it.
    """

    def __init__(self, build):
        self._build = build
        self._key: Optional[np.ndarray] = None
        self._value = None

    def get(self, log_w: np.ndarray):
        if log_w is not self._key:
            self._value = self._build(log_w)
            self._key = log_w
        return self._value


# ─────────────────────────────────────────────
#  k-subset strategies
# ─────────────────────────────────────────────

def block_cover(n: int, k: int) -> CoveringSet:
    """Consecutive k-blocks; the last block is topped up with the lowest edges."""
    paths: List[Path] = []
    assignment = [0] * n
    for start in range(0, n, k):
        block = list(range(start, min(start + k, n)))
        for e in block:
            assignment[e] = len(paths)
        pad = [e for e in range(n) if e not in block][:k - len(block)]
        paths.append(Path(tuple(sorted(block + pad))))
    return CoveringSet(paths=tuple(paths), assignment=tuple(assignment))


class SubsetSpace(ActionSpace):

    def __init__(self, n: int, k: int, cap: int = PATH_CAP, name: str = 'subset'):
        if not 1 <= k < n:
            raise TooFewPaths(f"k-subsets need 1 <= k < n, got k={k}, n={n}")
        self.n = n
        self.k = k
        self.cap = cap
        self.name = name
        self.cover = block_cover(n, k)
        self._tables = _TableCache(lambda lw: build_tables_log(lw, self.k))
        self._paths: Optional[PathSet] = None

    @property
    def N(self) -> int:
        return math.comb(self.n, self.k)

    @property
    def paths(self) -> Optional[PathSet]:
        if self._paths is None and self.N <= self.cap:
            combos = itertools.combinations(range(self.n), self.k)
            self._paths = PathSet(paths=tuple(Path(c) for c in combos), n=self.n)
        return self._paths

    def tables(self, log_w: np.ndarray) -> DpTables:
        return self._tables.get(log_w)

    def exp_sample(self, log_w, rng):
        return sample_path(self.tables(log_w), rng)

    def exp_marginals(self, log_w):
        return marginals(self.tables(log_w))

    def exp_log_prob(self, log_w, path):
        if not self.contains(path):
            return -math.inf
        return float(np.sum(log_w[path.index_array]) - self.tables(log_w).log_total)

    def best_path(self, costs):
        order = np.argsort(np.asarray(costs, dtype=np.float64), kind='stable')
        return Path(tuple(sorted(int(e) for e in order[:self.k])))

    def contains(self, path):
        return len(path) == self.k and all(0 <= e < self.n for e in path.edges)

    def random_path(self, rng):
        return Path(tuple(sorted(int(e) for e in rng.choice(self.n, size=self.k, replace=False))))

    def routes_through(self):
        return [math.comb(self.n - 1, self.k - 1)] * self.n


# ─────────────────────────────────────────────
#  DAG routes by weight pushing
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class PushedWeights:
    log_w: np.ndarray
    log_beta: Dict[object, float]       # log Z(v→d)
    log_alpha: Dict[object, float]      # log Z(s→v)
    log_total: float                    # log Z(s→d)


def push_weights(dag: Dag, log_w: np.ndarray) -> PushedWeights:
    log_beta: Dict[object, float] = {dag.destination: 0.0}
    for v in reversed(dag.vertices):
        if v == dag.destination:
            continue
        outs = dag.out_edges[v]
        log_beta[v] = float(logsumexp([log_w[e] + log_beta[dag.head(e)] for e in outs])) if outs else -math.inf

    log_alpha: Dict[object, float] = {dag.source: 0.0}
    for v in dag.vertices:
        if v == dag.source:
            continue
        ins = dag.in_edges[v]
        log_alpha[v] = float(logsumexp([log_alpha[dag.tail(e)] + log_w[e] for e in ins])) if ins else -math.inf

    total = log_beta[dag.source]
    if not np.isfinite(total):
        raise NumericUnderflow("every s→d route has zero exponential weight")
    return PushedWeights(log_w=np.asarray(log_w), log_beta=log_beta, log_alpha=log_alpha, log_total=total)


def _walk(dag: Dag, pushed: PushedWeights, rng: np.random.Generator) -> Path:
    v = dag.source
    edges: List[int] = []
    while v != dag.destination:
        outs = dag.out_edges[v]
        logits = np.array([pushed.log_w[e] + pushed.log_beta[dag.head(e)] for e in outs]) - pushed.log_beta[v]
        cdf = np.cumsum(np.exp(logits))
        pick = int(np.searchsorted(cdf, rng.random() * cdf[-1], side='right'))
        e = outs[min(pick, len(outs) - 1)]
        edges.append(e)
        v = dag.head(e)
    return Path(tuple(edges))


def _longest(dag: Dag) -> int:
    depth: Dict[object, int] = {dag.destination: 0}
    for v in reversed(dag.vertices):
        if v != dag.destination:
            depth[v] = max((1 + depth[dag.head(e)] for e in dag.out_edges[v]), default=0)
    return depth[dag.source]


class DagSpace(ActionSpace):

    def __init__(self, dag: Dag, cover: Optional[CoveringSet] = None, cap: int = PATH_CAP, name: str = 'dag'):
        self.dag = dag
        self.n = dag.n
        self.k = _longest(dag)
        self.cap = cap
        self.name = name
        self._count = count_paths(dag)
        if self._count < 2:
            raise TooFewPaths(f"need at least 2 s→d routes, got {self._count}")
        self.cover = cover if cover is not None else dag_covering_paths(dag)
        self._pushed = _TableCache(lambda lw: push_weights(self.dag, lw))
        self._paths: Optional[PathSet] = None
        self._uniform: Optional[PushedWeights] = None

    @property
    def N(self) -> int:
        return self._count

    @property
    def paths(self) -> Optional[PathSet]:
        if self._paths is None and self._count <= self.cap:
            self._paths = enumerate_paths(self.dag, self.cap)
        return self._paths

    def pushed(self, log_w: np.ndarray) -> PushedWeights:
        return self._pushed.get(log_w)

    def exp_sample(self, log_w, rng):
        return _walk(self.dag, self.pushed(log_w), rng)

    def exp_marginals(self, log_w):
        pw = self.pushed(log_w)
        dag = self.dag
        log_m = np.array([
            pw.log_alpha[dag.tail(e)] + pw.log_w[e] + pw.log_beta[dag.head(e)]
            for e in range(dag.n)
        ])
        return np.exp(log_m - pw.log_total)

    def exp_log_prob(self, log_w, path):
        if not self.contains(path):
            return -math.inf
        return float(np.sum(log_w[path.index_array]) - self.pushed(log_w).log_total)

    def best_path(self, costs):
        return best_path(self.dag, np.asarray(costs, dtype=np.float64))

    def contains(self, path):
        return all(0 <= e < self.n for e in path.edges) and self.dag.is_route(path.edges)

    def random_path(self, rng):
        if self._uniform is None:
            self._uniform = push_weights(self.dag, np.zeros(self.n))
        return _walk(self.dag, self._uniform, rng)

    def routes_through(self):
        dag = self.dag
        from_source: Dict[object, int] = {dag.source: 1}
        for v in dag.vertices:
            if v != dag.source:
                from_source[v] = sum(from_source[dag.tail(e)] for e in dag.in_edges[v])
        to_dest: Dict[object, int] = {dag.destination: 1}
        for v in reversed(dag.vertices):
            if v != dag.destination:
                to_dest[v] = sum(to_dest[dag.head(e)] for e in dag.out_edges[v])
        return [from_source[dag.tail(e)] * to_dest[dag.head(e)] for e in range(dag.n)]


def sample_dag_path(dag: Dag, weights, eps: np.ndarray, cover: Optional[CoveringSet],
                    rng: np.random.Generator) -> Path:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (dag.n,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise GraphError("DAG sampling weights must be finite and positive, one per edge")
    space = DagSpace(dag, cover=cover)
    return space.sample(np.log(w), np.asarray(eps, dtype=np.float64), rng)
