"""
Multi-Path Probing and Policy Wrappers - AOSPR Routing Lab
==========================================================
  - probe_paths / ProbingPolicy      M_t probed routes per round, observation-probability reweighting
  - MinibatchPolicy                  one inner step per τ_b rounds (memory-bounded attackers)
  - DelayedPolicy                    observations delivered τ rounds after emission
  - cold start                       uniform probing until every edge has been seen
  - MultiSourceRunner                S source/destination pairs sharing link measurements
"""

import heapq
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from graph import Path
from policy import (
    ActionSpace, AosprPolicy, Decision, Oracle, PolicyError, PolicyState, RoutingPolicy,
    Schedules, log_weights, round_exploration,
)

logger = logging.getLogger(__name__)


class ProbingError(ValueError):
    pass


class BudgetTooLarge(ProbingError):
    pass


class ProbabilityOutOfRange(ProbingError):
    pass


class InfeasibleCover(ProbingError):
    pass


# ─────────────────────────────────────────────
#  Probe plans and observation probabilities
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class ProbePlan:
    budget: int                      # M_t
    chosen: Path                     # H_t
    paths: Tuple[Path, ...]          # O_t, chosen first
    edges: np.ndarray                # Õ_t, sorted edge indices

    @property
    def m(self) -> int:
        """
        Observation multiplicity: 1 + edges revealed beyond the chosen route.

        This is not |Õ_t|. Counting the chosen route's k edges as one keeps
        M_t = 1 at m_t = 1, where the probing policy reduces to the
        single-route one, and the ξ_t division by m_t then scales only with
        what the extra probes add.
        """
        return 1 + int(np.setdiff1d(self.edges, self.chosen.index_array).size)


BudgetSchedule = Callable[[int], int]


def budget_schedule(budget: Union[int, Sequence[int], BudgetSchedule]) -> BudgetSchedule:
    """Constant M, a per-round list (last value held), or a callable of t."""
    if callable(budget):
        return budget
    if isinstance(budget, (int, np.integer)):
        value = int(budget)
        return lambda t: value
    values = [int(b) for b in budget]
    if not values:
        raise ProbingError("probe budget schedule is empty")
    return lambda t: values[min(t, len(values)) - 1]


def check_budget(budget: int, N: int) -> None:
    if budget < 1:
        raise ProbingError(f"probe budget must be >= 1, got {budget}")
    if budget > N:
        raise BudgetTooLarge(f"probe budget {budget} exceeds the {N} available routes")


def _plan(chosen: Path, extras: Sequence[Path], budget: int) -> ProbePlan:
    paths = (chosen,) + tuple(extras)
    edges = np.unique(np.concatenate([p.index_array for p in paths]))
    return ProbePlan(budget=budget, chosen=chosen, paths=paths, edges=edges)


def draw_probes(space: ActionSpace, log_w: np.ndarray, eps: np.ndarray, budget: int,
                rng: np.random.Generator) -> ProbePlan:
    check_budget(budget, space.N)
    chosen = space.sample(log_w, eps, rng)
    return _plan(chosen, space.uniform_paths(budget - 1, chosen, rng), budget)


def probe_paths(state: PolicyState, schedules: Schedules, budget: int, rng: np.random.Generator) -> ProbePlan:
    return draw_probes(state.space, log_weights(state, schedules), round_exploration(state, schedules), budget, rng)


def _mix(base, count: float, total: float, what: str):
    if total <= 1:
        raise ProbabilityOutOfRange(f"{what}: total count {total} leaves no room for extra probes")
    out = np.asarray(base, dtype=np.float64) + (1.0 - np.asarray(base, dtype=np.float64)) * (count - 1) / (total - 1)
    if np.any(out <= 0) or np.any(out > 1 + 1e-12):
        raise ProbabilityOutOfRange(f"{what} left (0, 1] with count={count}, total={total}")
    return float(out) if np.ndim(out) == 0 else out


def probed_path_prob(rho, budget: float, N: float):
    """ϱ(i) = ρ(i) + (1 - ρ(i))(M - 1)/(N - 1)"""
    return _mix(rho, budget, N, "route observation probability")


def probed_link_prob(rho_tilde, m: float, n: float):
    """ϱ̃(e) = ρ̃(e) + (1 - ρ̃(e))(m - 1)/(n - 1)"""
    return _mix(rho_tilde, m, n, "link observation probability")


def exact_link_prob(rho_tilde: np.ndarray, routes_through: Sequence[int], budget: int, N: int) -> np.ndarray:
    """
    P(e ∈ Õ_t) under the real probing rule: e is on H_t, or on one of the
    M-1 uniform extra routes drawn from the N-1 others (c_e of which hold e).
    """
    if budget == 1:
        return np.asarray(rho_tilde, dtype=np.float64)
    none_hit = np.array([
        math.comb(N - 1 - c, budget - 1) / math.comb(N - 1, budget - 1) for c in routes_through
    ])
    rho_tilde = np.asarray(rho_tilde, dtype=np.float64)
    return rho_tilde + (1.0 - rho_tilde) * (1.0 - none_hit)


def perturb_counts(value: float, deviation: float) -> float:
    perturbed = value + deviation
    if perturbed < 1:
        raise ProbabilityOutOfRange(f"count {value} perturbed by {deviation} drops below 1")
    return perturbed


# ─────────────────────────────────────────────
#  Cold start
# ─────────────────────────────────────────────

class UniformSweep:
    """
    Uniform probing of M routes per round. Without replacement the routes
    follow a random permutation, so N routes take ⌈N/M⌉ rounds at most.
    """

    def __init__(self, space: ActionSpace, replacement: bool = False):
        self.space = space
        self.replacement = replacement or space.paths is None
        self._queue: List[Path] = []

    def next_batch(self, budget: int, rng: np.random.Generator) -> List[Path]:
        check_budget(budget, self.space.N)
        if self.replacement:
            chosen = self.space.random_path(rng)
            return [chosen] + self.space.uniform_paths(budget - 1, chosen, rng)
        if len(self._queue) < budget:
            queued = set(self._queue)
            order = rng.permutation(self.space.N)
            self._queue.extend(p for p in (self.space.paths[int(i)] for i in order) if p not in queued)
        batch, self._queue = self._queue[:budget], self._queue[budget:]
        return batch


def coldstart_monitor(observed: Sequence[np.ndarray], n: int) -> Optional[int]:
    """First round (1-based) by which every edge was observed, None if never."""
    seen = np.zeros(n, dtype=bool)
    for t, edges in enumerate(observed, start=1):
        seen[np.asarray(edges, dtype=np.int64)] = True
        if seen.all():
            return t
    return None


def simulate_cover_time(space: ActionSpace, budget: int, repetitions: int, rng: np.random.Generator,
                        replacement: bool = True, max_rounds: int = 100_000) -> np.ndarray:
    times = np.zeros(repetitions, dtype=np.int64)
    for r in range(repetitions):
        sweep = UniformSweep(space, replacement=replacement)
        seen = np.zeros(space.n, dtype=bool)
        t = 0
        while not seen.all():
            t += 1
            if t > max_rounds:
                raise ProbingError(f"cold start did not finish within {max_rounds} rounds")
            for p in sweep.next_batch(budget, rng):
                seen[p.index_array] = True
        times[r] = t
    return times


# ─────────────────────────────────────────────
#  Multi-path probing policy
# ─────────────────────────────────────────────

class ProbingPolicy(AosprPolicy):

    def __init__(self, space: ActionSpace, schedules: Optional[Schedules] = None,
                 budget: Union[int, Sequence[int], BudgetSchedule] = 1,
                 link_prob: str = 'mixture', long_run_m: Optional[float] = None,
                 m_delta: float = 0.0, n_delta: float = 0.0,
                 cold_start: bool = False, track_paths: bool = False, name: str = 'aospr_probe'):
        super().__init__(space, schedules, name=name)
        if link_prob not in ('mixture', 'exact'):
            raise ProbingError(f"link_prob must be 'mixture' or 'exact', got {link_prob!r}")
        self.budget = budget_schedule(budget)
        self.link_prob = link_prob
        self.long_run_m = long_run_m
        self.m_delta = m_delta
        self.n_delta = n_delta
        self.cold_start = cold_start
        self.track_paths = track_paths
        self.seen = np.zeros(space.n, dtype=bool)
        self.cover_time: Optional[int] = None
        self.path_losses: Dict[Path, float] = {}
        self._sweep = UniformSweep(space, replacement=False)
        self._routes_through: Optional[List[int]] = None

    @property
    def warming_up(self) -> bool:
        return self.cold_start and not self.seen.all()

    def observation_probs(self, marginals: np.ndarray, plan: ProbePlan) -> np.ndarray:
        if self.link_prob == 'exact':
            if self._routes_through is None:
                self._routes_through = self.space.routes_through()
            return exact_link_prob(marginals, self._routes_through, plan.budget, self.space.N)
        m = self.long_run_m if self.long_run_m is not None else plan.m
        if plan.budget == 1 and self.long_run_m is None and self.m_delta == 0 and self.n_delta == 0:
            return marginals
        return probed_link_prob(
            marginals,
            perturb_counts(m, self.m_delta),
            perturb_counts(self.space.n, self.n_delta),
        )

    def select(self, rng):
        t = self.round
        budget = self.budget(t)
        if self.warming_up:
            batch = self._sweep.next_batch(budget, rng)
            plan = _plan(batch[0], batch[1:], budget)
            return Decision(
                round=t, path=plan.chosen, observed=plan.edges, obs_probs=np.ones(self.space.n),
                probed=plan.paths, extras={'cold': True, 'm': plan.m},
            )
        lw, eps = self.current()
        plan = draw_probes(self.space, lw, eps, budget, rng)
        marginals = self.space.marginals(lw, eps)
        extras = {'m': plan.m, 'epsilon': float(eps.sum())}
        if self.track_paths:
            extras.update(log_w=lw, eps=eps)
        return Decision(
            round=t, path=plan.chosen, observed=plan.edges,
            obs_probs=self.observation_probs(marginals, plan),
            probed=plan.paths, extras=extras,
        )

    def absorb(self, decision, losses):
        self.seen[decision.observed] = True
        if self.cover_time is None and self.seen.all():
            self.cover_time = decision.round
            if self.cold_start:
                logger.info(f"[COLD-START] every edge observed by round {decision.round}")
        if decision.extras.get('cold'):
            return
        super().absorb(decision, losses)
        if self.track_paths:
            self._track_paths(decision, losses)

    def _track_paths(self, decision: Decision, losses: np.ndarray) -> None:
        """Path-level estimates ℓ(i)/ϱ(i) for the probed routes; diagnostics only."""
        lookup = dict(zip(decision.observed.tolist(), losses.tolist()))
        lw, eps = decision.extras['log_w'], decision.extras['eps']
        budget = len(decision.probed)
        for p in decision.probed:
            rho = self.space.path_probability(lw, eps, p)
            value = sum(lookup[e] for e in p.edges) / probed_path_prob(rho, budget, self.space.N)
            self.path_losses[p] = self.path_losses.get(p, 0.0) + value


# ─────────────────────────────────────────────
#  Mini-batching
# ─────────────────────────────────────────────

def auto_batch_size(k: int, n: int, horizon: int) -> int:
    """⌈(4k√(n ln n))^(-1/3) · T^(1/3)⌉"""
    return max(1, math.ceil((4 * k * math.sqrt(n * math.log(n))) ** (-1.0 / 3.0) * horizon ** (1.0 / 3.0)))


class MinibatchPolicy(RoutingPolicy):
    """Replays the inner decision for τ_b rounds and feeds back the batch-average loss."""

    def __init__(self, inner: RoutingPolicy, batch_size: int):
        if batch_size < 1:
            raise PolicyError(f"batch size must be >= 1, got {batch_size}")
        self.inner = inner
        self.batch_size = batch_size
        self.name = inner.name if batch_size == 1 else f"{inner.name}+batch{batch_size}"
        self._current: Optional[Decision] = None
        self._sum: Optional[np.ndarray] = None
        self._filled = 0

    def select(self, rng):
        if self._filled == 0:
            self._current = self.inner.select(rng)
            self._sum = np.zeros(len(self._current.observed))
        return self._current

    def absorb(self, decision, losses):
        self._sum = self._sum + losses

    def advance(self):
        self._filled += 1
        if self._filled == self.batch_size:
            self.inner.absorb(self._current, self._sum / self.batch_size)
            self.inner.advance()
            self._filled = 0


# ─────────────────────────────────────────────
#  Delayed feedback
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class DelayRule:
    kind: str = 'constant'                  # constant | per_edge | geometric
    value: float = 0.0                      # constant delay, or geometric mean τ*
    per_edge: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ('constant', 'per_edge', 'geometric'):
            raise PolicyError(f"unknown delay rule {self.kind!r}")
        if self.value < 0 or any(d < 0 for d in self.per_edge):
            raise PolicyError("delays must be nonnegative")
        if self.kind == 'constant' and int(self.value) != self.value:
            raise PolicyError(f"constant delay must be an integer, got {self.value}")
        if self.kind == 'per_edge' and not self.per_edge:
            raise PolicyError("per_edge delay rule needs one delay per edge")

    @property
    def max_delay(self) -> Optional[int]:
        if self.kind == 'constant':
            return int(self.value)
        if self.kind == 'per_edge':
            return max(self.per_edge)
        return None

    @property
    def random(self) -> bool:
        return self.kind == 'geometric' and self.value > 0

    def draw(self, edges: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if self.kind == 'constant':
            return np.full(len(edges), int(self.value), dtype=np.int64)
        if self.kind == 'per_edge':
            return np.asarray(self.per_edge, dtype=np.int64)[edges]
        if self.value == 0:
            return np.zeros(len(edges), dtype=np.int64)
        return rng.geometric(1.0 / (self.value + 1.0), size=len(edges)).astype(np.int64) - 1


class DelayedPolicy(RoutingPolicy):
    """
    Feedback of round t reaches the inner policy at round t + delay, with the
    observation probabilities recorded at emission. Per edge, deliveries keep
    emission order.
    """

    def __init__(self, inner: RoutingPolicy, rule: DelayRule):
        self.inner = inner
        self.rule = rule
        self.name = inner.name if rule.max_delay == 0 else f"{inner.name}+delay"
        self._t = 0
        self._seq = 0
        self._queue: List[Tuple[int, int, int, Decision, np.ndarray, np.ndarray]] = []
        self._last_delivery: Dict[int, int] = {}
        self._delays: Optional[np.ndarray] = None

    @property
    def pending(self) -> int:
        return len(self._queue)

    @property
    def undelivered_rounds(self) -> List[int]:
        return sorted({item[1] for item in self._queue})

    def select(self, rng):
        decision = self.inner.select(rng)
        self._delays = self.rule.draw(decision.observed, rng if self.rule.random else None)
        return decision

    def absorb(self, decision, losses):
        t = self._t + 1
        due = np.empty(len(decision.observed), dtype=np.int64)
        for j, (e, d) in enumerate(zip(decision.observed.tolist(), self._delays.tolist())):
            due[j] = max(t + d, self._last_delivery.get(e, 0))
            self._last_delivery[e] = int(due[j])
        for when in np.unique(due):
            mask = due == when
            part = decision if mask.all() else replace(decision, observed=decision.observed[mask])
            heapq.heappush(self._queue, (int(when), t, self._seq, part, losses[mask], mask))
            self._seq += 1
        self._deliver(t)

    def _deliver(self, t: int) -> None:
        while self._queue and self._queue[0][0] <= t:
            _, _, _, part, losses, _ = heapq.heappop(self._queue)
            self.inner.absorb(part, losses)

    def advance(self):
        self.inner.advance()
        self._t += 1


# ─────────────────────────────────────────────
#  Multiple source/destination pairs
# ─────────────────────────────────────────────

@dataclass
class SourcePair:
    space: ActionSpace
    edge_map: np.ndarray                 # local edge index -> shared edge index
    label: str = ''

    def __post_init__(self):
        self.edge_map = np.asarray(self.edge_map, dtype=np.int64)
        if self.edge_map.size != self.space.n:
            raise ProbingError(f"pair {self.label}: edge map has {self.edge_map.size} entries for n={self.space.n}")


@dataclass
class MultiSourceSpec:
    coverage: np.ndarray                 # C[s, e]
    sweep: Tuple[int, ...]               # k_s, rounds for pair s to probe all its edges
    mode: str = 'coordinated'

    def __post_init__(self):
        self.coverage = np.asarray(self.coverage, dtype=bool)
        self.sweep = tuple(int(k) for k in self.sweep)
        if self.coverage.ndim != 2 or self.coverage.shape[0] != len(self.sweep):
            raise ProbingError("coverage must be (S, n) with one k_s per pair")
        if any(k < 1 for k in self.sweep):
            raise ProbingError("every k_s must be >= 1")
        if self.mode not in ('coordinated', 'uncoordinated'):
            raise ProbingError(f"mode must be coordinated or uncoordinated, got {self.mode!r}")
        orphan = np.flatnonzero(~self.coverage.any(axis=0))
        if orphan.size:
            raise InfeasibleCover(f"edges {[int(e) + 1 for e in orphan]} are on no pair's routes")

    @property
    def S(self) -> int:
        return self.coverage.shape[0]

    @property
    def n(self) -> int:
        return self.coverage.shape[1]

    @classmethod
    def from_pairs(cls, pairs: Sequence[SourcePair], n: int, mode: str = 'coordinated') -> 'MultiSourceSpec':
        coverage = np.zeros((len(pairs), n), dtype=bool)
        for s, pair in enumerate(pairs):
            coverage[s, pair.edge_map] = True
        return cls(coverage=coverage, sweep=tuple(len(p.space.cover) for p in pairs), mode=mode)

    @classmethod
    def from_csv(cls, path, sweep: Sequence[int], mode: str = 'coordinated') -> 'MultiSourceSpec':
        """Rows are edges, columns are pairs (the C_es layout)."""
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError) as e:
            raise ProbingError(f"cannot read coverage matrix {path}: {e}") from e
        return cls(coverage=frame.to_numpy().T != 0, sweep=tuple(sweep), mode=mode)


def kappa(spec: MultiSourceSpec, t: int) -> int:
    """κ(t) = min_e Σ_s ⌊t/k_s⌋ C_es"""
    per_pair = np.array([t // k for k in spec.sweep], dtype=np.int64)
    return int((per_pair[:, None] * spec.coverage).sum(axis=0).min())


def effective_rate(spec: MultiSourceSpec, horizon: int) -> Tuple[np.ndarray, float]:
    """
    κ(t) for t = 1..T and κ̄, the summed κ relative to the best single pair's
    probing of each edge (min_e max_s ⌊t/k_s⌋ C_es), so κ̄ ∈ [1, S].
    """
    rounds = np.arange(1, horizon + 1, dtype=np.int64)
    per_pair = rounds[:, None] // np.asarray(spec.sweep, dtype=np.int64)[None, :]       # (T, S)
    joint = per_pair @ spec.coverage.astype(np.int64)                                    # (T, n)
    single = (per_pair[:, :, None] * spec.coverage[None, :, :]).max(axis=1)              # (T, n)
    kappa_t = joint.min(axis=1)
    base = single.min(axis=1).sum()
    return kappa_t, (float(kappa_t.sum()) / float(base)) if base > 0 else 1.0


def multisource_schedule(spec: MultiSourceSpec, pairs: Sequence[SourcePair], chosen: Sequence[Path],
                         budget: int, rngs: Sequence[np.random.Generator]) -> List[List[Path]]:
    """
    Probe sets per pair (chosen route first). Coordinated pairs take turns
    adding the route with the most shared edges not yet probed this round;
    uncoordinated pairs add uniform routes on their own.
    """
    probes = [[c] for c in chosen]
    if budget == 1:
        return probes
    for pair in pairs:
        check_budget(budget, pair.space.N)
    if spec.mode == 'uncoordinated':
        for s, pair in enumerate(pairs):
            probes[s].extend(pair.space.uniform_paths(budget - 1, chosen[s], rngs[s]))
        return probes

    covered = np.zeros(spec.n, dtype=bool)
    for pair, c in zip(pairs, chosen):
        covered[pair.edge_map[c.index_array]] = True
    for _ in range(budget - 1):
        for s, pair in enumerate(pairs):
            fresh = ~covered[pair.edge_map]
            pick = _freshest(pair.space, fresh, set(probes[s]), rngs[s])
            probes[s].append(pick)
            covered[pair.edge_map[pick.index_array]] = True
    return probes


def _freshest(space: ActionSpace, fresh: np.ndarray, taken: set, rng: np.random.Generator) -> Path:
    if space.paths is not None:
        gains = space.paths.incidence @ fresh.astype(np.float64)
        for p in taken:
            gains[space.paths.index[p]] = -1.0
        return space.paths[int(np.argmax(gains))]
    pick = space.best_path(-fresh.astype(np.float64))
    while pick in taken:
        pick = space.random_path(rng)
    return pick


class MultiSourceRunner:
    """
    One AOSPR learner per pair; coordinated pairs pool every probed link.
    `schedules` is shared, or given per pair.
    """

    def __init__(self, pairs: Sequence[SourcePair], n: int,
                 schedules: Union[None, Schedules, Sequence[Schedules]] = None,
                 budget: int = 1, mode: str = 'coordinated'):
        self.pairs = list(pairs)
        self.spec = MultiSourceSpec.from_pairs(self.pairs, n, mode)
        self.budget = budget
        per_pair = list(schedules) if isinstance(schedules, (list, tuple)) else [schedules] * len(self.pairs)
        if len(per_pair) != len(self.pairs):
            raise ProbingError(f"{len(per_pair)} schedules for {len(self.pairs)} pairs")
        self.policies = [
            AosprPolicy(p.space, sch, name=p.label or f'pair{s + 1}')
            for s, (p, sch) in enumerate(zip(self.pairs, per_pair))
        ]
        self.probe_counts = np.zeros(n, dtype=np.int64)

    def step(self, oracle: Oracle, rngs: Sequence[np.random.Generator]) -> List[Decision]:
        chosen, marginals = [], []
        for s, (pair, policy) in enumerate(zip(self.pairs, self.policies)):
            lw, eps = policy.current()
            chosen.append(pair.space.sample(lw, eps, rngs[s]))
            marginals.append(pair.space.marginals(lw, eps))
        probes = multisource_schedule(self.spec, self.pairs, chosen, self.budget, rngs)

        own = [np.unique(np.concatenate([p.index_array for p in ps])) for ps in probes]
        shared = np.unique(np.concatenate([pair.edge_map[o] for pair, o in zip(self.pairs, own)]))
        losses = dict(zip(shared.tolist(), np.asarray(oracle(shared), dtype=np.float64).tolist()))
        self.probe_counts[shared] += 1

        decisions = []
        for s, (pair, policy) in enumerate(zip(self.pairs, self.policies)):
            if self.spec.mode == 'coordinated':
                local = np.flatnonzero(np.isin(pair.edge_map, shared))
            else:
                local = own[s]
            m = 1 + int(np.setdiff1d(local, chosen[s].index_array).size)
            probs = marginals[s] if m == 1 else probed_link_prob(marginals[s], m, pair.space.n)
            decision = Decision(
                round=policy.round, path=chosen[s], observed=local, obs_probs=probs,
                probed=tuple(probes[s]), extras={'m': m},
            )
            policy.absorb(decision, np.array([losses[int(g)] for g in pair.edge_map[local]]))
            policy.advance()
            decisions.append(decision)
        return decisions
