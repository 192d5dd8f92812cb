"""
AOSPR-EXP3++ Core - AOSPR Routing Lab
=====================================
Exponential weights over routes with per-edge exploration:
  - Schedules / beta / xi / epsilon      learning-rate and exploration schedules
  - PolicyState                          L̃, play counts N(e), gap estimates Δ̂
  - ActionSpace                          strategy representation (enumerated here,
                                         subset DP and DAG weight pushing in sampler)
  - AosprPolicy                          select → absorb → advance per round

Weights are never stored; w = exp(-η_t·L̃) is rebuilt in the log domain every
round because η_t rescales the whole history.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from graph import CoveringSet, GraphError, Path, PathSet, covering_set

logger = logging.getLogger(__name__)

DEFAULT_C = 18.0
SUM_TOL = 1e-9


class PolicyError(ValueError):
    pass


class ScheduleError(PolicyError):
    pass


class NumericUnderflow(RuntimeError):
    pass


class CoverageError(RuntimeError):
    pass


# ─────────────────────────────────────────────
#  Schedules
# ─────────────────────────────────────────────

class Variant(str, Enum):
    KNOWN_GAP = 'known_gap'
    EMPIRICAL_AVG = 'empirical_avg'
    LOG_GAP = 'log_gap'
    ZERO = 'zero'

    @classmethod
    def _missing_(cls, value):
        if value == 'paper_sim':                 # config name of the log-gap schedule
            return cls.LOG_GAP
        return None


def beta(t: int, n: int) -> float:
    if t < 1 or n < 2:
        raise ScheduleError(f"β_t needs t >= 1 and n >= 2, got t={t}, n={n}")
    return 0.5 * math.sqrt(math.log(n) / (t * n))


def xi_value(variant: Variant, t: int, gap: float, c: float = DEFAULT_C, probe_rate: float = 1.0) -> float:
    """ξ_t(e) for one edge; a zero gap is +inf and is clamped later by ε."""
    if t < 1:
        raise ScheduleError(f"round must be >= 1, got {t}")
    variant = Variant(variant)
    if variant is Variant.ZERO:
        return 0.0
    if gap <= 0:
        return math.inf
    x = t * gap * gap
    if variant is Variant.KNOWN_GAP:
        return max(0.0, c * math.log(x) / x)
    if variant is Variant.LOG_GAP:
        return max(0.0, math.log(x) / (32.0 * x))
    return c * math.log(t) ** 2 / (probe_rate * x)


@dataclass(frozen=True)
class Schedules:
    variant: Variant = Variant.EMPIRICAL_AVG
    c: float = DEFAULT_C
    eta_rule: str = 'beta'                       # beta | fixed:<value>
    known_gaps: Optional[Tuple[float, ...]] = None
    probe_rate: float = 1.0                      # m for the accelerated ξ

    def __post_init__(self):
        object.__setattr__(self, 'variant', Variant(self.variant))
        if self.c <= 0:
            raise ScheduleError(f"c must be positive, got {self.c}")
        if self.probe_rate < 1:
            raise ScheduleError(f"probe_rate must be >= 1, got {self.probe_rate}")
        if self.variant is Variant.KNOWN_GAP and self.known_gaps is None:
            raise ScheduleError("known_gap schedule needs the true gaps Δ(e)")
        if self.known_gaps is not None:
            object.__setattr__(self, 'known_gaps', tuple(float(g) for g in self.known_gaps))
        self._fixed_eta()

    def _fixed_eta(self) -> Optional[float]:
        if self.eta_rule == 'beta':
            return None
        kind, _, raw = self.eta_rule.partition(':')
        try:
            value = float(raw)
        except ValueError:
            value = float('nan')
        if kind != 'fixed' or not value > 0:
            raise ScheduleError(f"eta_rule must be 'beta' or 'fixed:<positive value>', got {self.eta_rule!r}")
        return value

    def validate(self, n: int) -> None:
        fixed = self._fixed_eta()
        if fixed is not None and fixed < beta(1, n):
            raise ScheduleError(f"fixed η={fixed} is below β_1={beta(1, n):.5f}; η_t >= β_t would fail")
        if self.known_gaps is not None and len(self.known_gaps) != n:
            raise ScheduleError(f"known_gaps has {len(self.known_gaps)} entries for {n} edges")

    def eta(self, t: int, n: int) -> float:
        fixed = self._fixed_eta()
        return beta(t, n) if fixed is None else fixed


def xi(schedules: Schedules, t: int, gaps: np.ndarray) -> np.ndarray:
    """Vector ξ_t over edges; `gaps` is Δ̂_{t-1} (ignored by known_gap and zero)."""
    if schedules.variant is Variant.ZERO:
        return np.zeros(len(gaps))
    source = schedules.known_gaps if schedules.variant is Variant.KNOWN_GAP else gaps
    return np.array([
        xi_value(schedules.variant, t, g, c=schedules.c, probe_rate=schedules.probe_rate)
        for g in source
    ])


def epsilon(schedules: Schedules, t: int, gaps: np.ndarray) -> np.ndarray:
    n = len(gaps)
    eps = np.minimum(min(1.0 / (2 * n), beta(t, n)), xi(schedules, t, gaps))
    if eps.sum() > 0.5 + 1e-12:
        raise ScheduleError(f"exploration mass {eps.sum()} exceeds 1/2")
    return eps


# ─────────────────────────────────────────────
#  Strategy spaces
# ─────────────────────────────────────────────

def path_log_weights(incidence: np.ndarray, log_w: np.ndarray) -> np.ndarray:
    """Σ_{e∈i} log w(e) per row, keeping -inf edges out of 0·inf products."""
    finite = np.isfinite(log_w)
    if finite.all():
        return incidence @ log_w
    out = incidence @ np.where(finite, log_w, 0.0)
    out[(incidence @ (~finite).astype(np.float64)) > 0] = -np.inf
    return out


class ActionSpace(ABC):
    """
    A strategy family 𝒫 with its covering set. Concrete spaces provide the
    pure exponential-weights part; the covering mixture is applied here.
    """
    n: int
    k: int
    cover: CoveringSet
    name: str = 'space'

    @property
    @abstractmethod
    def N(self) -> int:
        ...

    @property
    def paths(self) -> Optional[PathSet]:
        """Enumerated strategies when affordable, None otherwise."""
        return None

    @property
    def enumerable(self) -> bool:
        return self.paths is not None

    @abstractmethod
    def exp_sample(self, log_w: np.ndarray, rng: np.random.Generator) -> Path:
        ...

    @abstractmethod
    def exp_marginals(self, log_w: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def exp_log_prob(self, log_w: np.ndarray, path: Path) -> float:
        ...

    @abstractmethod
    def best_path(self, costs: np.ndarray) -> Path:
        ...

    @abstractmethod
    def contains(self, path: Path) -> bool:
        ...

    @abstractmethod
    def random_path(self, rng: np.random.Generator) -> Path:
        """One strategy drawn uniformly from 𝒫."""

    def routes_through(self) -> List[int]:
        """Exact number of strategies containing each edge."""
        if self.paths is None:
            raise GraphError(f"{self.name}: no route count available without enumeration")
        return [int(c) for c in self.paths.incidence.sum(axis=0)]

    def cover_incidence(self) -> np.ndarray:
        cached = getattr(self, '_cover_incidence', None)
        if cached is None:
            cached = self.cover.incidence()
            self._cover_incidence = cached
        return cached

    def sample(self, log_w: np.ndarray, eps: np.ndarray, rng: np.random.Generator) -> Path:
        """Pre-flip: a covering path with probability Σε, else an exponential-weights draw."""
        masses = self.cover.mixture_masses(eps)
        u = rng.random()
        if u < masses.sum():
            pos = int(np.searchsorted(np.cumsum(masses), u, side='right'))
            return self.cover.paths[min(pos, len(self.cover) - 1)]
        return self.exp_sample(log_w, rng)

    def marginals(self, log_w: np.ndarray, eps: np.ndarray) -> np.ndarray:
        masses = self.cover.mixture_masses(eps)
        return (1.0 - eps.sum()) * self.exp_marginals(log_w) + self.cover_incidence().T @ masses

    def path_probability(self, log_w: np.ndarray, eps: np.ndarray, path: Path) -> float:
        prob = (1.0 - eps.sum()) * math.exp(self.exp_log_prob(log_w, path))
        pos = self.cover.position_of(path)
        if pos is not None:
            prob += float(self.cover.mixture_masses(eps)[pos])
        return prob

    def distribution(self, log_w: np.ndarray, eps: np.ndarray) -> np.ndarray:
        if self.paths is None:
            raise GraphError(f"{self.name}: {self.N} strategies are too many to materialize ρ")
        rho = np.array([self.path_probability(log_w, eps, p) for p in self.paths])
        return _checked(rho)

    def uniform_paths(self, count: int, exclude: Path, rng: np.random.Generator) -> List[Path]:
        """`count` distinct strategies other than `exclude`, uniformly without replacement."""
        if count <= 0:
            return []
        if self.paths is not None:
            others = np.delete(np.arange(self.paths.N), self.paths.index[exclude])
            picks = rng.choice(others, size=count, replace=False)
            return [self.paths[int(i)] for i in picks]
        chosen: List[Path] = []
        seen = {exclude}
        while len(chosen) < count:
            p = self.random_path(rng)
            if p not in seen:
                seen.add(p)
                chosen.append(p)
        return chosen


def _checked(rho: np.ndarray) -> np.ndarray:
    if np.any(rho < -1e-15) or abs(rho.sum() - 1.0) > SUM_TOL:
        raise NumericUnderflow(f"route distribution sums to {rho.sum():.12f}")
    return rho


class EnumeratedSpace(ActionSpace):
    """Explicit PathSet; ρ is materialized in full."""

    def __init__(self, paths: PathSet, cover: Optional[CoveringSet] = None, name: str = 'enumerated'):
        self._paths = paths
        self.n = paths.n
        self.k = paths.k
        self.cover = cover if cover is not None else covering_set(paths)
        self.name = name
        self._cover_rows = np.asarray(self.cover.indices or [paths.index[p] for p in self.cover.paths])

    @property
    def N(self) -> int:
        return self._paths.N

    @property
    def paths(self) -> PathSet:
        return self._paths

    def exp_log_probs(self, log_w: np.ndarray) -> np.ndarray:
        lw = path_log_weights(self._paths.incidence, log_w)
        total = logsumexp(lw)
        if not np.isfinite(total):
            raise NumericUnderflow("every route has zero exponential weight")
        return lw - total

    def exp_sample(self, log_w, rng):
        cdf = np.cumsum(np.exp(self.exp_log_probs(log_w)))
        idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side='right'))
        return self._paths[min(idx, self.N - 1)]

    def exp_marginals(self, log_w):
        return self._paths.incidence.T @ np.exp(self.exp_log_probs(log_w))

    def exp_log_prob(self, log_w, path):
        return float(self.exp_log_probs(log_w)[self._paths.index[path]])

    def distribution(self, log_w, eps):
        rho = (1.0 - eps.sum()) * np.exp(self.exp_log_probs(log_w))
        np.add.at(rho, self._cover_rows, self.cover.mixture_masses(eps))
        return _checked(rho)

    def best_path(self, costs):
        return self._paths[int(np.argmin(self._paths.incidence @ np.asarray(costs, dtype=np.float64)))]

    def contains(self, path):
        return path in self._paths.index

    def random_path(self, rng):
        return self._paths[int(rng.integers(self.N))]


# ─────────────────────────────────────────────
#  State and the per-round operations
# ─────────────────────────────────────────────

@dataclass
class PolicyState:
    space: ActionSpace
    t: int = 0
    cum_losses: np.ndarray = None       # L̃_t(e)
    counts: np.ndarray = None           # N_t(e), chosen-route plays
    gaps: np.ndarray = None             # Δ̂_t(e)

    def __post_init__(self):
        n = self.space.n
        if self.cum_losses is None:
            self.cum_losses = np.zeros(n)
        if self.counts is None:
            self.counts = np.zeros(n, dtype=np.int64)
        if self.gaps is None:
            self.gaps = np.zeros(n)

    @property
    def n(self) -> int:
        return self.space.n


def log_weights(state: PolicyState, schedules: Schedules) -> np.ndarray:
    """log w_{t-1}(e) at the coming round's η."""
    return -schedules.eta(state.t + 1, state.n) * state.cum_losses


def round_exploration(state: PolicyState, schedules: Schedules) -> np.ndarray:
    return epsilon(schedules, state.t + 1, state.gaps)


def path_distribution(state: PolicyState, schedules: Schedules) -> np.ndarray:
    return state.space.distribution(log_weights(state, schedules), round_exploration(state, schedules))


def link_marginals(state: PolicyState, schedules: Schedules) -> np.ndarray:
    return state.space.marginals(log_weights(state, schedules), round_exploration(state, schedules))


def estimate_losses(edges: Sequence[int], observed: np.ndarray, probs: np.ndarray, n: int) -> np.ndarray:
    """ℓ̃(e) = ℓ(e)/p(e) on observed edges, 0 elsewhere; `probs` is indexed by edge."""
    idx = np.asarray(edges, dtype=np.int64)
    p = np.asarray(probs, dtype=np.float64)[idx]
    if np.any(p <= 0):
        bad = idx[p <= 0]
        raise CoverageError(f"edges {[int(e) + 1 for e in bad]} were observed with probability 0")
    est = np.zeros(n)
    est[idx] = np.asarray(observed, dtype=np.float64) / p
    return est


def estimate_gaps(state: PolicyState) -> np.ndarray:
    if state.t < 1:
        return np.zeros(state.n)
    L = state.cum_losses
    return np.minimum(1.0, (L - L[int(np.argmin(L))]) / state.t)


def update(state: PolicyState, estimates: np.ndarray, chosen: Optional[Path] = None) -> PolicyState:
    """Add one round of estimates, count the chosen route, refresh Δ̂ and the clock."""
    accumulate(state, estimates, None if chosen is None else chosen.index_array)
    return tick(state)


def accumulate(state: PolicyState, estimates: np.ndarray, played: Optional[np.ndarray] = None) -> None:
    if np.any(estimates < 0):
        raise PolicyError("loss estimates must be nonnegative")
    state.cum_losses = state.cum_losses + estimates
    if played is not None:
        state.counts[played] += 1


def tick(state: PolicyState) -> PolicyState:
    state.t += 1
    state.gaps = estimate_gaps(state)
    return state


Oracle = Callable[[np.ndarray], np.ndarray]


def step(state: PolicyState, schedules: Schedules, oracle: Oracle,
         rng: np.random.Generator) -> Tuple[Path, float, PolicyState]:
    """One round of semi-bandit play; `oracle(edges)` returns the losses on those edges only."""
    lw = log_weights(state, schedules)
    eps = round_exploration(state, schedules)
    path = state.space.sample(lw, eps, rng)
    marginals = state.space.marginals(lw, eps)
    losses = np.asarray(oracle(path.index_array), dtype=np.float64)
    update(state, estimate_losses(path.index_array, losses, marginals, state.n), path)
    return path, float(losses.sum()), state


# ─────────────────────────────────────────────
#  Policy interface
# ─────────────────────────────────────────────

@dataclass
class Decision:
    round: int
    path: Path
    observed: np.ndarray                 # edge indices whose losses are fed back
    obs_probs: np.ndarray                # per-edge observation probability (length n)
    probed: Tuple[Path, ...] = ()
    extras: Dict[str, object] = field(default_factory=dict)


class RoutingPolicy(ABC):
    """select → (losses) → absorb → advance, once per round; wrappers compose on this."""
    name: str = 'policy'

    @abstractmethod
    def select(self, rng: np.random.Generator) -> Decision:
        ...

    @abstractmethod
    def absorb(self, decision: Decision, losses: np.ndarray) -> None:
        """Apply feedback for `decision`; `losses` align with decision.observed."""

    def advance(self) -> None:
        pass

    def step(self, oracle: Oracle, rng: np.random.Generator) -> Tuple[Decision, float]:
        decision = self.select(rng)
        losses = np.asarray(oracle(decision.observed), dtype=np.float64)
        self.absorb(decision, losses)
        self.advance()
        on_path = np.isin(decision.observed, decision.path.index_array)
        return decision, float(losses[on_path].sum())


class AosprPolicy(RoutingPolicy):

    def __init__(self, space: ActionSpace, schedules: Optional[Schedules] = None, name: str = 'aospr'):
        self.schedules = schedules or Schedules()
        self.schedules.validate(space.n)
        self.space = space
        self.state = PolicyState(space=space)
        self.name = name

    @property
    def round(self) -> int:
        return self.state.t + 1

    def current(self) -> Tuple[np.ndarray, np.ndarray]:
        """(log weights, ε) for the coming round."""
        return log_weights(self.state, self.schedules), round_exploration(self.state, self.schedules)

    def select(self, rng):
        lw, eps = self.current()
        path = self.space.sample(lw, eps, rng)
        marginals = self.space.marginals(lw, eps)
        return Decision(
            round=self.round,
            path=path,
            observed=path.index_array,
            obs_probs=marginals,
            extras={'epsilon': float(eps.sum())},
        )

    def absorb(self, decision, losses):
        estimates = estimate_losses(decision.observed, losses, decision.obs_probs, self.space.n)
        played = np.intersect1d(decision.observed, decision.path.index_array)
        accumulate(self.state, estimates, played)

    def advance(self):
        tick(self.state)
