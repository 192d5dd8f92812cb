"""
Loss Environments - AOSPR Routing Lab
=====================================
Per-round, per-edge losses in [0, 1] for the four link regimes:
  stochastic    i.i.d. draws around fixed means (Bernoulli by default)
  adversarial   oblivious schedules or θ-memory adaptive attackers
  mixed         an attacked edge subset on top of stochastic edges
  contaminated  stochastic draws overwritten at budget-limited locations

Every generator asserts the [0, 1] range instead of clamping.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from graph import Path

logger = logging.getLogger(__name__)

BASELINE_LOSS = 0.1
HIT_LOSS = 1.0
MODERATE_ZETA = 0.25


class LossModelError(ValueError):
    pass


class OutOfRange(LossModelError):
    pass


class BudgetViolation(LossModelError):
    pass


def _check_range(losses: np.ndarray, what: str) -> np.ndarray:
    if not np.all((losses >= 0.0) & (losses <= 1.0)):
        bad = np.flatnonzero(~((losses >= 0.0) & (losses <= 1.0)))
        raise OutOfRange(f"{what} emitted losses outside [0,1] on edges {[int(e) + 1 for e in bad]}")
    return losses


# ─────────────────────────────────────────────
#  Stochastic regime
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class StochasticSpec:
    means: np.ndarray
    distribution: str = 'bernoulli'     # bernoulli | uniform
    width: float = 0.1                  # half-width of the uniform variant

    def __post_init__(self):
        mu = np.asarray(self.means, dtype=np.float64).copy()
        if mu.ndim != 1 or mu.size == 0:
            raise LossModelError("means must be a nonempty vector")
        if np.any(mu < 0) or np.any(mu > 1):
            raise OutOfRange("stochastic means must lie in [0,1]")
        if self.distribution not in ('bernoulli', 'uniform'):
            raise LossModelError(f"unknown distribution {self.distribution!r}")
        mu.setflags(write=False)
        object.__setattr__(self, 'means', mu)

    @property
    def n(self) -> int:
        return self.means.size

    @property
    def best_edge(self) -> int:
        return int(np.argmin(self.means))

    @property
    def gaps(self) -> np.ndarray:
        return self.means - self.means[self.best_edge]

    @property
    def min_gap(self) -> float:
        positive = self.gaps[self.gaps > 0]
        return float(positive.min()) if positive.size else 0.0


def gen_stochastic(spec: StochasticSpec, t: int, rng: np.random.Generator) -> np.ndarray:
    if spec.distribution == 'bernoulli':
        losses = (rng.random(spec.n) < spec.means).astype(np.float64)
    else:
        # symmetric half-width keeps the mean exact next to 0 and 1
        half = np.minimum(spec.width, np.minimum(spec.means, 1.0 - spec.means))
        losses = rng.uniform(spec.means - half, spec.means + half)
    return _check_range(losses, f"stochastic draw at t={t}")


# ─────────────────────────────────────────────
#  Oblivious adversary
# ─────────────────────────────────────────────

@dataclass
class ObliviousSchedule:
    """Loss rule fixed before the run; it never sees the learner's choices."""
    n: int
    rule: Callable[[int], np.ndarray]
    name: str = 'custom'
    rows: Optional[int] = None          # table length when table-backed

    @classmethod
    def constant(cls, n: int, value: float) -> 'ObliviousSchedule':
        return cls(n=n, rule=lambda t: np.full(n, float(value)), name=f'constant({value})')

    @classmethod
    def alternating(cls, n: int) -> 'ObliviousSchedule':
        return cls(n=n, rule=lambda t: np.full(n, float(t % 2)), name='alternating')

    @classmethod
    def sinusoid(cls, n: int, period: float = 50.0, levels: int = 4) -> 'ObliviousSchedule':
        phases = 2 * np.pi * np.arange(n) / n

        def rule(t: int) -> np.ndarray:
            raw = 0.5 + 0.5 * np.sin(2 * np.pi * t / period + phases)
            return np.round(raw * levels) / levels

        return cls(n=n, rule=rule, name=f'sinusoid(period={period}, levels={levels})')

    @classmethod
    def from_table(cls, table, name: str = 'table') -> 'ObliviousSchedule':
        data = np.asarray(table, dtype=np.float64)
        if data.ndim != 2:
            raise LossModelError("loss table must be 2-D (rounds x edges)")
        data = data.copy()
        data.setflags(write=False)

        def rule(t: int) -> np.ndarray:
            if not 1 <= t <= data.shape[0]:
                raise LossModelError(f"{name} has no row for round {t} (rows 1..{data.shape[0]})")
            return data[t - 1].copy()

        return cls(n=data.shape[1], rule=rule, name=name, rows=data.shape[0])

    @classmethod
    def from_csv(cls, path) -> 'ObliviousSchedule':
        """Rows are rounds, columns are edge ids; a header row is expected."""
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError) as e:
            raise LossModelError(f"cannot read loss table {path}: {e}") from e
        return cls.from_table(frame.to_numpy(dtype=np.float64), name=f'csv:{path}')

    @classmethod
    def random_table(cls, n: int, rounds: int, rng: np.random.Generator,
                     low: float = 0.0, high: float = 1.0) -> 'ObliviousSchedule':
        return cls.from_table(rng.uniform(low, high, size=(rounds, n)), name='random_table')

    def at(self, t: int) -> np.ndarray:
        return np.asarray(self.rule(t), dtype=np.float64)


def gen_oblivious(schedule: ObliviousSchedule, t: int) -> np.ndarray:
    losses = schedule.at(t)
    if losses.shape != (schedule.n,):
        raise LossModelError(f"{schedule.name} returned shape {losses.shape}, expected ({schedule.n},)")
    return _check_range(losses, f"{schedule.name} at t={t}")


# ─────────────────────────────────────────────
#  θ-memory adaptive adversary
# ─────────────────────────────────────────────

AttackRule = Callable[[Sequence[Path], int, int], np.ndarray]


def retaliation(window: Sequence[Path], n: int, t: int,
                hit: float = HIT_LOSS, baseline: float = BASELINE_LOSS) -> np.ndarray:
    """Hit every edge of the modal path in the window; ties go to the most recent."""
    losses = np.full(n, baseline)
    if not window:
        return losses
    counts = {}
    for p in window:
        counts[p] = counts.get(p, 0) + 1
    top = max(counts.values())
    target = next(p for p in reversed(window) if counts[p] == top)
    losses[list(target.edges)] = hit
    return losses


@dataclass
class AdaptiveAttacker:
    theta: int
    n: int
    rule: Optional[AttackRule] = None
    hit: float = HIT_LOSS
    baseline: float = BASELINE_LOSS

    def __post_init__(self):
        if self.theta < 0:
            raise LossModelError(f"memory bound θ must be >= 0, got {self.theta}")

    @property
    def window(self) -> int:
        return self.theta + 1

    def respond(self, window: Sequence[Path], t: int) -> np.ndarray:
        if self.rule is not None:
            return np.asarray(self.rule(window, self.n, t), dtype=np.float64)
        return retaliation(window, self.n, t, hit=self.hit, baseline=self.baseline)


def gen_adaptive(attacker: AdaptiveAttacker, history: Sequence[Path], t: int) -> np.ndarray:
    window = list(history)[-attacker.window:]
    return _check_range(attacker.respond(window, t), f"adaptive attacker at t={t}")


# ─────────────────────────────────────────────
#  Mixed regime
# ─────────────────────────────────────────────

Adversary = Union[ObliviousSchedule, AdaptiveAttacker]


def _adversary_losses(adversary: Adversary, history: Sequence[Path], t: int) -> np.ndarray:
    if isinstance(adversary, AdaptiveAttacker):
        return gen_adaptive(adversary, history, t)
    return gen_oblivious(adversary, t)


@dataclass
class MixedSpec:
    stochastic: StochasticSpec
    attacked: tuple
    adversary: Adversary

    def __post_init__(self):
        self.attacked = tuple(sorted(int(e) for e in self.attacked))
        if any(e < 0 or e >= self.stochastic.n for e in self.attacked):
            raise LossModelError(f"attacked edges out of range for n={self.stochastic.n}")
        if self.adversary.n != self.stochastic.n:
            raise LossModelError("adversary and stochastic spec disagree on n")

    @property
    def k_a(self) -> int:
        return len(self.attacked)


def gen_mixed(spec: MixedSpec, history: Sequence[Path], t: int, rng: np.random.Generator) -> np.ndarray:
    losses = gen_stochastic(spec.stochastic, t, rng)
    if spec.attacked:
        idx = list(spec.attacked)
        losses[idx] = _adversary_losses(spec.adversary, history, t)[idx]
    return losses


# ─────────────────────────────────────────────
#  Contaminated stochastic regime
# ─────────────────────────────────────────────

def contamination_severity(zeta: float) -> str:
    if zeta <= 0:
        return 'none'
    return 'moderate' if zeta <= MODERATE_ZETA else 'severe'


def contamination_rates(base: StochasticSpec, zeta: float) -> np.ndarray:
    """Per-edge location budget per round: Δ(e)ζ, or Δ_e ζ for best edges."""
    gaps = base.gaps
    return np.where(gaps > 0, gaps, base.min_gap) * zeta


@dataclass
class ContaminatedSpec:
    base: StochasticSpec
    zeta: float
    onset: int
    locations: np.ndarray               # bool (horizon, n); row t-1 is round t
    values: Optional[np.ndarray] = None  # explicit adversarial losses; None flips the draw

    def __post_init__(self):
        if not 0 <= self.zeta < 0.5:
            raise LossModelError(f"attacking strength ζ must lie in [0, 1/2), got {self.zeta}")
        if self.onset < 0:
            raise LossModelError(f"contamination onset must be >= 0, got {self.onset}")
        self.locations = np.asarray(self.locations, dtype=bool)
        if self.locations.ndim != 2 or self.locations.shape[1] != self.base.n:
            raise LossModelError(f"locations must be (rounds, {self.base.n})")
        if self.values is not None:
            self.values = _check_range(np.asarray(self.values, dtype=np.float64), "contamination values")
        check_budget(self.locations, contamination_rates(self.base, self.zeta), self.onset)

    @property
    def horizon(self) -> int:
        return self.locations.shape[0]

    @property
    def severity(self) -> str:
        return contamination_severity(self.zeta)

    def counts_until(self, t: int) -> np.ndarray:
        return self.locations[:max(0, min(t, self.horizon))].sum(axis=0)

    @classmethod
    def generate(cls, base: StochasticSpec, zeta: float, onset: int, horizon: int,
                 rng: np.random.Generator, density: float = 1.0) -> 'ContaminatedSpec':
        """
        Greedy per-edge placement after the onset: a round is attacked when
        the edge is below floor(t·rate) and a density coin allows it, so the
        budget is met from below and never exceeded.
        """
        if not 0 < density <= 1:
            raise LossModelError(f"contamination density must lie in (0, 1], got {density}")
        rates = contamination_rates(base, zeta)
        locations = np.zeros((horizon, base.n), dtype=bool)
        counts = np.zeros(base.n, dtype=np.int64)
        for t in range(onset + 1, horizon + 1):
            allowed = np.floor(t * rates + 1e-9).astype(np.int64)
            hit = (counts < allowed) & (rng.random(base.n) < density)
            locations[t - 1] = hit
            counts += hit
        logger.info(
            f"[CONTAMINATION] ζ={zeta} ({contamination_severity(zeta)}), onset={onset}, "
            f"locations per edge={counts.tolist()}"
        )
        return cls(base=base, zeta=zeta, onset=onset, locations=locations)


def check_budget(locations: np.ndarray, rates: np.ndarray, onset: int) -> None:
    """Raise BudgetViolation if any edge has more than t·rate locations up to some t > onset."""
    if locations.shape[0] <= onset:
        return
    cumulative = np.cumsum(locations, axis=0)[onset:]
    rounds = np.arange(onset + 1, locations.shape[0] + 1, dtype=np.float64)[:, None]
    over = cumulative > rounds * rates[None, :] + 1e-9
    if over.any():
        row, edge = map(int, np.argwhere(over)[0])
        t = onset + 1 + row
        raise BudgetViolation(
            f"edge {edge + 1} has {int(cumulative[row, edge])} contaminated locations by round {t}, "
            f"budget is {t * rates[edge]:.4g}"
        )


def gen_contaminated(spec: ContaminatedSpec, t: int, rng: np.random.Generator) -> np.ndarray:
    losses = gen_stochastic(spec.base, t, rng)
    if t <= spec.horizon:
        mask = spec.locations[t - 1]
        if mask.any():
            if spec.values is None:
                losses[mask] = 1.0 - losses[mask]
            else:
                losses[mask] = spec.values[t - 1][mask]
    return _check_range(losses, f"contaminated draw at t={t}")


# ─────────────────────────────────────────────
#  Loss models used by the harness
# ─────────────────────────────────────────────

class LossModel(ABC):
    regime: str = 'stochastic'

    @property
    @abstractmethod
    def n(self) -> int:
        ...

    @abstractmethod
    def draw(self, t: int, history: Sequence[Path], rng: np.random.Generator) -> np.ndarray:
        ...

    @property
    def oblivious(self) -> bool:
        return True

    @property
    def memory(self) -> int:
        """How many recent choices the model may read."""
        return 0

    @property
    def expected_losses(self) -> Optional[np.ndarray]:
        """Means of the stochastic part, None when nothing is stochastic."""
        return None

    @property
    def attacked(self) -> np.ndarray:
        return np.zeros(self.n, dtype=bool)


class StochasticModel(LossModel):
    regime = 'stochastic'

    def __init__(self, spec: StochasticSpec):
        self.spec = spec

    @property
    def n(self) -> int:
        return self.spec.n

    def draw(self, t, history, rng):
        return gen_stochastic(self.spec, t, rng)

    @property
    def expected_losses(self):
        return self.spec.means


class ObliviousModel(LossModel):
    regime = 'adversarial'

    def __init__(self, schedule: ObliviousSchedule):
        self.schedule = schedule

    @property
    def n(self) -> int:
        return self.schedule.n

    def draw(self, t, history, rng):
        return gen_oblivious(self.schedule, t)

    @property
    def attacked(self):
        return np.ones(self.n, dtype=bool)


class AdaptiveModel(LossModel):
    regime = 'adversarial'

    def __init__(self, attacker: AdaptiveAttacker):
        self.attacker = attacker

    @property
    def n(self) -> int:
        return self.attacker.n

    @property
    def oblivious(self) -> bool:
        return False

    @property
    def memory(self) -> int:
        return self.attacker.window

    def draw(self, t, history, rng):
        return gen_adaptive(self.attacker, history, t)

    @property
    def attacked(self):
        return np.ones(self.n, dtype=bool)


class MixedModel(LossModel):
    regime = 'mixed'

    def __init__(self, spec: MixedSpec):
        self.spec = spec

    @property
    def n(self) -> int:
        return self.spec.stochastic.n

    @property
    def oblivious(self) -> bool:
        return not isinstance(self.spec.adversary, AdaptiveAttacker)

    @property
    def memory(self) -> int:
        adversary = self.spec.adversary
        return adversary.window if isinstance(adversary, AdaptiveAttacker) else 0

    def draw(self, t, history, rng):
        return gen_mixed(self.spec, history, t, rng)

    @property
    def expected_losses(self):
        return self.spec.stochastic.means

    @property
    def attacked(self):
        mask = np.zeros(self.n, dtype=bool)
        mask[list(self.spec.attacked)] = True
        return mask


class ContaminatedModel(LossModel):
    regime = 'contaminated'

    def __init__(self, spec: ContaminatedSpec):
        self.spec = spec

    @property
    def n(self) -> int:
        return self.spec.base.n

    def draw(self, t, history, rng):
        return gen_contaminated(self.spec, t, rng)

    @property
    def expected_losses(self):
        return self.spec.base.means
