"""
Reference Policies - AOSPR Routing Lab
======================================
  - Exp3PathPolicy   path-level EXP3 (routes as independent arms, no link sharing)
  - CombUCBPolicy    semi-bandit UCB on edges (CombUCB1 index)
  - OraclePolicy     the fixed comparator route of the regret definition
"""

import logging
import math
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from environment import LossModel
from graph import Path, PathExplosion
from policy import ActionSpace, Decision, RoutingPolicy

logger = logging.getLogger(__name__)

UCB_RADIUS = 1.5
STOCHASTIC_REGIMES = ('stochastic', 'contaminated')


class OracleUnavailable(ValueError):
    pass


def exp3_gamma(N: int, t: int) -> float:
    """γ_t = min{1, √(N ln N / ((e - 1) t))}"""
    return min(1.0, math.sqrt(N * math.log(N) / ((math.e - 1.0) * t)))


class Exp3PathPolicy(RoutingPolicy):
    """Each route is an arm; the route loss is the edge-loss sum scaled by 1/k."""

    def __init__(self, space: ActionSpace, name: str = 'exp3_path'):
        if space.paths is None:
            raise PathExplosion(f"path-level EXP3 needs an enumerable route set, {space.name} has {space.N}")
        self.space = space
        self.paths = space.paths
        self.name = name
        self.t = 0
        self.cum_estimates = np.zeros(self.paths.N)

    def distribution(self) -> np.ndarray:
        t = self.t + 1
        N = self.paths.N
        gamma = exp3_gamma(N, t)
        logits = -(gamma / N) * self.cum_estimates
        probs = (1.0 - gamma) * np.exp(logits - logsumexp(logits)) + gamma / N
        if abs(probs.sum() - 1.0) > 1e-9:
            raise RuntimeError(f"EXP3 distribution sums to {probs.sum():.12f}")
        return probs

    def select(self, rng):
        probs = self.distribution()
        cdf = np.cumsum(probs)
        idx = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side='right')), self.paths.N - 1)
        path = self.paths[idx]
        return Decision(
            round=self.t + 1, path=path, observed=path.index_array,
            obs_probs=self.paths.incidence.T @ probs, extras={'index': idx, 'prob': float(probs[idx])},
        )

    def absorb(self, decision, losses):
        route_loss = float(np.sum(losses)) / self.space.k
        self.cum_estimates[decision.extras['index']] += route_loss / decision.extras['prob']

    def advance(self):
        self.t += 1


class CombUCBPolicy(RoutingPolicy):
    """
    Min-index route under μ̂(e) - √(1.5 ln t / N(e)). While some edge is
    unobserved, the route with the most unobserved edges is forced.
    """

    def __init__(self, space: ActionSpace, regime: Optional[str] = None, name: str = 'combucb1'):
        self.space = space
        self.name = name
        self.t = 0
        self.means = np.zeros(space.n)
        self.counts = np.zeros(space.n, dtype=np.int64)
        if regime is not None and regime not in STOCHASTIC_REGIMES:
            logger.warning(f"[BASELINE] CombUCB1 assumes i.i.d. links; running it in the {regime} regime")

    def indices(self) -> np.ndarray:
        t = self.t + 1
        with np.errstate(divide='ignore'):
            radius = np.sqrt(UCB_RADIUS * math.log(t) / self.counts)
        return self.means - radius

    def select(self, rng):
        unseen = self.counts == 0
        if unseen.any():
            path = self.space.best_path(-unseen.astype(np.float64))
        else:
            path = self.space.best_path(self.indices())
        return Decision(round=self.t + 1, path=path, observed=path.index_array, obs_probs=np.ones(self.space.n))

    def absorb(self, decision, losses):
        idx = decision.observed
        self.counts[idx] += 1
        self.means[idx] += (np.asarray(losses, dtype=np.float64) - self.means[idx]) / self.counts[idx]

    def advance(self):
        self.t += 1


class OraclePolicy(RoutingPolicy):

    def __init__(self, path: Path, n: int, name: str = 'oracle'):
        self.path = path
        self.n = n
        self.name = name
        self.t = 0

    def select(self, rng):
        return Decision(round=self.t + 1, path=self.path, observed=self.path.index_array, obs_probs=np.ones(self.n))

    def absorb(self, decision, losses):
        pass

    def advance(self):
        self.t += 1


def oracle_step(model: LossModel, space: ActionSpace, loss_table: Optional[np.ndarray] = None) -> Path:
    """
    Comparator route: argmin of Σμ when every edge is stochastic, the best
    fixed route in hindsight on `loss_table` (rounds × edges) otherwise, with
    T·μ standing in for the stochastic edges of a mixed regime.
    """
    attacked = model.attacked
    means = model.expected_losses
    if means is not None and not attacked.any():
        return space.best_path(means)
    if not model.oblivious:
        raise OracleUnavailable("no fixed comparator exists against an adaptive attacker")
    if loss_table is None:
        raise OracleUnavailable(f"{model.regime} comparator needs the realized loss table")
    realized = loss_table.sum(axis=0)
    if means is None:
        return space.best_path(realized)
    return space.best_path(np.where(attacked, realized, loss_table.shape[0] * means))
