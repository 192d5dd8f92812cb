"""
Multi-path probing, cold start, mini-batching, delayed feedback and
multi-source link sharing.
"""

import itertools
import math

import numpy as np
import pytest
from pytest import approx

from graph import Path, build_dag, enumerate_paths, parallel_chains
from policy import AosprPolicy, Decision, EnumeratedSpace, PolicyError, RoutingPolicy, Schedules, estimate_losses
from probing import (
    BudgetTooLarge,
    DelayedPolicy,
    DelayRule,
    InfeasibleCover,
    MinibatchPolicy,
    MultiSourceRunner,
    MultiSourceSpec,
    ProbabilityOutOfRange,
    ProbePlan,
    ProbingError,
    ProbingPolicy,
    SourcePair,
    UniformSweep,
    auto_batch_size,
    budget_schedule,
    check_budget,
    coldstart_monitor,
    effective_rate,
    exact_link_prob,
    kappa,
    probed_link_prob,
    probed_path_prob,
    simulate_cover_time,
)

SHARED_EDGES = [('s1', 'a'), ('s2', 'a'), ('a', 'd'), ('a', 'b'), ('b', 'd')]


class Recorder(RoutingPolicy):
    """Always routes over edges 0 and 1; remembers what it is fed."""

    name = 'rec'

    def __init__(self):
        self.t = 0
        self.selects = 0
        self.fed = []

    def select(self, rng):
        self.selects += 1
        return Decision(round=self.t + 1, path=Path((0, 1)), observed=np.array([0, 1]), obs_probs=np.ones(2))

    def absorb(self, decision, losses):
        self.fed.append((self.t + 1, decision.round, decision.observed.tolist(), np.asarray(losses).tolist()))

    def advance(self):
        self.t += 1


def drive(policy, rounds, loss_fn, rng):
    for t in range(1, rounds + 1):
        decision = policy.select(rng)
        policy.absorb(decision, loss_fn(t, decision.observed))
        policy.advance()


def shared_pairs():
    pairs = []
    for source in ('s1', 's2'):
        dag, report = build_dag(SHARED_EDGES, source, 'd')
        space = EnumeratedSpace(enumerate_paths(dag, 10), name=source)
        pairs.append(SourcePair(space=space, edge_map=np.array(report.kept), label=source))
    return pairs


def routes_taken(make, dag, rounds=300):
    """Routes a freshly built policy picks against a fixed random loss table."""
    space = EnumeratedSpace(enumerate_paths(dag, 10))
    losses = np.random.default_rng(21).random((rounds, space.n))
    policy = make(space)
    rng = np.random.default_rng(34)
    taken = []
    for t in range(1, rounds + 1):
        decision = policy.select(rng)
        policy.absorb(decision, losses[t - 1, decision.observed])
        policy.advance()
        taken.append(decision.path)
    return taken


class TestProbePlans:

    def test_m_counts_newly_revealed_edges(self):
        plan = ProbePlan(budget=2, chosen=Path((0, 1)), paths=(Path((0, 1)), Path((0, 2))), edges=np.array([0, 1, 2]))
        assert plan.m == 2
        alone = ProbePlan(budget=1, chosen=Path((0, 1)), paths=(Path((0, 1)),), edges=np.array([0, 1]))
        assert alone.m == 1

    def test_budget_schedules(self):
        assert budget_schedule(3)(10) == 3
        listed = budget_schedule([1, 2, 3])
        assert [listed(t) for t in (1, 2, 3, 9)] == [1, 2, 3, 3]
        with pytest.raises(ProbingError):
            budget_schedule([])

    def test_budget_bounds(self):
        with pytest.raises(BudgetTooLarge):
            check_budget(4, 3)
        with pytest.raises(ProbingError):
            check_budget(0, 3)

    def test_path_observation_probability(self):
        assert probed_path_prob(0.2, 3, 5) == approx(0.6)
        assert probed_path_prob(np.array([0.2, 1.0]), 3, 5) == approx([0.6, 1.0])

    def test_probability_out_of_range(self):
        with pytest.raises(ProbabilityOutOfRange):
            probed_path_prob(0.2, 3, 1)
        with pytest.raises(ProbabilityOutOfRange):
            probed_link_prob(0.0, 1, 6)

    def test_exact_link_probability(self, chains):
        rho = np.full(6, 1 / 3)
        assert exact_link_prob(rho, [1] * 6, 2, 3) == approx(rho + (1 - rho) / 2)
        assert exact_link_prob(rho, [1] * 6, 1, 3) == approx(rho)
        assert exact_link_prob(rho, [1] * 6, 3, 3) == approx(np.ones(6))


class TestColdStart:

    def test_sweep_without_replacement_is_bounded(self, grid, rng):
        space = EnumeratedSpace(enumerate_paths(grid, 10))
        times = simulate_cover_time(space, 3, 50, rng, replacement=False)
        assert np.all(times == math.ceil(space.N / 3))

    def test_sweep_batches_are_distinct(self, grid, rng):
        sweep = UniformSweep(EnumeratedSpace(enumerate_paths(grid, 10)))
        batch = sweep.next_batch(4, rng)
        assert len(set(batch)) == 4

    def test_coupon_collector_mean(self, chains, rng):
        space = EnumeratedSpace(enumerate_paths(chains, 10))
        times = simulate_cover_time(space, 1, 4000, rng)
        assert times.mean() == approx(5.5, abs=0.2)

    def test_six_routes_two_probes_finish_by_round_three(self, rng):
        dag, _ = build_dag(parallel_chains(6, 2), 's', 'd')
        space = EnumeratedSpace(enumerate_paths(dag, 10))
        times = simulate_cover_time(space, 2, 10_000, rng, replacement=False)
        assert times.mean() <= 3.0
        assert times.max() == 3
        policy = ProbingPolicy(space, budget=2, cold_start=True)
        drive(policy, 4, lambda t, edges: np.full(len(edges), 0.5), rng)
        assert policy.cover_time == 3

    def test_monitor(self):
        observed = [np.array([0, 1]), np.array([2]), np.array([0, 3])]
        assert coldstart_monitor(observed, 4) == 3
        assert coldstart_monitor(observed, 5) is None

    def test_cold_rounds_do_not_touch_weights(self, chains, rng):
        policy = ProbingPolicy(EnumeratedSpace(enumerate_paths(chains, 10)), cold_start=True)
        drive(policy, 3, lambda t, edges: np.ones(len(edges)), rng)
        assert policy.cover_time == 3
        assert not policy.warming_up
        assert np.all(policy.state.cum_losses == 0)
        assert 'epsilon' in policy.select(rng).extras


class TestProbingPolicy:

    def test_single_probe_matches_plain_policy(self, chains):
        losses = np.random.default_rng(3).random((60, 6))
        plain = AosprPolicy(EnumeratedSpace(enumerate_paths(chains, 10)))
        probing = ProbingPolicy(EnumeratedSpace(enumerate_paths(chains, 10)), budget=1)
        drive(plain, 60, lambda t, edges: losses[t - 1, edges], np.random.default_rng(5))
        drive(probing, 60, lambda t, edges: losses[t - 1, edges], np.random.default_rng(5))
        assert probing.state.cum_losses == approx(plain.state.cum_losses)

    def test_extra_probes_widen_observation(self, chains, rng):
        policy = ProbingPolicy(EnumeratedSpace(enumerate_paths(chains, 10)), budget=2)
        decision = policy.select(rng)
        assert len(decision.observed) == 4
        assert decision.probed[0] == decision.path
        assert decision.extras['m'] == 3
        assert decision.obs_probs == approx(np.full(6, 1 / 3 + (2 / 3) * 2 / 5))

    def test_exact_mode(self, chains, rng):
        policy = ProbingPolicy(EnumeratedSpace(enumerate_paths(chains, 10)), budget=2, link_prob='exact')
        assert policy.select(rng).obs_probs == approx(np.full(6, 2 / 3))

    def test_unknown_link_prob_mode(self, chains):
        with pytest.raises(ProbingError):
            ProbingPolicy(EnumeratedSpace(enumerate_paths(chains, 10)), link_prob='guess')

    def test_path_tracking(self, chains, rng):
        policy = ProbingPolicy(EnumeratedSpace(enumerate_paths(chains, 10)), budget=2, track_paths=True)
        drive(policy, 5, lambda t, edges: np.full(len(edges), 0.5), rng)
        assert policy.path_losses
        assert all(v > 0 for v in policy.path_losses.values())


def observation_outcomes(paths, rho, budget):
    """(probability, revealed edges) for every chosen route and every set of extra routes."""
    sets = math.comb(len(paths) - 1, budget - 1)
    for i, chosen in enumerate(paths):
        others = paths[:i] + paths[i + 1:]
        for extras in itertools.combinations(others, budget - 1):
            edges = np.unique(np.concatenate([p.index_array for p in (chosen,) + extras]))
            yield rho[i] / sets, edges


def trained_probing(dag, budget, link_prob):
    """A probing policy whose route distribution is no longer uniform."""
    policy = ProbingPolicy(EnumeratedSpace(enumerate_paths(dag, 10)), budget=budget, link_prob=link_prob)
    losses = np.linspace(0.1, 0.9, policy.space.n)
    drive(policy, 12, lambda t, edges: losses[edges], np.random.default_rng(8))
    return policy


class TestObservationProbabilities:

    @pytest.mark.parametrize('budget', [2, 3])
    def test_exact_mode_is_the_true_observation_probability(self, grid, budget):
        policy = trained_probing(grid, budget, 'exact')
        lw, eps = policy.current()
        rho = policy.space.distribution(lw, eps)
        assert rho.max() > rho.min()
        paths = list(policy.space.paths.paths)
        plan = ProbePlan(budget=budget, chosen=paths[0], paths=tuple(paths[:budget]), edges=np.arange(policy.space.n))
        probs = policy.observation_probs(policy.space.marginals(lw, eps), plan)

        revealed = np.zeros(policy.space.n)
        for weight, edges in observation_outcomes(paths, rho, budget):
            revealed[edges] += weight
        assert probs == approx(revealed, abs=1e-12)

    @pytest.mark.parametrize('budget', [2, 3])
    def test_exact_mode_estimates_are_unbiased(self, grid, budget):
        policy = trained_probing(grid, budget, 'exact')
        lw, eps = policy.current()
        rho = policy.space.distribution(lw, eps)
        paths = list(policy.space.paths.paths)
        plan = ProbePlan(budget=budget, chosen=paths[0], paths=tuple(paths[:budget]), edges=np.arange(policy.space.n))
        probs = policy.observation_probs(policy.space.marginals(lw, eps), plan)
        losses = np.linspace(0.05, 0.95, policy.space.n)

        expected = np.zeros(policy.space.n)
        for weight, edges in observation_outcomes(paths, rho, budget):
            expected += weight * estimate_losses(edges, losses[edges], probs, policy.space.n)
        assert expected == approx(losses, abs=1e-12)

    def test_mixture_mode_overstates_sparse_probing(self, chains, rng):
        # three disjoint chains, two probes: every link is seen w.p. 2/3
        exact = ProbingPolicy(EnumeratedSpace(enumerate_paths(chains, 10)), budget=2, link_prob='exact')
        mixture = ProbingPolicy(EnumeratedSpace(enumerate_paths(chains, 10)), budget=2)
        assert exact.select(rng).obs_probs == approx(np.full(6, 2 / 3), abs=1e-12)
        assert mixture.select(rng).obs_probs == approx(np.full(6, 0.6), abs=1e-12)

        paths = list(mixture.space.paths.paths)
        losses = np.full(6, 0.5)
        expected = np.zeros(6)
        for weight, edges in observation_outcomes(paths, np.full(3, 1 / 3), 2):
            expected += weight * estimate_losses(edges, losses[edges], np.full(6, 0.6), 6)
        assert expected == approx(losses * (2 / 3) / 0.6, abs=1e-12)


class TestMinibatch:

    def test_batch_size_rule(self):
        assert auto_batch_size(2, 6, 10 ** 6) == 34
        assert auto_batch_size(50, 1000, 10) == 1

    def test_inner_sees_batch_average(self, rng):
        inner = Recorder()
        policy = MinibatchPolicy(inner, 3)
        feed = {1: [1.0, 0.0], 2: [0.0, 0.0], 3: [2.0, 3.0], 4: [0.3, 0.3], 5: [0.3, 0.3], 6: [0.3, 0.3]}
        drive(policy, 6, lambda t, edges: np.array(feed[t]), rng)
        assert inner.selects == 2
        assert inner.t == 2
        assert [f[3] for f in inner.fed] == [approx([1.0, 1.0]), approx([0.3, 0.3])]
        assert policy.name == 'rec+batch3'

    def test_batch_size_must_be_positive(self):
        with pytest.raises(PolicyError):
            MinibatchPolicy(Recorder(), 0)

    def test_unit_batch_replays_the_inner_policy(self, grid):
        plain = routes_taken(lambda space: AosprPolicy(space), grid)
        batched = routes_taken(lambda space: MinibatchPolicy(AosprPolicy(space), 1), grid)
        assert len(set(plain)) > 1
        assert batched == plain


class TestDelay:

    def test_constant_delay(self, rng):
        inner = Recorder()
        policy = DelayedPolicy(inner, DelayRule('constant', 2))
        drive(policy, 3, lambda t, edges: np.full(2, float(t)), rng)
        assert inner.fed == [(3, 1, [0, 1], [1.0, 1.0])]
        assert policy.pending == 2
        assert policy.undelivered_rounds == [2, 3]
        assert policy.name == 'rec+delay'

    def test_zero_delay_is_transparent(self, rng):
        inner = Recorder()
        policy = DelayedPolicy(inner, DelayRule('constant', 0))
        drive(policy, 2, lambda t, edges: np.zeros(2), rng)
        assert [f[:2] for f in inner.fed] == [(1, 1), (2, 2)]
        assert policy.name == 'rec'

    def test_zero_delay_replays_the_inner_policy(self, grid):
        plain = routes_taken(lambda space: AosprPolicy(space), grid)
        delayed = routes_taken(lambda space: DelayedPolicy(AosprPolicy(space), DelayRule('constant', 0)), grid)
        assert delayed == plain

    def test_per_edge_delay_splits_feedback(self, rng):
        inner = Recorder()
        policy = DelayedPolicy(inner, DelayRule('per_edge', per_edge=(0, 2)))
        drive(policy, 3, lambda t, edges: np.array([0.1, 0.9]), rng)
        assert inner.fed[0] == (1, 1, [0], [0.1])
        assert (3, 1, [1], [0.9]) in inner.fed

    def test_geometric_delay_keeps_emission_order(self, rng):
        inner = Recorder()
        policy = DelayedPolicy(inner, DelayRule('geometric', 3.0))
        drive(policy, 300, lambda t, edges: np.zeros(2), rng)
        for e in (0, 1):
            emitted = [f[1] for f in inner.fed if e in f[2]]
            assert emitted == sorted(emitted)
            assert len(set(emitted)) == len(emitted)

    def test_rule_validation(self):
        with pytest.raises(PolicyError):
            DelayRule('poisson', 1.0)
        with pytest.raises(PolicyError):
            DelayRule('constant', -1)
        with pytest.raises(PolicyError):
            DelayRule('constant', 1.5)
        with pytest.raises(PolicyError):
            DelayRule('per_edge')
        assert DelayRule('geometric', 2.0).max_delay is None


class TestMultiSource:

    def test_uncovered_edge(self):
        with pytest.raises(InfeasibleCover):
            MultiSourceSpec(coverage=[[1, 0], [1, 0]], sweep=(1, 1))

    def test_kappa(self):
        spec = MultiSourceSpec(coverage=[[1, 1], [1, 1]], sweep=(2, 2))
        assert kappa(spec, 4) == 4
        assert kappa(spec, 1) == 0

    def test_effective_rate_bounds(self):
        overlap = MultiSourceSpec(coverage=[[1, 1], [1, 1]], sweep=(2, 2))
        disjoint = MultiSourceSpec(coverage=[[1, 0], [0, 1]], sweep=(2, 2))
        assert effective_rate(overlap, 10)[1] == approx(2.0)
        assert effective_rate(disjoint, 10)[1] == approx(1.0)
        kappa_t, _ = effective_rate(overlap, 10)
        assert kappa_t.tolist() == [kappa(overlap, t) for t in range(1, 11)]

    def test_edge_map_length(self, chains):
        with pytest.raises(ProbingError):
            SourcePair(space=EnumeratedSpace(enumerate_paths(chains, 10)), edge_map=[0, 1])

    def test_runner_pools_probes(self):
        pairs = shared_pairs()
        runner = MultiSourceRunner(pairs, n=5, budget=2)
        assert runner.spec.sweep == (2, 2)
        rngs = [np.random.default_rng(1), np.random.default_rng(2)]
        for _ in range(20):
            decisions = runner.step(lambda shared: np.full(len(shared), 0.5), rngs)
        assert runner.probe_counts.tolist() == [20] * 5
        assert all(d.observed.tolist() == [0, 1, 2, 3] for d in decisions)
        assert all(p.state.t == 20 for p in runner.policies)

    def test_coordinated_pairs_see_each_others_links(self):
        runner = MultiSourceRunner(shared_pairs(), n=5, budget=1)
        rngs = [np.random.default_rng(1), np.random.default_rng(2)]
        decisions = runner.step(lambda shared: np.zeros(len(shared)), rngs)
        for d in decisions:
            assert set(d.path.edges) <= set(d.observed.tolist())
            assert 0 in d.observed.tolist()

    def test_schedules_per_pair(self):
        with pytest.raises(ProbingError):
            MultiSourceRunner(shared_pairs(), n=5, schedules=[Schedules()])
        runner = MultiSourceRunner(shared_pairs(), n=5, schedules=[Schedules(), Schedules(c=9.0)])
        assert runner.policies[1].schedules.c == 9.0
