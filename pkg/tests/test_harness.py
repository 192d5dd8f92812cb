"""
Harness: builders, regret accounting, output files and the run registry.
"""

import copy
import json
import math

import numpy as np
import pandas as pd
import pytest
from pytest import approx

import harness
from baselines import Exp3PathPolicy, OracleUnavailable
from database import ExperimentRun, RegretSummary
from environment import StochasticModel, StochasticSpec
from experiment_config import ExperimentConfig
from graph import Path, PathExplosion, enumerate_paths
from harness import (
    BenchmarkFailure,
    HarnessError,
    bench,
    bound_overlay,
    build_model,
    build_space,
    compute_regret,
    emit,
    hindsight_curve,
    record_run,
    run,
    simulate,
    sweep,
)
from policy import AosprPolicy, EnumeratedSpace
from sampler import DagSpace, SubsetSpace

from conftest import CHAIN_MEANS

SHARED_EDGES = [['s1', 'a'], ['s2', 'a'], ['a', 'd'], ['a', 'b'], ['b', 'd']]


def config(doc, **changes):
    doc = copy.deepcopy(doc)
    doc.update(changes)
    return ExperimentConfig.model_validate(doc)


def regret_csv(result):
    return pd.read_csv(result.paths['regret'])


def summary_json(result):
    return json.loads(result.paths['summary'].read_text())


class TestBuilders:

    def test_small_graphs_are_enumerated(self, chains_doc):
        space = build_space(config(chains_doc).graph, 100)
        assert isinstance(space, EnumeratedSpace)
        assert space.N == 3

    def test_large_graphs_fall_back_to_weight_pushing(self, chains_doc):
        graph = {'kind': 'layered', 'width': 2, 'layers': 2}
        assert isinstance(build_space(config(chains_doc, graph=graph).graph, 2), DagSpace)
        forced = {**graph, 'mode': 'dag'}
        assert isinstance(build_space(config(chains_doc, graph=forced).graph, 100), DagSpace)

    def test_subset_spaces(self, chains_doc):
        graph = {'kind': 'subset', 'n': 6, 'k': 2}
        assert isinstance(build_space(config(chains_doc, graph=graph).graph, 100), SubsetSpace)
        enumerated = build_space(config(chains_doc, graph={**graph, 'mode': 'enumerate'}).graph, 100)
        assert enumerated.name == 'subset_enumerated' and enumerated.N == 15
        with pytest.raises(PathExplosion):
            build_space(config(chains_doc, graph={**graph, 'mode': 'enumerate'}).graph, 10)

    def test_means_must_match_edges(self, chains_doc, rng):
        regime = config(chains_doc, regime={'kind': 'stochastic', 'means': [0.1, 0.2, 0.3]}).regime
        with pytest.raises(HarnessError):
            build_model(regime, 6, 100, rng)

    def test_attacked_ids_are_one_based(self, chains_doc, rng):
        doc = {'kind': 'mixed', 'means': CHAIN_MEANS, 'attacked': [6], 'schedule': {'kind': 'alternating'}}
        model = build_model(config(chains_doc, regime=doc).regime, 6, 100, rng)
        assert model.attacked.tolist() == [False] * 5 + [True]
        doc['attacked'] = [7]
        with pytest.raises(HarnessError):
            build_model(config(chains_doc, regime=doc).regime, 6, 100, rng)


class TestRegret:

    def test_hindsight_curve_agrees_across_spaces(self, chains, rng, monkeypatch):
        table = rng.random((50, 6))
        cum = np.cumsum(table, axis=0)
        brute = np.min([cum[:, list(p.edges)].sum(axis=1) for p in enumerate_paths(chains, 10)], axis=0)
        monkeypatch.setattr(harness, 'HINDSIGHT_CHUNK', 7)
        assert hindsight_curve(table, EnumeratedSpace(enumerate_paths(chains, 10))) == approx(brute)
        assert hindsight_curve(table, DagSpace(chains, cap=1)) == approx(brute)

    def test_pseudo_regret(self, chains):
        space = EnumeratedSpace(enumerate_paths(chains, 10))
        means = np.array(CHAIN_MEANS)
        best = compute_regret([Path((0, 1))] * 5, space, means)
        assert best.headline == approx(np.zeros(5))
        worse = compute_regret([Path((2, 3))] * 3, space, means)
        assert worse.headline == approx([0.8, 1.6, 2.4])
        assert worse.diagnostic == approx([0.8, 1.6, 2.4])

    def test_pseudo_regret_is_gap_weighted_play_counts(self, chains):
        space = EnumeratedSpace(enumerate_paths(chains, 10))
        means = np.array(CHAIN_MEANS)
        model = StochasticModel(StochasticSpec(means=means))
        played = simulate(AosprPolicy(space), model, 300, np.random.default_rng(5), np.random.default_rng(6))
        curves = compute_regret(played.choices, space, means)
        assert played.counts.sum() == 2 * 300
        assert curves.headline[-1] == approx(played.counts @ (means - means.min()))
        assert curves.headline == approx(curves.diagnostic)

    def test_oblivious_losses_ignore_the_routes_played(self, chains):
        space = EnumeratedSpace(enumerate_paths(chains, 10))
        model = StochasticModel(StochasticSpec(means=np.array(CHAIN_MEANS)))
        learner = simulate(AosprPolicy(space), model, 200, np.random.default_rng(5), np.random.default_rng(1),
                           record=True)
        baseline = simulate(Exp3PathPolicy(space), model, 200, np.random.default_rng(5), np.random.default_rng(2),
                            record=True)
        assert np.array_equal(learner.loss_table, baseline.loss_table)

    def test_attacked_regret_needs_table(self, chains):
        space = EnumeratedSpace(enumerate_paths(chains, 10))
        with pytest.raises(HarnessError):
            compute_regret([Path((0, 1))], space, None, np.ones(6, dtype=bool))

    def test_bound_overlay(self):
        rounds = np.array([1, 4])
        assert bound_overlay(3, 8, rounds, m=2) == approx(12 * np.sqrt(rounds * 4 * math.log(8)))
        adaptive = bound_overlay(3, 8, rounds, m=2, theta=1)
        assert adaptive == approx(2 * (12 * math.sqrt(4 * math.log(8))) ** (2 / 3) * rounds ** (2 / 3))


class TestRun:

    def test_stochastic_run_writes_outputs(self, chains_doc):
        result = run(config(chains_doc), workers=1)
        frame = regret_csv(result)
        assert len(frame) == 200
        for column in ('round', 'aospr_mean_regret', 'aospr_std_regret', 'aospr_upper',
                       'aospr_mean_link_regret', 'oracle_mean_regret'):
            assert column in frame.columns
        assert not any(c.endswith('_bound') for c in frame.columns)
        summary = summary_json(result)
        assert summary['horizon'] == 200 and summary['repetitions'] == 2
        assert summary['policies']['oracle']['final_mean_regret'] == 0.0
        assert len(summary['policies']['aospr']['final_regrets']) == 2
        assert result.paths['timing'].exists()

    def test_summary_is_reproducible(self, chains_doc, tmp_path):
        a = run(config(chains_doc), output_dir=tmp_path / 'a', workers=1)
        b = run(config(chains_doc), output_dir=tmp_path / 'b', workers=1)
        assert a.paths['summary'].read_text() == b.paths['summary'].read_text()
        assert regret_csv(a).equals(regret_csv(b))

    def test_no_write(self, chains_doc, tmp_path):
        result = run(config(chains_doc, output_dir=str(tmp_path / 'none')), workers=1, write=False)
        assert result.paths == {}
        assert not (tmp_path / 'none').exists()

    def test_flat_adversary_gives_zero_regret(self, chains_doc):
        regime = {'kind': 'adversarial', 'schedule': {'kind': 'constant', 'value': 0.5}}
        policies = [{'kind': 'aospr'}, {'kind': 'combucb1'}, {'kind': 'exp3_path'}]
        result = run(config(chains_doc, regime=regime, policies=policies), workers=1)
        for label, row in summary_json(result)['policies'].items():
            assert row['final_mean_regret'] == approx(0.0, abs=1e-9), label
        assert 'aospr_bound' in regret_csv(result).columns

    def test_mixed_regime_overlays_bound(self, chains_doc):
        regime = {'kind': 'mixed', 'means': CHAIN_MEANS, 'attacked': [1], 'schedule': {'kind': 'alternating'}}
        result = run(config(chains_doc, regime=regime), workers=1)
        frame = regret_csv(result)
        expected = bound_overlay(1, 6, np.arange(1, 201))
        assert frame['aospr_bound'].to_numpy() == approx(expected, rel=1e-8)
        assert 'aospr_mean_link_regret' in frame.columns

    def test_contaminated_regime(self, chains_doc):
        regime = {'kind': 'contaminated', 'means': CHAIN_MEANS, 'zeta': 0.1, 'onset': 20}
        summary = summary_json(run(config(chains_doc, regime=regime), workers=1))
        assert summary['regime'] == 'contaminated'
        assert summary['policies']['oracle']['final_mean_regret'] == 0.0

    def test_adaptive_regime(self, chains_doc):
        regime = {'kind': 'adversarial', 'adaptive': {'theta': 1}}
        result = run(config(chains_doc, regime=regime, policies=[{'kind': 'aospr'}]), workers=1)
        assert 'aospr_bound' in regret_csv(result).columns
        with pytest.raises(OracleUnavailable):
            run(config(chains_doc, regime=regime), workers=1)

    def test_probing_wrappers(self, chains_doc):
        policies = [
            {'kind': 'aospr', 'label': 'probe2', 'probe': {'budget': 2, 'cold_start': True}},
            {'kind': 'aospr', 'label': 'batched', 'minibatch': 4},
            {'kind': 'aospr', 'label': 'delayed', 'delay': {'kind': 'constant', 'value': 3}},
        ]
        summary = summary_json(run(config(chains_doc, policies=policies), workers=1))
        assert set(summary['policies']) == {'probe2', 'batched', 'delayed'}
        assert summary['policies']['probe2']['mean_cover_time'] is not None
        assert summary['policies']['batched']['mean_cover_time'] is None

    def test_multisource(self, chains_doc):
        doc = {
            'graph': {'kind': 'inline', 'edges': SHARED_EDGES},
            'regime': {'kind': 'stochastic', 'means': [0.2, 0.8, 0.3, 0.1, 0.1]},
            'multisource': {'pairs': [{'source': 's1', 'destination': 'd'},
                                      {'source': 's2', 'destination': 'd'}], 'budget': 2},
            'horizon': 100,
        }
        summary = summary_json(run(config(chains_doc, **doc), workers=1))
        assert set(summary['policies']) == {'s1->d', 's2->d'}
        block = summary['multisource']
        assert block['mode'] == 'coordinated'
        assert 1.0 <= block['kappa_bar'] <= 2.0
        assert block['mean_probe_counts'] == [100.0] * 5

    def test_multisource_rejects_adaptive(self, chains_doc):
        doc = {
            'graph': {'kind': 'inline', 'edges': SHARED_EDGES},
            'regime': {'kind': 'adversarial', 'adaptive': {'theta': 0}},
            'multisource': {'pairs': [{'source': 's1', 'destination': 'd'},
                                      {'source': 's2', 'destination': 'd'}]},
        }
        with pytest.raises(HarnessError):
            run(config(chains_doc, **doc), workers=1)

    def test_emit_to_a_file_fails(self, chains_doc, tmp_path):
        cfg = config(chains_doc)
        result = run(cfg, workers=1, write=False)
        blocker = tmp_path / 'taken'
        blocker.write_text('')
        with pytest.raises(HarnessError):
            emit(result.trace, cfg, blocker)

    @pytest.mark.slow
    def test_workers_do_not_change_results(self, chains_doc, tmp_path):
        serial = run(config(chains_doc), output_dir=tmp_path / 'serial', workers=1)
        pooled = run(config(chains_doc), output_dir=tmp_path / 'pooled', workers=2)
        assert serial.paths['summary'].read_text() == pooled.paths['summary'].read_text()


# -- Regime behaviour at reduced horizons -------------------------------------

GAP_MEANS = [0.3, 0.3, 0.5, 0.5, 0.7, 0.7]
TIERED_MEANS = [0.2] * 3 + [0.4] * 3 + [0.6] * 3 + [0.8] * 3


def final_regrets(cfg):
    """Final regret per repetition, by policy label; repetition r shares its environment across labels."""
    summary = run(cfg, workers=1, write=False).trace.summary()
    return {label: np.array(row['final_regrets']) for label, row in summary.items()}


def replayed_table(path, rounds, seed=11):
    """Bernoulli losses on four 3-edge chains, drawn once and replayed as a fixed schedule."""
    means = np.array(TIERED_MEANS)
    table = (np.random.default_rng(seed).random((rounds, means.size)) < means).astype(float)
    pd.DataFrame(table, columns=[f'e{i + 1}' for i in range(means.size)]).to_csv(path, index=False)
    return str(path)


def tiered_doc(chains_doc, tmp_path, policies, horizon=3000):
    table = replayed_table(tmp_path / 'table.csv', horizon)
    regime = {'kind': 'adversarial', 'schedule': {'kind': 'csv', 'path': table}}
    return config(chains_doc, graph={'kind': 'parallel_chains', 'count': 4, 'length': 3}, regime=regime,
                  policies=policies, horizon=horizon, repetitions=8, seed=5)


def probing(label, budget=2, variant='paper_sim', eta_rule='beta', **probe):
    return {'kind': 'aospr', 'label': label, 'schedules': {'variant': variant, 'eta_rule': eta_rule},
            'probe': {'budget': budget, **probe}}


@pytest.mark.slow
class TestRegimes:

    def test_stochastic_beats_path_level_exp3(self, chains_doc):
        policies = [{'kind': 'aospr', 'schedules': {'variant': 'paper_sim'}},
                    {'kind': 'exp3_path'}, {'kind': 'combucb1'}]
        regime = {'kind': 'stochastic', 'means': GAP_MEANS}
        cfg = config(chains_doc, regime=regime, policies=policies, horizon=5000, repetitions=5, seed=3)
        finals = final_regrets(cfg)
        mean = {label: v.mean() for label, v in finals.items()}
        assert mean['aospr'] < 0.8 * mean['exp3_path']
        assert mean['aospr'] <= 2.0 * mean['combucb1']

    def test_contamination_keeps_the_lead_over_exp3(self, chains_doc):
        policies = [{'kind': 'aospr', 'schedules': {'variant': 'paper_sim'}}, {'kind': 'exp3_path'}]
        regime = {'kind': 'contaminated', 'means': GAP_MEANS, 'zeta': 0.25, 'onset': 500}
        cfg = config(chains_doc, regime=regime, policies=policies, horizon=5000, repetitions=5, seed=2024)
        finals = final_regrets(cfg)
        assert finals['aospr'].mean() < finals['exp3_path'].mean()

    def test_oblivious_regret_stays_under_the_bound(self, chains_doc):
        regime = {'kind': 'adversarial', 'schedule': {'kind': 'random'}}
        cfg = config(chains_doc, regime=regime, policies=[{'kind': 'aospr'}], horizon=2000, repetitions=5, seed=9)
        curves = run(cfg, workers=1, write=False).trace.regret['aospr']
        bound = bound_overlay(2, 6, np.arange(1, 2001))
        assert curves.shape == (5, 2000)
        assert (curves <= bound).all()

    def test_extra_probes_cut_oblivious_regret(self, chains_doc, tmp_path):
        policies = [probing('single', budget=1), probing('four_links')]
        finals = final_regrets(tiered_doc(chains_doc, tmp_path, policies))
        assert finals['four_links'].mean() < 0.75 * finals['single'].mean()

    def test_stochastic_regret_ignores_link_count_errors(self, chains_doc):
        fast = 'fixed:1.0'
        policies = [probing('exact_n', variant='empirical_avg', eta_rule=fast),
                    probing('n_plus', variant='empirical_avg', eta_rule=fast, n_delta=1),
                    probing('n_minus', variant='empirical_avg', eta_rule=fast, n_delta=-1)]
        regime = {'kind': 'stochastic', 'means': GAP_MEANS}
        cfg = config(chains_doc, regime=regime, policies=policies, horizon=2000, repetitions=8, seed=4)
        finals = final_regrets(cfg)
        for label in ('n_plus', 'n_minus'):
            diffs = finals[label] - finals['exact_n']
            assert abs(diffs.mean()) <= diffs.std(ddof=1)

    def test_adversarial_regret_tracks_probe_rate_errors(self, chains_doc, tmp_path):
        policies = [probing('exact_m'), probing('m_plus', m_delta=1), probing('m_minus', m_delta=-1)]
        finals = final_regrets(tiered_doc(chains_doc, tmp_path, policies))
        for label in ('m_plus', 'm_minus'):
            diffs = finals[label] - finals['exact_m']
            assert abs(diffs.mean()) > 3 * diffs.std(ddof=1) / math.sqrt(diffs.size)
        assert finals['m_plus'].mean() > finals['exact_m'].mean() > finals['m_minus'].mean()


class TestSweepAndBench:

    def test_sweep_collects_final_regrets(self, chains_doc, tmp_path):
        doc = {**chains_doc, 'workers': 1}
        frame = sweep(doc, 'horizon', [50, 100], tmp_path / 'sweep')
        assert len(frame) == 4
        assert list(frame.columns) == ['param', 'value', 'policy', 'final_mean_regret', 'final_std_regret']
        assert (tmp_path / 'sweep' / 'sweep.csv').exists()
        assert (tmp_path / 'sweep' / 'horizon=50' / 'summary.json').exists()

    def test_bench(self, tmp_path):
        frame = bench(tmp_path, rounds=2, sizes=((10, 3), (12, 3)), versus=(8, 3))
        assert frame['mode'].tolist() == ['dp', 'dp', 'dp', 'enumerate']
        assert frame['N'].tolist()[-1] == 56
        assert (frame['seconds_per_round'] > 0).all()
        assert (tmp_path / 'bench.csv').exists()

    def test_bench_ratios(self, tmp_path):
        frame = bench(tmp_path, rounds=2, sizes=((10, 3), (20, 3)), versus=(8, 3))
        assert math.isnan(frame['ratio'][0])
        assert frame['ratio'][1] == approx(frame['seconds_per_round'][1] / frame['seconds_per_round'][0])
        assert frame['ratio'][3] == approx(frame['seconds_per_round'][3] / frame['seconds_per_round'][2])

    def test_bench_check_raises_after_writing(self, tmp_path, monkeypatch):
        monkeypatch.setattr(harness, 'BENCH_MAX_GROWTH', 0.0)
        with pytest.raises(BenchmarkFailure):
            bench(tmp_path, rounds=2, sizes=((10, 3), (20, 3)), versus=None, check=True)
        assert (tmp_path / 'bench.csv').exists()

    @pytest.mark.slow
    def test_subset_sampling_scales(self, tmp_path):
        frame = bench(tmp_path, rounds=50, check=True)
        growth = frame[frame['mode'] == 'dp']['ratio'].to_numpy()[1:3]
        assert (growth < harness.BENCH_MAX_GROWTH).all()
        assert frame['ratio'].iloc[-1] > harness.BENCH_MIN_SPEEDUP


class TestRegistry:

    def test_record_run(self, chains_doc, registry):
        cfg = config(chains_doc)
        result = run(cfg, workers=1)
        db = registry()
        try:
            row = record_run(db, cfg, result)
            stored = db.get(ExperimentRun, row.id)
            assert stored.status == 'completed'
            assert stored.output_dir == str(result.output_dir)
            assert set(stored.summary) == {'aospr', 'oracle'}
            assert db.query(RegretSummary).filter_by(run_id=row.id).count() == 2
        finally:
            db.close()
