"""
Experiment Harness - AOSPR Routing Lab
======================================
Builds spaces, environments and policies from a validated ExperimentConfig,
runs R independent repetitions (one seed stream per repetition), and emits
regret curves plus summaries.

Outputs in the run directory:
  - regret.csv     round, per-policy mean/std/upper regret, link-regret and bound columns
  - summary.json   final regrets, edge counts, cold-start times (deterministic for a seed)
  - timing.json    wall-clock figures (not deterministic)
"""

import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path as FilePath
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from baselines import CombUCBPolicy, Exp3PathPolicy, OraclePolicy, oracle_step
from config import RESULTS_DIR
from database import ExperimentRun, RegretSummary
from environment import (
    AdaptiveAttacker,
    AdaptiveModel,
    ContaminatedModel,
    ContaminatedSpec,
    LossModel,
    MixedModel,
    MixedSpec,
    ObliviousModel,
    ObliviousSchedule,
    StochasticModel,
    StochasticSpec,
)
from experiment_config import (
    ExperimentConfig,
    GraphSpec,
    PolicySpec,
    ScheduleSpec,
    SchedulesSpec,
    apply_override,
)
from graph import (
    PathExplosion,
    Path,
    build_dag,
    count_paths,
    enumerate_paths,
    layered,
    parallel_chains,
    parallel_edges,
    read_graph,
)
from policy import ActionSpace, AosprPolicy, EnumeratedSpace, RoutingPolicy, Schedules, Variant
from probing import (
    DelayedPolicy,
    DelayRule,
    MinibatchPolicy,
    MultiSourceRunner,
    ProbingPolicy,
    SourcePair,
    auto_batch_size,
    effective_rate,
)
from sampler import DagSpace, SubsetSpace, block_cover

logger = logging.getLogger(__name__)

BENCH_SIZES = ((48, 6), (96, 6), (192, 6))
BENCH_VERSUS = (24, 4)
BENCH_MAX_GROWTH = 2.5             # per doubling of n
BENCH_MIN_SPEEDUP = 10.0
HINDSIGHT_CHUNK = 2_000_000          # path·round cells per matmul block


class HarnessError(ValueError):
    pass


class BenchmarkFailure(RuntimeError):
    pass


# ============================================================================
# Builders
# ============================================================================

def _hashable(v):
    return tuple(_hashable(x) for x in v) if isinstance(v, list) else v


def graph_edges(spec: GraphSpec) -> Tuple[List[Tuple[Any, Any]], Any, Any]:
    """Raw (edges, source, destination) for every graph kind but `subset`."""
    if spec.kind == 'file':
        return read_graph(spec.path)
    if spec.kind == 'inline':
        edges = [(_hashable(u), _hashable(v)) for u, v in spec.edges]
        return edges, _hashable(spec.source), _hashable(spec.destination)
    if spec.kind == 'parallel_chains':
        return parallel_chains(spec.count, spec.length), 's', 'd'
    if spec.kind == 'parallel_edges':
        return parallel_edges(spec.count), 's', 'd'
    if spec.kind == 'layered':
        return layered(spec.width, spec.layers), 's', 'd'
    raise HarnessError(f"graph kind {spec.kind!r} has no edge list")


def space_for_dag(dag, mode: str, cap: int, name: str = 'routes') -> ActionSpace:
    if mode == 'dag':
        return DagSpace(dag, cap=cap, name=name)
    if mode == 'enumerate':
        return EnumeratedSpace(enumerate_paths(dag, cap), name=name)
    if count_paths(dag) <= cap:
        return EnumeratedSpace(enumerate_paths(dag, cap), name=name)
    logger.info(f"[GRAPH] {count_paths(dag)} routes exceed cap {cap}; sampling by weight pushing")
    return DagSpace(dag, cap=cap, name=name)


def build_space(spec: GraphSpec, cap: int) -> ActionSpace:
    if spec.kind == 'subset':
        if spec.mode == 'enumerate':
            sub = SubsetSpace(spec.n, spec.k, cap=cap)
            if sub.paths is None:
                raise PathExplosion(f"C({spec.n},{spec.k}) = {sub.N} subsets exceed cap {cap}")
            return EnumeratedSpace(sub.paths, cover=block_cover(spec.n, spec.k), name='subset_enumerated')
        return SubsetSpace(spec.n, spec.k, cap=cap)
    edges, s, d = graph_edges(spec)
    dag, _ = build_dag(edges, s, d)
    return space_for_dag(dag, spec.mode, cap)


def build_schedule(spec: ScheduleSpec, n: int, horizon: int, rng: np.random.Generator) -> ObliviousSchedule:
    if spec.kind == 'constant':
        return ObliviousSchedule.constant(n, spec.value)
    if spec.kind == 'alternating':
        return ObliviousSchedule.alternating(n)
    if spec.kind == 'sinusoid':
        return ObliviousSchedule.sinusoid(n, spec.period, spec.levels)
    if spec.kind == 'random':
        return ObliviousSchedule.random_table(n, horizon, rng, spec.low, spec.high)
    schedule = ObliviousSchedule.from_csv(spec.path)
    if schedule.n != n:
        raise HarnessError(f"loss table {spec.path} has {schedule.n} columns for {n} edges")
    if schedule.rows is not None and schedule.rows < horizon:
        raise HarnessError(f"loss table {spec.path} has {schedule.rows} rows for horizon {horizon}")
    return schedule


def _adversary(regime, n: int, horizon: int, rng: np.random.Generator):
    if regime.adaptive is not None:
        a = regime.adaptive
        return AdaptiveAttacker(theta=a.theta, n=n, hit=a.hit, baseline=a.baseline)
    return build_schedule(regime.schedule, n, horizon, rng)


def build_model(regime, n: int, horizon: int, rng: np.random.Generator) -> LossModel:
    """Loss environment for the regime; `rng` only feeds construction-time draws."""
    base = None
    if regime.kind != 'adversarial':
        if len(regime.means) != n:
            raise HarnessError(f"regime.means has {len(regime.means)} entries for {n} edges")
        base = StochasticSpec(means=np.asarray(regime.means), distribution=regime.distribution, width=regime.width)

    if regime.kind == 'stochastic':
        return StochasticModel(base)
    if regime.kind == 'adversarial':
        adversary = _adversary(regime, n, horizon, rng)
        if isinstance(adversary, AdaptiveAttacker):
            return AdaptiveModel(adversary)
        return ObliviousModel(adversary)
    if regime.kind == 'mixed':
        bad = [e for e in regime.attacked if not 1 <= e <= n]
        if bad:
            raise HarnessError(f"regime.attacked ids {bad} are outside 1..{n}")
        spec = MixedSpec(
            stochastic=base,
            attacked=tuple(e - 1 for e in regime.attacked),
            adversary=_adversary(regime, n, horizon, rng),
        )
        return MixedModel(spec)
    spec = ContaminatedSpec.generate(base, regime.zeta, regime.onset, horizon, rng, density=regime.density)
    return ContaminatedModel(spec)


def build_schedules(spec: SchedulesSpec, means: Optional[np.ndarray], n: int) -> Schedules:
    known = None
    if spec.variant == Variant.KNOWN_GAP.value:
        if means is None:
            raise HarnessError("known_gap schedules need stochastic edge means")
        known = tuple(means - means.min())
    schedules = Schedules(
        variant=spec.variant, c=spec.c, eta_rule=spec.eta_rule, known_gaps=known, probe_rate=spec.probe_rate,
    )
    schedules.validate(n)
    return schedules


def build_policy(spec: PolicySpec, space: ActionSpace, model: LossModel, horizon: int,
                 loss_table: Optional[np.ndarray] = None) -> RoutingPolicy:
    if spec.kind == 'exp3_path':
        return Exp3PathPolicy(space, name=spec.name)
    if spec.kind == 'combucb1':
        return CombUCBPolicy(space, regime=model.regime, name=spec.name)
    if spec.kind == 'oracle':
        return OraclePolicy(oracle_step(model, space, loss_table), space.n, name=spec.name)

    schedules = build_schedules(spec.schedules, model.expected_losses, space.n)
    if spec.probe is not None:
        probe = spec.probe
        policy: RoutingPolicy = ProbingPolicy(
            space, schedules, budget=probe.budget, link_prob=probe.link_prob,
            long_run_m=probe.long_run_m, m_delta=probe.m_delta, n_delta=probe.n_delta,
            cold_start=probe.cold_start,
        )
    else:
        policy = AosprPolicy(space, schedules)
    if spec.minibatch is not None:
        tau = auto_batch_size(space.k, space.n, horizon) if spec.minibatch == 'auto' else spec.minibatch
        policy = MinibatchPolicy(policy, tau)
        logger.info(f"[RUN] {spec.name}: mini-batch size {tau}")
    if spec.delay is not None:
        d = spec.delay
        if d.kind == 'per_edge' and len(d.per_edge) != space.n:
            raise HarnessError(f"per-edge delays list {len(d.per_edge)} entries for {space.n} edges")
        policy = DelayedPolicy(policy, DelayRule(kind=d.kind, value=d.value, per_edge=tuple(d.per_edge)))
    policy.name = spec.name
    return policy


def _innermost(policy: RoutingPolicy) -> RoutingPolicy:
    while hasattr(policy, 'inner'):
        policy = policy.inner
    return policy


# ============================================================================
# Simulation
# ============================================================================

@dataclass
class PolicyRun:
    label: str
    choices: List[Path]
    counts: np.ndarray
    seconds: float
    cover_time: Optional[int] = None
    loss_table: Optional[np.ndarray] = None


def pregenerate(model: LossModel, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Loss table (T × n) of an oblivious environment."""
    if not model.oblivious:
        raise HarnessError("an adaptive environment cannot be drawn ahead of play")
    table = np.empty((horizon, model.n))
    for t in range(1, horizon + 1):
        table[t - 1] = model.draw(t, (), rng)
    return table


def simulate(policy: RoutingPolicy, model: LossModel, horizon: int,
             env_rng: np.random.Generator, policy_rng: np.random.Generator,
             loss_table: Optional[np.ndarray] = None, record: bool = False) -> PolicyRun:
    """
    Play `horizon` rounds. Losses come from `loss_table` when given, else
    are drawn online (adaptive attackers see the last `memory` choices).
    """
    n = model.n
    history: deque = deque(maxlen=max(1, model.memory))
    table = np.empty((horizon, n)) if record and loss_table is None else None
    choices: List[Path] = []
    counts = np.zeros(n, dtype=np.int64)

    start = time.perf_counter()
    for t in range(1, horizon + 1):
        losses = loss_table[t - 1] if loss_table is not None else model.draw(t, tuple(history), env_rng)
        if table is not None:
            table[t - 1] = losses
        decision = policy.select(policy_rng)
        policy.absorb(decision, losses[decision.observed])
        policy.advance()
        choices.append(decision.path)
        counts[decision.path.index_array] += 1
        history.append(decision.path)
    seconds = time.perf_counter() - start

    return PolicyRun(
        label=policy.name, choices=choices, counts=counts, seconds=seconds,
        cover_time=getattr(_innermost(policy), 'cover_time', None),
        loss_table=loss_table if loss_table is not None else table,
    )


# ============================================================================
# Regret
# ============================================================================

@dataclass
class RegretCurves:
    headline: np.ndarray                  # cumulative regret per round
    diagnostic: Optional[np.ndarray]      # Σ_t Σ_{e∈I_t} Δ(e) over unattacked edges


def hindsight_curve(loss_table: np.ndarray, space: ActionSpace) -> np.ndarray:
    """min over fixed routes of the cumulative loss through each round t."""
    horizon = loss_table.shape[0]
    out = np.empty(horizon)
    if space.paths is not None:
        inc = space.paths.incidence.T                        # (n, N)
        chunk = max(1, HINDSIGHT_CHUNK // max(space.N, 1))
        carry = np.zeros(space.N)
        for a in range(0, horizon, chunk):
            block = np.cumsum(loss_table[a:a + chunk] @ inc, axis=0) + carry
            out[a:a + chunk] = block.min(axis=1)
            carry = block[-1]
        return out
    cum = np.cumsum(loss_table, axis=0)
    for t in range(horizon):
        out[t] = cum[t][space.best_path(cum[t]).index_array].sum()
    return out


def compute_regret(choices: Sequence[Path], space: ActionSpace,
                   means: Optional[np.ndarray] = None, attacked: Optional[np.ndarray] = None,
                   loss_table: Optional[np.ndarray] = None) -> RegretCurves:
    """
    Pseudo-regret against the best route under `means` when nothing is
    attacked; regret against the best fixed route in hindsight on
    `loss_table` otherwise.
    """
    attacked = np.zeros(space.n, dtype=bool) if attacked is None else np.asarray(attacked, dtype=bool)
    diagnostic = None
    if means is not None:
        gaps = np.where(attacked, 0.0, means - means.min())
        diagnostic = np.cumsum([gaps[p.index_array].sum() for p in choices])

    if means is not None and not attacked.any():
        best = means[space.best_path(means).index_array].sum()
        per_round = np.array([means[p.index_array].sum() for p in choices]) - best
        return RegretCurves(headline=np.cumsum(per_round), diagnostic=diagnostic)

    if loss_table is None:
        raise HarnessError("hindsight regret needs the realized loss table")
    realized = np.array([loss_table[t, p.index_array].sum() for t, p in enumerate(choices)])
    return RegretCurves(headline=np.cumsum(realized) - hindsight_curve(loss_table, space), diagnostic=diagnostic)


def bound_overlay(k: int, n: int, rounds: np.ndarray, m: float = 1.0, theta: Optional[int] = None) -> np.ndarray:
    """
    Adversarial regret bound as a curve: 4k√(t (n/m) ln n) against an
    oblivious adversary, (θ+1)(4k√((n/m) ln n))^(2/3) t^(2/3) against an
    adaptive one with memory θ.
    """
    t = np.asarray(rounds, dtype=np.float64)
    if theta is None:
        return 4.0 * k * np.sqrt(t * (n / m) * math.log(n))
    return (theta + 1) * (4.0 * k * math.sqrt((n / m) * math.log(n))) ** (2.0 / 3.0) * t ** (2.0 / 3.0)


def _probe_rate(spec: PolicySpec) -> float:
    if spec.probe is None:
        return 1.0
    if spec.probe.long_run_m is not None:
        return spec.probe.long_run_m
    budget = spec.probe.budget
    return float(min(budget) if isinstance(budget, list) else budget)


def overlays(config: ExperimentConfig, space: ActionSpace, model: LossModel) -> Dict[str, np.ndarray]:
    """`{label}_bound` columns for AOSPR policies facing an adversary."""
    if not model.attacked.any():
        return {}
    k = space.k if model.regime == 'adversarial' else model.spec.k_a
    theta = (model.memory - 1) if not model.oblivious else None
    rounds = np.arange(1, config.horizon + 1)
    return {
        f"{p.name}_bound": bound_overlay(k, space.n, rounds, _probe_rate(p), theta)
        for p in config.policies if p.kind == 'aospr'
    }


# ============================================================================
# Repetitions
# ============================================================================

@dataclass
class RepetitionResult:
    index: int
    regret: Dict[str, np.ndarray]
    diagnostic: Dict[str, Optional[np.ndarray]]
    counts: Dict[str, np.ndarray]
    seconds: Dict[str, float]
    cover_times: Dict[str, Optional[int]]
    extras: Dict[str, Any] = field(default_factory=dict)


def _streams(seed: int, r: int):
    root = np.random.SeedSequence(seed, spawn_key=(r,))
    return root.spawn(3)         # environment, policies, construction


def run_repetition(config: ExperimentConfig, r: int) -> RepetitionResult:
    """
    One independent repetition. Every policy faces the same loss draws:
    each gets a fresh generator on the repetition's environment stream.
    """
    env_seq, policy_seq, build_seq = _streams(config.seed, r)
    build_rng = np.random.default_rng(build_seq)
    space = build_space(config.graph, config.path_cap)
    model = build_model(config.regime, space.n, config.horizon, build_rng)
    needs_table = bool(model.attacked.any())
    table = pregenerate(model, config.horizon, np.random.default_rng(env_seq)) \
        if needs_table and model.oblivious else None

    result = RepetitionResult(index=r, regret={}, diagnostic={}, counts={}, seconds={}, cover_times={})
    for spec, seq in zip(config.policies, policy_seq.spawn(len(config.policies))):
        policy = build_policy(spec, space, model, config.horizon, table)
        run = simulate(
            policy, model, config.horizon,
            env_rng=np.random.default_rng(env_seq), policy_rng=np.random.default_rng(seq),
            loss_table=table, record=needs_table,
        )
        curves = compute_regret(run.choices, space, model.expected_losses, model.attacked, run.loss_table)
        result.regret[spec.name] = curves.headline
        result.diagnostic[spec.name] = curves.diagnostic
        result.counts[spec.name] = run.counts
        result.seconds[spec.name] = run.seconds / config.horizon
        result.cover_times[spec.name] = run.cover_time
        logger.debug(f"[RUN] rep {r} {spec.name}: final regret {curves.headline[-1]:.3f}")
    return result


def build_pairs(config: ExperimentConfig) -> Tuple[List[SourcePair], int]:
    edges, _, _ = graph_edges(config.graph)
    pairs = []
    for p in config.multisource.pairs:
        dag, report = build_dag(edges, _hashable(p.source), _hashable(p.destination))
        label = p.label or f"{p.source}->{p.destination}"
        space = space_for_dag(dag, config.graph.mode, config.path_cap, name=label)
        pairs.append(SourcePair(space=space, edge_map=np.asarray(report.kept), label=label))
    labels = [p.label for p in pairs]
    if len(set(labels)) != len(labels):
        raise HarnessError(f"pair labels must be unique, got {labels}")
    return pairs, len(edges)


def run_multisource_repetition(config: ExperimentConfig, r: int) -> RepetitionResult:
    """S learners on one shared network; per-pair regret on each pair's own routes."""
    ms = config.multisource
    env_seq, policy_seq, build_seq = _streams(config.seed, r)
    pairs, n = build_pairs(config)
    model = build_model(config.regime, n, config.horizon, np.random.default_rng(build_seq))
    if not model.oblivious:
        raise HarnessError("multisource runs need an oblivious environment")

    means = model.expected_losses
    schedules = [
        build_schedules(ms.schedules, None if means is None else means[p.edge_map], p.space.n) for p in pairs
    ]
    runner = MultiSourceRunner(pairs, n, schedules, ms.budget, ms.mode)
    rngs = [np.random.default_rng(seq) for seq in policy_seq.spawn(len(pairs))]
    env_rng = np.random.default_rng(env_seq)
    table = np.empty((config.horizon, n))
    choices: List[List[Path]] = [[] for _ in pairs]

    start = time.perf_counter()
    for t in range(1, config.horizon + 1):
        losses = model.draw(t, (), env_rng)
        table[t - 1] = losses
        for s, decision in enumerate(runner.step(lambda edges: losses[edges], rngs)):
            choices[s].append(decision.path)
    seconds = (time.perf_counter() - start) / config.horizon

    result = RepetitionResult(index=r, regret={}, diagnostic={}, counts={}, seconds={}, cover_times={})
    for pair, picks in zip(pairs, choices):
        em = pair.edge_map
        curves = compute_regret(
            picks, pair.space,
            None if means is None else means[em], model.attacked[em], table[:, em],
        )
        counts = np.zeros(pair.space.n, dtype=np.int64)
        for p in picks:
            counts[p.index_array] += 1
        result.regret[pair.label] = curves.headline
        result.diagnostic[pair.label] = curves.diagnostic
        result.counts[pair.label] = counts
        result.seconds[pair.label] = seconds
        result.cover_times[pair.label] = None
    _, kappa_bar = effective_rate(runner.spec, config.horizon)
    result.extras = {'kappa_bar': kappa_bar, 'probe_counts': runner.probe_counts.tolist()}
    return result


# ============================================================================
# Aggregation and output
# ============================================================================

@dataclass
class RegretTrace:
    labels: List[str]
    horizon: int
    regret: Dict[str, np.ndarray]                     # (R, T)
    diagnostic: Dict[str, Optional[np.ndarray]]       # (R, T)
    counts: Dict[str, np.ndarray]                     # (R, n)
    round_seconds: Dict[str, np.ndarray]              # (R,)
    cover_times: Dict[str, List[Optional[int]]]
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def repetitions(self) -> int:
        return self.regret[self.labels[0]].shape[0]

    def mean(self, label: str) -> np.ndarray:
        return self.regret[label].mean(axis=0)

    def std(self, label: str) -> np.ndarray:
        return self.regret[label].std(axis=0)

    def summary(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for label in self.labels:
            finals = self.regret[label][:, -1]
            covers = [c for c in self.cover_times[label] if c is not None]
            out[label] = {
                'final_mean_regret': float(finals.mean()),
                'final_std_regret': float(finals.std()),
                'final_regrets': [float(x) for x in finals],
                'mean_edge_counts': [float(x) for x in self.counts[label].mean(axis=0)],
                'mean_cover_time': float(np.mean(covers)) if covers else None,
            }
            diag = self.diagnostic[label]
            if diag is not None:
                out[label]['final_mean_link_regret'] = float(diag[:, -1].mean())
        return out


def aggregate(results: Sequence[RepetitionResult], horizon: int) -> RegretTrace:
    results = sorted(results, key=lambda x: x.index)
    labels = list(results[0].regret)

    def stack(attr: str, label: str):
        rows = [getattr(res, attr)[label] for res in results]
        return None if any(row is None for row in rows) else np.vstack(rows)

    trace = RegretTrace(
        labels=labels, horizon=horizon,
        regret={lb: stack('regret', lb) for lb in labels},
        diagnostic={lb: stack('diagnostic', lb) for lb in labels},
        counts={lb: stack('counts', lb) for lb in labels},
        round_seconds={lb: np.array([res.seconds[lb] for res in results]) for lb in labels},
        cover_times={lb: [res.cover_times[lb] for res in results] for lb in labels},
    )
    if 'kappa_bar' in results[0].extras:
        trace.extras['kappa_bar'] = results[0].extras['kappa_bar']
        trace.extras['mean_probe_counts'] = np.mean([res.extras['probe_counts'] for res in results], axis=0).tolist()
    return trace


def regret_frame(trace: RegretTrace, bounds: Optional[Dict[str, np.ndarray]] = None) -> pd.DataFrame:
    columns: Dict[str, np.ndarray] = {'round': np.arange(1, trace.horizon + 1)}
    for label in trace.labels:
        mean, std = trace.mean(label), trace.std(label)
        columns[f"{label}_mean_regret"] = mean
        columns[f"{label}_std_regret"] = std
        columns[f"{label}_upper"] = mean + std
        if trace.diagnostic[label] is not None:
            columns[f"{label}_mean_link_regret"] = trace.diagnostic[label].mean(axis=0)
    for name, curve in (bounds or {}).items():
        columns[name] = curve
    return pd.DataFrame(columns)


def emit(trace: RegretTrace, config: ExperimentConfig, out_dir,
         bounds: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, FilePath]:
    out = FilePath(out_dir)
    paths = {
        'regret': out / 'regret.csv',
        'summary': out / 'summary.json',
        'timing': out / 'timing.json',
    }
    summary = {
        'name': config.name,
        'regime': config.regime.kind,
        'horizon': config.horizon,
        'repetitions': trace.repetitions,
        'seed': config.seed,
        'policies': trace.summary(),
    }
    if trace.extras:
        summary['multisource'] = {'mode': config.multisource.mode, **trace.extras}
    timing = {label: {'mean_round_seconds': float(trace.round_seconds[label].mean())} for label in trace.labels}
    try:
        out.mkdir(parents=True, exist_ok=True)
        regret_frame(trace, bounds).to_csv(paths['regret'], index=False, float_format='%.10g')
        paths['summary'].write_text(json.dumps(summary, indent=2, sort_keys=True))
        paths['timing'].write_text(json.dumps(timing, indent=2, sort_keys=True))
    except OSError as e:
        raise HarnessError(f"cannot write results to {e.filename or out}: {e.strerror or e}") from e
    return paths


@dataclass
class RunResult:
    trace: RegretTrace
    paths: Dict[str, FilePath]
    output_dir: FilePath


def run(config: ExperimentConfig, output_dir=None, workers: Optional[int] = None, write: bool = True) -> RunResult:
    out = FilePath(output_dir or config.output_dir or FilePath(RESULTS_DIR) / config.name)
    jobs = workers or config.workers
    worker = run_multisource_repetition if config.multisource is not None else run_repetition
    logger.info(
        f"[RUN] {config.name}: {config.regime.kind} regime, T={config.horizon}, "
        f"R={config.repetitions}, {jobs} worker(s)"
    )
    results = Parallel(n_jobs=jobs)(delayed(worker)(config, r) for r in range(config.repetitions))
    trace = aggregate(results, config.horizon)

    bounds = None
    if config.multisource is None:
        space = build_space(config.graph, config.path_cap)
        seq = _streams(config.seed, 0)[2]
        bounds = overlays(config, space, build_model(config.regime, space.n, config.horizon,
                                                     np.random.default_rng(seq)))
    paths = emit(trace, config, out, bounds) if write else {}
    for label, row in trace.summary().items():
        logger.info(f"[REGRET] {label}: final regret {row['final_mean_regret']:.3f} ± {row['final_std_regret']:.3f}")
    return RunResult(trace=trace, paths=paths, output_dir=out)


def sweep(doc: Dict[str, Any], key: str, values: Iterable[Any], out_dir,
          workers: Optional[int] = None) -> pd.DataFrame:
    """One run per value of the dotted `key`; sweep.csv collects the final regrets."""
    out = FilePath(out_dir)
    rows = []
    for value in values:
        cfg = ExperimentConfig.model_validate(apply_override(doc, key, value))
        tag = json.dumps(value).replace('"', '').replace(' ', '').replace('/', '_')
        result = run(cfg, output_dir=out / f"{key}={tag}", workers=workers)
        for label, row in result.trace.summary().items():
            rows.append({
                'param': key, 'value': json.dumps(value), 'policy': label,
                'final_mean_regret': row['final_mean_regret'],
                'final_std_regret': row['final_std_regret'],
            })
    frame = pd.DataFrame(rows)
    try:
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / 'sweep.csv', index=False, float_format='%.10g')
    except OSError as e:
        raise HarnessError(f"cannot write {out / 'sweep.csv'}: {e.strerror or e}") from e
    return frame


# ============================================================================
# Benchmark
# ============================================================================

def _time_rounds(space: ActionSpace, rounds: int, rng: np.random.Generator) -> float:
    """Median wall-clock seconds of one sample + all marginals at fresh weights."""
    eps = np.full(space.n, 0.25 / space.n)
    laps = []
    for _ in range(rounds):
        lw = -rng.uniform(0.0, 5.0, size=space.n)
        start = time.perf_counter()
        space.sample(lw, eps, rng)
        space.marginals(lw, eps)
        laps.append(time.perf_counter() - start)
    return float(np.median(laps))


def bench(out_dir=None, rounds: int = 20, seed: int = 0,
          sizes: Sequence[Tuple[int, int]] = BENCH_SIZES,
          versus: Optional[Tuple[int, int]] = BENCH_VERSUS,
          check: bool = False) -> pd.DataFrame:
    """
    Per-round sampling cost of the subset DP, and DP against enumeration.
    `ratio` is the cost growth over the previous size for DP rows and the
    DP speedup for the enumeration row. With `check`, a growth of
    BENCH_MAX_GROWTH or more per doubling, or a speedup of
    BENCH_MIN_SPEEDUP or less, raises BenchmarkFailure after the CSV is written.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for n, k in sizes:
        space = SubsetSpace(n, k, cap=0)
        cost = _time_rounds(space, rounds, rng)
        ratio = cost / rows[-1]['seconds_per_round'] if rows else None
        rows.append({'mode': 'dp', 'n': n, 'k': k, 'N': space.N, 'seconds_per_round': cost, 'ratio': ratio})
        if ratio is not None:
            logger.info(f"[BENCH] n {rows[-2]['n']}→{n}: cost ×{ratio:.2f}")
    failures = [
        f"cost grew ×{cur['ratio']:.2f} from n={prev['n']} to n={cur['n']}"
        for prev, cur in zip(rows, rows[1:])
        if cur['ratio'] >= BENCH_MAX_GROWTH ** math.log2(cur['n'] / prev['n'])
    ]

    if versus is not None:
        n, k = versus
        dp = SubsetSpace(n, k, cap=math.comb(n, k))
        enum = EnumeratedSpace(dp.paths, cover=block_cover(n, k), name='subset_enumerated')
        fast = _time_rounds(dp, rounds, rng)
        slow = _time_rounds(enum, rounds, rng)
        rows.append({'mode': 'dp', 'n': n, 'k': k, 'N': dp.N, 'seconds_per_round': fast, 'ratio': None})
        rows.append({'mode': 'enumerate', 'n': n, 'k': k, 'N': dp.N, 'seconds_per_round': slow,
                     'ratio': slow / fast})
        logger.info(f"[BENCH] C({n},{k}) = {dp.N}: DP is ×{slow / fast:.1f} faster than enumeration")
        if slow / fast <= BENCH_MIN_SPEEDUP:
            failures.append(f"DP is only ×{slow / fast:.1f} faster than enumeration at C({n},{k})")

    frame = pd.DataFrame(rows)
    if out_dir is not None:
        out = FilePath(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            frame.to_csv(out / 'bench.csv', index=False, float_format='%.6g')
        except OSError as e:
            raise HarnessError(f"cannot write {out / 'bench.csv'}: {e.strerror or e}") from e
    if check and failures:
        raise BenchmarkFailure('; '.join(failures))
    return frame


# ============================================================================
# Registry
# ============================================================================

def record_run(db, config: ExperimentConfig, result: RunResult, run_row=None):
    """Store (or complete) an ExperimentRun row with per-policy summaries."""
    if run_row is None:
        run_row = ExperimentRun(
            name=config.name, status='running', config=config.model_dump(mode='json'),
            horizon=config.horizon, repetitions=config.repetitions, seed=config.seed,
            started_at=datetime.utcnow(),
        )
        db.add(run_row)
        db.flush()
    summary = result.trace.summary()
    run_row.status = 'completed'
    run_row.output_dir = str(result.output_dir)
    run_row.summary = {label: {k: v for k, v in row.items() if k.startswith('final_mean')}
                       for label, row in summary.items()}
    run_row.completed_at = datetime.utcnow()
    for label, row in summary.items():
        db.add(RegretSummary(
            run_id=run_row.id, policy=label,
            final_mean_regret=row['final_mean_regret'],
            final_std_regret=row['final_std_regret'],
            mean_round_seconds=float(result.trace.round_seconds[label].mean()),
        ))
    db.commit()
    return run_row
