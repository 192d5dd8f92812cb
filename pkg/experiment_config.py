"""
Experiment configuration - JSON documents validated with pydantic
Field paths of validation errors are reported as dotted locations.
"""
import copy
import json
import logging
from pathlib import Path as FilePath
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from config import DEFAULT_REPETITIONS, MAX_WORKERS, PATH_CAP

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ============================================================================
# Graph
# ============================================================================

class GraphSpec(BaseModel):
    kind: Literal['file', 'inline', 'parallel_chains', 'parallel_edges', 'layered', 'subset'] = 'inline'
    path: Optional[str] = None
    edges: Optional[List[Tuple[Any, Any]]] = None
    source: Any = 's'
    destination: Any = 'd'
    count: Optional[int] = Field(default=None, ge=2)
    length: Optional[int] = Field(default=None, ge=1)
    width: Optional[int] = Field(default=None, ge=1)
    layers: Optional[int] = Field(default=None, ge=1)
    n: Optional[int] = Field(default=None, ge=2)
    k: Optional[int] = Field(default=None, ge=1)
    mode: Literal['auto', 'enumerate', 'dag'] = 'auto'

    @model_validator(mode='after')
    def _required_fields(self):
        needed = {
            'file': ('path',),
            'inline': ('edges',),
            'parallel_chains': ('count', 'length'),
            'parallel_edges': ('count',),
            'layered': ('width', 'layers'),
            'subset': ('n', 'k'),
        }[self.kind]
        missing = [name for name in needed if getattr(self, name) is None]
        if missing:
            raise ValueError(f"graph kind '{self.kind}' needs {missing}")
        if self.kind == 'file' and not FilePath(self.path).exists():
            raise ValueError(f"graph file {self.path} does not exist")
        if self.kind == 'subset' and self.k >= self.n:
            raise ValueError(f"subset graph needs k < n, got k={self.k}, n={self.n}")
        return self


# ============================================================================
# Regimes
# ============================================================================

class ScheduleSpec(BaseModel):
    kind: Literal['constant', 'alternating', 'sinusoid', 'random', 'csv'] = 'constant'
    value: float = 0.5
    period: float = Field(default=50.0, gt=0)
    levels: int = Field(default=4, ge=1)
    low: float = Field(default=0.0, ge=0, le=1)
    high: float = Field(default=1.0, ge=0, le=1)
    path: Optional[str] = None

    @model_validator(mode='after')
    def _csv_exists(self):
        if self.kind == 'csv':
            if self.path is None:
                raise ValueError("csv schedule needs a path")
            if not FilePath(self.path).exists():
                raise ValueError(f"loss table {self.path} does not exist")
        return self


class AdaptiveSpec(BaseModel):
    theta: int = Field(default=0, ge=0)
    hit: float = Field(default=1.0, ge=0, le=1)
    baseline: float = Field(default=0.1, ge=0, le=1)


class _MeansMixin(BaseModel):
    means: List[float]
    distribution: Literal['bernoulli', 'uniform'] = 'bernoulli'
    width: float = Field(default=0.1, ge=0, le=0.5)

    @field_validator('means')
    @classmethod
    def _unit_interval(cls, v):
        if not v:
            raise ValueError("means must not be empty")
        if any(not 0 <= m <= 1 for m in v):
            raise ValueError("means must lie in [0, 1]")
        return v


class _AdversaryMixin(BaseModel):
    schedule: Optional[ScheduleSpec] = None
    adaptive: Optional[AdaptiveSpec] = None

    @model_validator(mode='after')
    def _one_adversary(self):
        if (self.schedule is None) == (self.adaptive is None):
            raise ValueError("give exactly one of 'schedule' (oblivious) or 'adaptive'")
        return self


class StochasticRegime(_MeansMixin):
    kind: Literal['stochastic'] = 'stochastic'


class AdversarialRegime(_AdversaryMixin):
    kind: Literal['adversarial'] = 'adversarial'


class MixedRegime(_MeansMixin, _AdversaryMixin):
    kind: Literal['mixed'] = 'mixed'
    attacked: List[int] = Field(default_factory=list)      # edge ids, 1-based


class ContaminatedRegime(_MeansMixin):
    kind: Literal['contaminated'] = 'contaminated'
    zeta: float = Field(default=0.25, ge=0, lt=0.5)
    onset: int = Field(default=1000, ge=0)
    density: float = Field(default=1.0, gt=0, le=1)


RegimeSpec = Annotated[
    Union[StochasticRegime, AdversarialRegime, MixedRegime, ContaminatedRegime],
    Field(discriminator='kind'),
]


# ============================================================================
# Policies
# ============================================================================

class SchedulesSpec(BaseModel):
    variant: Literal['known_gap', 'empirical_avg', 'paper_sim', 'log_gap', 'zero'] = 'empirical_avg'
    c: float = Field(default=18.0, gt=0)
    eta_rule: str = 'beta'
    probe_rate: float = Field(default=1.0, ge=1)

    @field_validator('eta_rule')
    @classmethod
    def _eta_rule(cls, v):
        if v != 'beta':
            kind, _, raw = v.partition(':')
            try:
                ok = kind == 'fixed' and float(raw) > 0
            except ValueError:
                ok = False
            if not ok:
                raise ValueError("eta_rule must be 'beta' or 'fixed:<positive value>'")
        return v


class ProbeSpec(BaseModel):
    budget: Union[int, List[int]] = 1
    link_prob: Literal['mixture', 'exact'] = 'mixture'
    long_run_m: Optional[float] = Field(default=None, ge=1)
    m_delta: float = 0.0
    n_delta: float = 0.0
    cold_start: bool = False

    @field_validator('budget')
    @classmethod
    def _positive(cls, v):
        values = v if isinstance(v, list) else [v]
        if not values or any(b < 1 for b in values):
            raise ValueError("probe budgets must be >= 1")
        return v


class DelaySpec(BaseModel):
    kind: Literal['constant', 'per_edge', 'geometric'] = 'constant'
    value: float = Field(default=0.0, ge=0)
    per_edge: List[int] = Field(default_factory=list)


class PolicySpec(BaseModel):
    kind: Literal['aospr', 'exp3_path', 'combucb1', 'oracle'] = 'aospr'
    label: Optional[str] = None
    schedules: SchedulesSpec = Field(default_factory=SchedulesSpec)
    probe: Optional[ProbeSpec] = None
    delay: Optional[DelaySpec] = None
    minibatch: Optional[Union[int, Literal['auto']]] = None

    @field_validator('minibatch')
    @classmethod
    def _batch(cls, v):
        if isinstance(v, int) and v < 1:
            raise ValueError("minibatch must be >= 1 or 'auto'")
        return v

    @model_validator(mode='after')
    def _wrappers_need_aospr(self):
        if self.kind != 'aospr' and (self.probe or self.delay or self.minibatch):
            raise ValueError(f"probe/delay/minibatch options apply to aospr only, not {self.kind}")
        if self.delay is not None and self.minibatch is not None:
            raise ValueError("delay and minibatch cannot be combined")
        return self

    @property
    def name(self) -> str:
        return self.label or self.kind


class PairSpec(BaseModel):
    source: Any
    destination: Any
    label: Optional[str] = None


class MultiSourceConfig(BaseModel):
    pairs: List[PairSpec] = Field(min_length=1)
    mode: Literal['coordinated', 'uncoordinated'] = 'coordinated'
    budget: int = Field(default=1, ge=1)
    schedules: SchedulesSpec = Field(default_factory=SchedulesSpec)


# ============================================================================
# Experiment
# ============================================================================

class ExperimentConfig(BaseModel):
    name: str = 'experiment'
    graph: GraphSpec
    regime: RegimeSpec
    policies: List[PolicySpec] = Field(default_factory=lambda: [PolicySpec()], min_length=1)
    multisource: Optional[MultiSourceConfig] = None
    horizon: int = Field(ge=1)
    repetitions: int = Field(default=DEFAULT_REPETITIONS, ge=1)
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=MAX_WORKERS, ge=1)
    path_cap: int = Field(default=PATH_CAP, ge=2)
    output_dir: Optional[str] = None

    @model_validator(mode='after')
    def _unique_labels(self):
        names = [p.name for p in self.policies]
        dupes = sorted({x for x in names if names.count(x) > 1})
        if dupes:
            raise ValueError(f"policy labels must be unique, repeated: {dupes}; set 'label'")
        if self.multisource is not None and self.graph.kind == 'subset':
            raise ValueError("multisource runs need a routing graph, not a subset space")
        return self


def format_errors(err: ValidationError) -> List[str]:
    """`field.path: message` lines"""
    lines = []
    for item in err.errors():
        loc = '.'.join(str(part) for part in item['loc']) or '<root>'
        lines.append(f"{loc}: {item['msg']}")
    return lines


def _resolve_paths(doc: Dict[str, Any], base: FilePath) -> Dict[str, Any]:
    doc = copy.deepcopy(doc)
    graph = doc.get('graph') or {}
    if isinstance(graph.get('path'), str):
        graph['path'] = str((base / graph['path']).resolve())
    schedule = (doc.get('regime') or {}).get('schedule') or {}
    if isinstance(schedule.get('path'), str):
        schedule['path'] = str((base / schedule['path']).resolve())
    return doc


def read_document(path) -> Dict[str, Any]:
    file_path = FilePath(path)
    try:
        doc = json.loads(file_path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {file_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {file_path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {file_path} must be a JSON object")
    return _resolve_paths(doc, file_path.parent)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.model_validate(read_document(path))


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(doc: Dict[str, Any], key: str, value: Any) -> Dict[str, Any]:
    """Set a dotted path (`policies.0.probe.budget`) in a copy of the document."""
    doc = copy.deepcopy(doc)
    parts = key.split('.')
    node: Any = doc
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                if last:
                    node[idx] = value
                else:
                    node = node[idx]
            except (ValueError, IndexError) as e:
                raise ConfigError(f"override {key}: bad list index {part!r}") from e
        elif isinstance(node, dict):
            if last:
                node[part] = value
            else:
                node = node.setdefault(part, {})
        else:
            raise ConfigError(f"override {key}: {'.'.join(parts[:i])} is not an object or list")
    return doc


def parse_sweep(param: str) -> Tuple[str, List[Any]]:
    """`key=v1,v2,...` -> (key, values)"""
    key, sep, raw = param.partition('=')
    if not sep or not key or not raw:
        raise ConfigError(f"sweep parameter must look like key=v1,v2,... got {param!r}")
    return key, [parse_value(v) for v in raw.split(',')]
