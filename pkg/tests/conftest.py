import numpy as np
import pytest
from sqlalchemy.orm import sessionmaker

from database import init_db, make_engine
from graph import build_dag, layered, parallel_chains


# -- Graphs ------------------------------------------------------------------

DIAMOND_EDGES = [('s', 'a'), ('s', 'b'), ('a', 'b'), ('a', 'd'), ('b', 'd')]
CHAIN_MEANS = [0.1, 0.1, 0.5, 0.5, 0.9, 0.9]


@pytest.fixture
def diamond():
    """s→a→d, s→a→b→d, s→b→d"""
    dag, _ = build_dag(DIAMOND_EDGES, 's', 'd')
    return dag


@pytest.fixture
def chains():
    """Three disjoint two-edge s→d chains (edges 0-1, 2-3, 4-5)."""
    dag, _ = build_dag(parallel_chains(3, 2), 's', 'd')
    return dag


@pytest.fixture
def grid():
    """Two fully connected layers of width 2: four s→d routes of length 3."""
    dag, _ = build_dag(layered(2, 2), 's', 'd')
    return dag


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- Configs -----------------------------------------------------------------

@pytest.fixture
def chains_doc(tmp_path):
    return {
        'name': 'chains',
        'graph': {'kind': 'parallel_chains', 'count': 3, 'length': 2},
        'regime': {'kind': 'stochastic', 'means': list(CHAIN_MEANS)},
        'policies': [{'kind': 'aospr'}, {'kind': 'oracle'}],
        'horizon': 200,
        'repetitions': 2,
        'seed': 7,
        'output_dir': str(tmp_path / 'out'),
    }


# -- Registry ----------------------------------------------------------------

@pytest.fixture
def registry(tmp_path):
    """Session factory bound to a throwaway SQLite registry."""
    engine = make_engine(f"sqlite:///{tmp_path / 'runs.db'}")
    init_db(bind=engine)
    yield sessionmaker(autocommit=False, autoflush=False, bind=engine)
    engine.dispose()
