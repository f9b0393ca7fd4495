import os

import numpy as np
import pytest

from linko.cohort import SynthConfig, generate_synthetic
from linko.ontology import OntologySet, parse_ontology

# keep BLAS single-threaded so repeated runs are bit-identical
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

HEART = """code,level,parent_code,description
420-429,1,,Other forms of heart disease
428,2,420-429,Heart failure
428.0,3,428,"Congestive heart failure, unspecified"
428.1,3,428,Left heart failure
"""


def tiny_synth(**overrides) -> SynthConfig:
    cfg = dict(
        n_patients=24,
        n_leaves={"dx": 10, "rx": 6, "px": 5},
        n_groups={"dx": 4, "rx": 2, "px": 2},
        n_chapters={"dx": 2, "rx": 1, "px": 1},
        codes_per_visit={"dx": 3.0, "rx": 2.0, "px": 1.0},
        n_clusters=3,
    )
    cfg.update(overrides)
    return SynthConfig(**cfg)


@pytest.fixture
def heart():
    return parse_ontology(HEART, "dx")


@pytest.fixture(scope="session")
def toy_cohort():
    records, onts = generate_synthetic(tiny_synth(), 7)
    return records, OntologySet(onts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])
