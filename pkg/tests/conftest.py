import numpy as np
import pytest

from hierconformal.data import SyntheticConfig, generate_synthetic
from hierconformal.hrf import HierarchySpec

FAST_FORESTS = {
    "patient": {"n_trees": 15, "max_depth": 8},
    "hospital": {"n_trees": 10, "max_depth": 6},
    "region": {"n_trees": 10, "max_depth": 6},
}


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SyntheticConfig(n_patients=800, n_hospitals=12, seed=11))


@pytest.fixture(scope="session")
def fast_spec():
    return HierarchySpec(forests=FAST_FORESTS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY_CONFIG = {
    "data": {"synthetic": {"n_patients": 600, "n_hospitals": 10, "seed": 2}},
    "hierarchy": {"forests": FAST_FORESTS},
    "bayes": {"warmup": 200, "draws": 200},
    "alphas": [0.1, 0.2],
    "k": 3,
    "seed": 5,
    "isotonic_folds": 2,
}


@pytest.fixture
def tiny_config():
    import copy
    return copy.deepcopy(TINY_CONFIG)


# acceptance verdicts, printed once per criterion at the end of the session
ACCEPTANCE = {}
N_CRITERIA = 12


def pytest_runtest_logreport(report):
    # a criterion test that errors before recording its verdict still gets a line
    name = report.nodeid.rpartition("::")[2]
    if report.failed and name.startswith("test_c") and "test_acceptance" in report.nodeid:
        k = int(name[6:8])
        if k not in ACCEPTANCE:
            msg = report.longreprtext.strip().splitlines()
            ACCEPTANCE[k] = (False, name[9:].replace("_", " "),
                             f"error: {msg[-1] if msg else report.when}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        if k not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {k:>2}: not run")
            continue
        ok, title, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  "
                                    f"{title} | {detail}")
