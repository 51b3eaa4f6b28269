from pathlib import Path

import numpy as np
import pytest

from mvagc.graph import Graph
from mvagc.model import init_model

DATA = Path(__file__).resolve().parent.parent / "data"


def random_graph(rng, n, d=3, p=0.4, label=0, connected=True, features=None):
    a = np.triu((rng.random((n, n)) < p).astype(float), 1)
    a = a + a.T
    if connected:
        for i in range(n - 1):
            a[i, i + 1] = a[i + 1, i] = 1.0
    x = rng.normal(size=(n, d)) if features is None else features
    return Graph(a, x, label)


def small_model(d, q=2, seed=0, **kw):
    opts = dict(k_order=3, views=(3, 2, 2), m_schedule=(6, 5, 4), hidden=8, dropout_rate=0.0)
    opts.update(kw)
    return init_model(d, q, seed=seed, **opts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mutag_raw():
    from mvagc.tu import load_tu_dataset

    return load_tu_dataset(DATA, "MUTAG")


@pytest.fixture(scope="session")
def mutag(mutag_raw):
    from mvagc.tu import encode_label_onehot

    return encode_label_onehot(mutag_raw)


VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record the one-line PASS/FAIL verdict of an acceptance criterion."""
    number = request.node.get_closest_marker("criterion").args[0]

    def record(ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        VERDICTS[number] = line
        print(line)
        return ok

    yield record
    if number not in VERDICTS:
        record(False, "errored before reaching a verdict")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
