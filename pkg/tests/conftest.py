import numpy as np
import pytest

from ebmcredit.data import export_bundled_mnist
from ebmcredit.model import NetworkSpec, Sample, init_params


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """IDX files written from the 5k MNIST sample bundled with mlxtend (4000 train / 1000 test)."""
    pytest.importorskip("mlxtend")
    out = tmp_path_factory.mktemp("mnist")
    export_bundled_mnist(str(out))
    return str(out)


def make_sample(spec, n=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, spec.layer_sizes[0]))
    if spec.output_head == "softmax_crossentropy":
        t = np.eye(spec.layer_sizes[-1])[rng.integers(0, spec.layer_sizes[-1], n)]
    else:
        t = rng.normal(size=(n, spec.layer_sizes[-1]))
    return Sample(x, t)


def make_net(sizes, activation="tanh", head="linear_squared_error", seed=0, scale=1.0):
    spec = NetworkSpec(tuple(sizes), activation, head)
    return spec, init_params(spec, seed, scale=scale)


ACCEPTANCE = []


def report(number, name, ok, detail):
    """Record one acceptance line; printed now and again in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
