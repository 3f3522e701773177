import sys

import numpy as np
import pytest
from hypothesis import settings

from curvlink import nn

settings.register_profile("curvlink", max_examples=60, deadline=None)
settings.load_profile("curvlink")


def random_model(dims, seed, activation="tanh", loss="cross_entropy", loss_bound=None, scale=1.0):
    """Model with N(0, scale^2) weights and biases, independent of mlp_init."""
    spec = nn.ModelSpec(tuple(dims), activation, loss, loss_bound)
    g = np.random.default_rng(seed)
    weights = [(scale * g.standard_normal((a, b)), scale * g.standard_normal(b))
               for a, b in zip(spec.layer_dims[:-1], spec.layer_dims[1:])]
    return nn.Model(spec, tuple(weights))


@pytest.fixture
def make_model():
    return random_model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
