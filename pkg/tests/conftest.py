import numpy as np
import pytest

from traceprog.domains import SecondOrderSystem, simulate_second_order
from traceprog.trace import (ObservationTrace, Schema, Step, continuous_spec,
                             demo_spec, resolve_thresholds)


@pytest.fixture
def physics_schema():
    return Schema({"x": 1, "v": 1}, {"accel": 1})


@pytest.fixture
def demo_schema():
    return Schema({"loc_c1": 2, "loc_c2": 2}, {"pick": 2, "place": 2})


@pytest.fixture
def linear_trace():
    """theta_t = 2 * x_t over a short varying state sequence."""
    schema = Schema({"x": 1, "v": 1}, {"accel": 1})
    steps = []
    rng = np.random.default_rng(42)
    x, v = 1.0, 0.5
    for _ in range(20):
        steps.append(Step({"x": [x], "v": [v]}, "accel", [2.0 * x]))
        x, v = x + 0.1 * v, v + float(rng.normal(0, 0.3))
    return ObservationTrace(schema, steps)


@pytest.fixture
def oscillator_trace():
    return simulate_second_order(SecondOrderSystem(k1=-1.0, k2=-0.2, steps=100))


@pytest.fixture
def continuous(linear_trace):
    return resolve_thresholds(continuous_spec(), linear_trace)


def make_demo_trace():
    """Two cubes far apart; c2 picked and placed just above c1."""
    schema = Schema({"loc_c1": 2, "loc_c2": 2}, {"pick": 2, "place": 2})
    c1, c2 = np.array([0.0, 0.0]), np.array([4.0, 1.0])
    target = c1 + np.array([-0.05, 1.17])
    steps = [
        Step({"loc_c1": c1, "loc_c2": c2}, "pick", c2.copy()),
        Step({"loc_c1": c1, "loc_c2": c2}, "place", target.copy()),
    ]
    return ObservationTrace(schema, steps)


@pytest.fixture
def demo_trace():
    return make_demo_trace()


@pytest.fixture
def demo(demo_trace):
    return resolve_thresholds(demo_spec(d_max=20.0), demo_trace)
