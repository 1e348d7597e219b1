"""Shared calibrated model fixtures.

Three reference parameterizations recur across the suite:

* model_a    -- supercritical counts with lognormal weights calibrated so the
                moment function equals 1 at both 1 and 2 (critical pair).
* model_b    -- subcritical {0,1} counts with lognormal weights calibrated so
                the moment function equals 1 at exactly 1.
* model_b(s) -- model_b with a weight scale s (0.9 for the contractive
                variant, 0.3 for the strongly contractive one).
"""

import math

import pytest

from branchtail.model import make_model

LN13 = math.log(1.3)
LN2 = math.log(2.0)


def model_a_spec():
    return {
        "n": {"family": "two-point", "values": {1: 0.7, 2: 0.3}},
        "c": {"family": "lognormal", "mu": -1.5 * LN13, "sigma2": LN13},
        "q": {"family": "deterministic", "value": 1.0},
    }


def model_b_spec(c_scale=1.0):
    spec = {
        "n": {"family": "two-point", "values": {0: 0.5, 1: 0.5}},
        "c": {"family": "lognormal", "mu": LN2 - 0.5, "sigma2": 1.0},
        "q": {"family": "deterministic", "value": 1.0},
    }
    if c_scale != 1.0:
        spec["c_scale"] = c_scale
    return spec


def uniform_model_spec():
    return {
        "n": {"family": "deterministic", "value": 3},
        "c": {"family": "uniform", "b": 0.8},
        "q": {"family": "deterministic", "value": 1.0},
    }


@pytest.fixture(scope="session")
def model_a():
    return make_model(model_a_spec())


@pytest.fixture(scope="session")
def model_b():
    return make_model(model_b_spec())


@pytest.fixture(scope="session")
def model_b09():
    return make_model(model_b_spec(0.9))


@pytest.fixture(scope="session")
def model_b03():
    return make_model(model_b_spec(0.3))


@pytest.fixture(scope="session")
def uniform_model():
    return make_model(uniform_model_spec())


# Frozen oracle values (high-precision bisection / Decimal algebra, computed
# independently before the implementation).
MU_A = 0.13118213223374553          # 0.5 * ln 1.3
H_A = 1.353193379896474             # (0.3 / 1.69) / MU_A
SUM2_A = 1.3550295857988166         # 0.6 / 1.69 + 1
MU_B = 1.1931471805599454           # ln 2 + 0.5
H_B = 0.8381195683928104            # 1 / MU_B
ALPHA_UNIFORM = 1.2631362613103825  # root of 3 * 0.8^t / (t+1) = 1
RHO_HALF_B09 = 0.5919969192336495
TRUNC_B09_HALF_20 = 4.055504963383204e-05
RHO_15_B03 = 0.33810945106146389
RHO_2_B03 = 0.48929072912262817
K2_B03 = 2.9580611847559615
K15_B03 = 3.3893252439417503
