import math

import numpy as np
import pytest

from branchtail.cramer import (
    ContractionRootError,
    CramerSolution,
    NoSignChangeError,
    check_conditions,
    solve_alpha,
)
from branchtail.model import make_model, moment_function

from conftest import ALPHA_UNIFORM, MU_A, MU_B, model_b_spec


def det(value):
    return {"family": "deterministic", "value": value}


def test_solve_model_a(model_a):
    sol = solve_alpha(model_a, bracket=(1.2, 4.0), tol=1e-12)
    assert abs(sol.alpha - 2.0) <= 1e-8
    assert sol.residual <= 1e-12
    assert sol.mu == pytest.approx(MU_A, rel=1e-9)
    assert sol.root_kind == "second-root-of-critical-pair"


def test_solve_model_a_default_bracket_uses_critical_pattern(model_a):
    # the default bracket does not straddle 1 for this model; the critical
    # pattern restricts the search above 1 and lands on the second root
    sol = solve_alpha(model_a)
    assert abs(sol.alpha - 2.0) <= 1e-8
    assert sol.root_kind == "second-root-of-critical-pair"


def test_solve_model_b(model_b):
    sol = solve_alpha(model_b, bracket=(0.3, 3.0))
    assert abs(sol.alpha - 1.0) <= 1e-8
    assert sol.mu == pytest.approx(MU_B, rel=1e-12)
    assert sol.root_kind == "unique-root"


def test_solve_uniform_model_reports_contraction_root(uniform_model):
    # all weights sit below 1, so the moment function decreases through its
    # root; the solver must locate it precisely and then refuse it
    with pytest.raises(ContractionRootError) as err:
        solve_alpha(uniform_model, bracket=(0.5, 4.0), tol=1e-12)
    assert abs(err.value.alpha - ALPHA_UNIFORM) <= 1e-8
    assert err.value.mu < 0


def test_solve_no_sign_change():
    m = make_model({"n": det(1), "c": det(0.5), "q": det(1.0)})
    # moment function is 0.5^theta < 1 on the whole bracket
    with pytest.raises(NoSignChangeError):
        solve_alpha(m, bracket=(2.0, 5.0))


def test_solver_idempotence(model_b09):
    sol = solve_alpha(model_b09)
    again = solve_alpha(model_b09, bracket=(sol.alpha - 0.5, sol.alpha + 0.5))
    assert abs(again.alpha - sol.alpha) <= 1e-10


def test_scale_equivariance(model_b):
    # replacing C by sC moves the root so that s^a * E[N]E[C^a] = 1
    for s in (0.7, 1.3):
        scaled = make_model(model_b_spec(s))
        sol = solve_alpha(scaled)
        assert s ** sol.alpha * moment_function(model_b, sol.alpha).value == pytest.approx(
            1.0, abs=1e-10
        )


def test_mu_matches_deriv_code_path(model_a):
    from branchtail.model import moment_function_deriv

    sol = solve_alpha(model_a, bracket=(1.2, 4.0))
    assert sol.mu == moment_function_deriv(model_a, sol.alpha).value


def test_conditions_model_b_linear(model_b):
    sol = solve_alpha(model_b, bracket=(0.3, 3.0))
    rep = check_conditions(model_b, sol, "linear")
    assert rep.overall_pass
    eps = rep.entry("moment-condition-eps")
    assert eps.status == "pass"
    assert eps.value == pytest.approx(1.0)  # N <= 1 collapses it to the root value


def test_conditions_arithmetic_weight_fails():
    m = make_model({"n": det(2), "c": det(0.5), "q": det(1.0)})
    sol = CramerSolution(1.0, -0.693, 0.0, "unique-root", (0.5, 2.0))
    rep = check_conditions(m, sol, "linear")
    assert rep.entry("nonarithmetic").status == "fail"
    assert not rep.overall_pass


def test_conditions_model_a_homogeneous(model_a):
    sol = solve_alpha(model_a, bracket=(1.2, 4.0))
    rep = check_conditions(model_a, sol, "homogeneous-martingale")
    assert rep.overall_pass
    assert rep.entry("branching-spread").value == pytest.approx(0.3)
    assert rep.entry("critical-mean").status == "pass"
    # the mean-contraction entry must not appear for the critical kind
    with pytest.raises(KeyError):
        rep.entry("mean-contraction")


def test_conditions_mean_contraction_checked_for_linear(model_b09):
    sol = solve_alpha(model_b09)
    assert sol.alpha > 1.0
    rep = check_conditions(model_b09, sol, "linear")
    entry = rep.entry("mean-contraction")
    assert entry.status == "pass"
    assert entry.value == pytest.approx(0.9)


def test_conditions_critical_mean_fails_linear_kind(model_a):
    # the mean ratio is exactly 1 here but evaluates one ulp under it;
    # the additive fixed point does not exist and the check must say so
    sol = solve_alpha(model_a, bracket=(1.2, 4.0))
    rep = check_conditions(model_a, sol, "linear")
    assert not rep.overall_pass
    entry = rep.entry("mean-contraction")
    assert entry.status == "fail"
    assert entry.value == pytest.approx(1.0, abs=1e-12)


def test_conditions_deterministic_given_inputs(model_a):
    sol = solve_alpha(model_a, bracket=(1.2, 4.0))
    a = check_conditions(model_a, sol, "homogeneous-martingale")
    b = check_conditions(model_a, sol, "homogeneous-martingale")
    assert [(e.name, e.status, e.value) for e in a.entries] == [
        (e.name, e.status, e.value) for e in b.entries
    ]


def test_conditions_epsilon_validation(model_b):
    sol = solve_alpha(model_b, bracket=(0.3, 3.0))
    with pytest.raises(Exception):
        check_conditions(model_b, sol, "linear", epsilon=1.5)
