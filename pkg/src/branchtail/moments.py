"""Exact moment identities and constructive moment bounds.

The generation sums W_n of a weighted branching process satisfy
E[W_n] = E[Q] rho^n with rho the mean of the weight sum, and their
beta-moments admit explicit geometric bounds.  For beta <= 1 the bound
is subadditive and needs no contraction assumption; for beta > 1 it
relies on a constructive constant K_beta built by induction over integer
moment orders.  This module computes the exact identities, transcribes
the constant literally (no sharpening), and verifies every inequality by
Monte Carlo on sampled batches.

All bounds are one-sided: a report ``holds`` when the empirical moment
does not exceed the bound by more than three standard errors.
"""

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelError, MomentValue, moment_function, sum_moment

_JACKKNIFE_BLOCKS = 100

# Contraction factors within float noise of 1 make the geometric series
# closures meaningless (the bound blows past 1e20); treat them as divergent.
ETA_TOL = 1e-12


def contractive(eta):
    """Whether a contraction factor is usably below 1."""
    return eta < 1.0 - ETA_TOL


class BoundError(ModelError):
    """A bound was requested outside its regime of validity."""


@dataclass(frozen=True)
class MomentReport:
    """One verified moment inequality.

    Attributes
    ----------
    target : str
        What the moment is taken of ("W_n", "R", "R^(n)", "weighted-sum").
    beta : float
        Moment order.
    estimate, std_error : float
        Monte Carlo estimate of the moment and its standard error.
    bound : float
        Analytic upper bound (may be ``inf`` in non-contractive regimes).
    bound_name : str
        Which bound produced the number.
    holds : bool
        ``estimate <= bound + 3 * std_error``, computed exactly so.
    """

    target: str
    beta: float
    estimate: float
    std_error: float
    bound: float
    bound_name: str
    holds: bool

    def __post_init__(self):
        if not (self.bound >= 0.0):
            raise BoundError("moment bounds are nonnegative")


def make_report(target, beta, estimate, std_error, bound, bound_name):
    """Assemble a MomentReport, deriving ``holds`` from the stated rule."""
    holds = bool(estimate <= bound + 3.0 * std_error)
    return MomentReport(target, float(beta), float(estimate), float(std_error),
                        float(bound), bound_name, holds)


def generation_mean_exact(model, n):
    """E[W_n] = E[Q] * rho^n with rho the mean weight-sum.

    Valid for every n >= 0; no contraction is required.
    """
    if n < 0:
        raise BoundError("generation index must be >= 0")
    rho = moment_function(model, 1.0).value
    return model.q_mean() * rho ** n


def fixed_point_mean_exact(model):
    """E[R] = E[Q] / (1 - rho) for the additive fixed point.

    Returns ``inf`` when rho >= 1: the mean series diverges there,
    consistent with a tail index at or below one.
    """
    rho = moment_function(model, 1.0).value
    if not contractive(rho):
        # a rho within one ulp of 1 would turn into a 2^53-sized "mean"
        return math.inf
    return model.q_mean() / (1.0 - rho)


def _k_integer(model, p, rng=None):
    """Constructive constant K_p for integer p >= 1, by induction.

    K_1 = E[Q].  Each step closes a geometric series driven by
    eta_p = rho_p v rho, so finiteness requires eta_p < 1 at every
    level above the base.
    """
    k = model.q_mean()
    method = "closed-form"
    suspect = False
    rho = moment_function(model, 1.0).value
    for step in range(2, p + 1):
        rho_p = moment_function(model, float(step)).value
        eta = max(rho_p, rho)
        if not contractive(eta):
            return MomentValue(math.inf, method, diverged=True)
        csum = sum_moment(model, float(step), rng=rng)
        if csum.method == "monte-carlo":
            method = "monte-carlo"
            suspect = suspect or csum.suspect
        big_k = csum.value * k ** (step / (step - 1.0))
        series = 1.0 / (1.0 - eta ** (1.0 / (step - 1.0)))
        k = model.q_moment(float(step)) + big_k / eta * series
    return MomentValue(k, method, suspect=suspect)


def constructive_constant(model, beta, rng=None):
    """The proof constant K_beta with E[W_n^beta] <= K_beta (rho v rho_beta)^n.

    Transcribed literally from the inductive proof: integer orders build
    on each other, and a fractional order beta in (p-1, p) adds one
    interpolation step with gamma = beta / (p - 1).  The constant is not
    optimized; it exists to make truncation error certificates explicit.

    Parameters
    ----------
    model : VectorModel
    beta : float
        Moment order, >= 1.
    rng : numpy Generator, optional
        Needed only when E[(sum C)^beta] has no closed form.

    Returns
    -------
    MomentValue
        ``diverged`` is set (value inf) outside the contractive regime.
    """
    if beta < 1.0:
        raise BoundError("constructive constant is defined for beta >= 1")
    p = math.ceil(beta)
    if p == beta:
        return _k_integer(model, int(beta), rng=rng)
    base = _k_integer(model, p - 1, rng=rng)
    if base.diverged:
        return base
    rho = moment_function(model, 1.0).value
    rho_beta = moment_function(model, beta).value
    eta = max(rho, rho_beta)
    if not contractive(eta):
        return MomentValue(math.inf, base.method, diverged=True)
    gamma = beta / (p - 1.0)
    csum = sum_moment(model, beta, rng=rng)
    method = base.method
    suspect = base.suspect
    if csum.method == "monte-carlo":
        method = "monte-carlo"
        suspect = suspect or csum.suspect
    big_k = csum.value * base.value ** (beta / (p - 1.0))
    series = 1.0 / (1.0 - eta ** (gamma - 1.0))
    value = model.q_moment(beta) + big_k / eta * series
    return MomentValue(value, method, suspect=suspect)


def generation_moment_bound(model, beta, n, rng=None):
    """Analytic upper bound on E[W_n^beta].

    beta <= 1: E[Q^beta] rho_beta^n by subadditivity, valid with no
    contraction assumption.  beta > 1: K_beta (rho v rho_beta)^n, which
    is ``inf`` (diverged flag) outside the contractive regime.

    Returns
    -------
    MomentValue
        ``method`` names the bound that produced the value.
    """
    if n < 0:
        raise BoundError("generation index must be >= 0")
    if beta <= 0:
        raise BoundError("moment order must be positive")
    if beta <= 1.0:
        rho_beta = moment_function(model, beta).value
        value = model.q_moment(beta) * rho_beta ** n
        return MomentValue(value, "generation-subadditive")
    k_beta = constructive_constant(model, beta, rng=rng)
    if k_beta.diverged:
        return MomentValue(math.inf, "generation-constructive", diverged=True)
    rho = moment_function(model, 1.0).value
    rho_beta = moment_function(model, beta).value
    eta = max(rho, rho_beta)
    return MomentValue(k_beta.value * eta ** n, "generation-constructive",
                       k_beta.std_error, suspect=k_beta.suspect)


def verify_sum_inequality(model, beta, y_values, reps, rng):
    """Check E[(sum C_i Y_i)^beta - sum (C_i Y_i)^beta] <= bound by MC.

    The bound is (E[Y^(p-1)])^(beta/(p-1)) * E[(sum C)^beta] with
    p = ceil(beta), Y drawn independently of (N, C).  Y is resampled
    with replacement from ``y_values``.

    Parameters
    ----------
    model : VectorModel
    beta : float
        Must exceed 1; the inequality is vacuous below that.
    y_values : array_like
        Empirical sample of the iid input Y >= 0.
    reps : int
        Monte Carlo replications for the left side.
    rng : numpy Generator

    Returns
    -------
    MomentReport
    """
    if beta <= 1.0:
        raise BoundError("the sum inequality applies for beta > 1")
    y = np.asarray(y_values, dtype=float)
    if y.size == 0:
        raise BoundError("y_values must be nonempty")
    if reps < 2:
        raise BoundError("reps must be >= 2")
    p = math.ceil(beta)
    counts, weights = model.draw_offspring(rng, reps)
    draws = y[rng.integers(0, y.size, weights.size)]
    terms = weights * draws
    owner = np.repeat(np.arange(reps), counts)
    sums = np.zeros(reps)
    np.add.at(sums, owner, terms)
    power_sums = np.zeros(reps)
    np.add.at(power_sums, owner, terms ** beta)
    lhs_samples = sums ** beta - power_sums
    estimate = float(lhs_samples.mean())
    se = float(lhs_samples.std(ddof=1) / math.sqrt(reps))
    y_moment = float(np.mean(y ** (p - 1)))
    csum = sum_moment(model, beta, rng=rng)
    bound = y_moment ** (beta / (p - 1.0)) * csum.value
    return make_report("weighted-sum", beta, estimate, se, bound,
                       "sum-interpolation")


def jackknife_mean_se(samples, blocks=_JACKKNIFE_BLOCKS):
    """Delete-one-block jackknife standard error of the sample mean.

    Contiguous blocks; the block count drops to the sample size for
    small samples (delete-one).  One value yields SE 0.
    """
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n == 0:
        raise BoundError("samples must be nonempty")
    if n == 1:
        return 0.0
    b = min(blocks, n)
    edges = np.linspace(0, n, b + 1).astype(np.int64)
    total = float(x.sum())
    leave_out = np.empty(b)
    for i in range(b):
        lo, hi = edges[i], edges[i + 1]
        block = float(x[lo:hi].sum())
        leave_out[i] = (total - block) / (n - (hi - lo))
    center = leave_out.mean()
    var = (b - 1.0) / b * float(((leave_out - center) ** 2).sum())
    return math.sqrt(var)


def _tail_index_hint(values):
    """Rough tail-index estimate used only to flag unreliable moments."""
    from .tails import TailError, default_tail_count, hill_estimator

    try:
        est = hill_estimator(values, default_tail_count(len(values)))
    except TailError:
        return None
    return est.alpha


def estimate_moment(batch, beta):
    """Empirical beta-moment of a batch with a jackknife standard error.

    Accepts a SampleBatch or a bare array.  For batches of at least a
    thousand values a rough internal tail-index estimate flags the
    result as suspect when beta sits at or above it: the moment is then
    infinite or nearly so and Gaussian error bars are not trustworthy.

    Returns
    -------
    MomentValue
    """
    if beta <= 0:
        raise BoundError("moment order must be positive")
    values = np.asarray(getattr(batch, "values", batch), dtype=float)
    if values.size == 0:
        raise BoundError("batch must be nonempty")
    powered = values ** beta
    estimate = float(powered.mean())
    se = jackknife_mean_se(powered)
    suspect = False
    if values.size >= 1000:
        hint = _tail_index_hint(values)
        if hint is not None and beta >= hint:
            suspect = True
    return MomentValue(estimate, "monte-carlo", se, suspect=suspect)
