"""Tail-constant computation by every available route.

The survival function of the fixed point obeys P(R > t) ~ H t^(-alpha),
and H is computable several ways: closed forms at integer root
exponents (1 and 2 for the additive kind, 2 for the martingale kind), a
general Monte Carlo expression valid for any root exponent, and
one-sided bounds that need only component moments.  Each route is
independent of the others, so their agreement is a meaningful check of
the whole pipeline; the report type collects all of them side by side.

Component expectations are expanded under the iid-independent coupling:
the toll is independent of the offspring vector, and pair terms reduce
to E[N(N-1)/2] times the squared weight mean.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ModelError, MomentValue, dominance_ratio, sum_moment
from .moments import estimate_moment, fixed_point_mean_exact, jackknife_mean_se

_MC_SEED = 0x7C057A17
_MIN_BATCH = 100_000
_MIN_REPS = 10_000
_INTEGER_TOL = 1e-9

_MC_KINDS = ("linear", "max", "homogeneous-martingale")


class ConstantError(ModelError):
    """No tail-constant route is available for the request."""


def _alpha_integer(alpha):
    rounded = round(alpha)
    if abs(alpha - rounded) <= _INTEGER_TOL:
        return int(rounded)
    return None


def _pair_moment(model):
    """E[sum over unordered child pairs of C_i C_j]."""
    return model.n_law.pair_mean() * model.c_moment(1.0) ** 2


def tail_constant_closed_form(model, alpha, kind):
    """Closed-form H at integer root exponents.

    Additive kind at alpha 1: E[Q] / mu.  Additive kind at alpha 2:
    (E[Q^2] + 2 E[R] E[Q] E[sum C] + 2 E[R]^2 E[pair sum]) / (2 mu),
    with E[R] from the exact mean formula (never a batch).  Martingale
    kind at alpha 2: E[pair sum] / mu.  Here mu is the derivative of
    the moment function at alpha.

    Raises
    ------
    ConstantError
        Unsupported (kind, alpha) pair, or a divergent mean where the
        formula needs E[R].
    """
    from .model import moment_function, moment_function_deriv

    a = _alpha_integer(alpha)
    if kind == "homogeneous-martingale":
        if a != 2:
            raise ConstantError(
                "martingale closed form is available at alpha = 2 only")
        mu = moment_function_deriv(model, 2.0).value
        return _pair_moment(model) / mu
    if kind != "linear":
        raise ConstantError(f"no closed form for kind {kind!r}")
    if a == 1:
        mu = moment_function_deriv(model, 1.0).value
        return model.q_mean() / mu
    if a == 2:
        mean_r = fixed_point_mean_exact(model)
        if not math.isfinite(mean_r):
            raise ConstantError(
                "additive alpha=2 closed form needs a finite mean, "
                "so the mean weight sum must contract")
        mu = moment_function_deriv(model, 2.0).value
        rho = moment_function(model, 1.0).value
        cross = model.q_mean() * rho  # E[Q] E[sum C], toll independent
        second = (model.q_moment(2.0)
                  + 2.0 * mean_r * cross
                  + 2.0 * mean_r ** 2 * _pair_moment(model))
        return second / (2.0 * mu)
    raise ConstantError("closed forms exist at alpha in {1, 2} only")


def _resampled_terms(model, r_values, reps, rng, draw_toll):
    """Per-replication pieces of the MC integrand, vectorized.

    Returns (q, sums, power_sums, maxes) where sums aggregates
    C_i R_i per replication, power_sums aggregates (C_i R_i)^alpha
    pieces lazily (caller powers first), so this returns the raw terms
    instead: (q, terms, owner, counts).
    """
    q = model.draw_q(rng, reps) if draw_toll else np.zeros(reps)
    counts, weights = model.draw_offspring(rng, reps)
    draws = r_values[rng.integers(0, r_values.size, weights.size)]
    terms = weights * draws
    owner = np.repeat(np.arange(reps), counts)
    return q, terms, owner


def tail_constant_mc(model, sol, kind, r_batch, reps=_MIN_REPS, rng=None,
                     min_batch=_MIN_BATCH):
    """General Monte Carlo estimate of H, any root exponent.

    Draws fresh (Q, N, C) vectors and resamples R-values with
    replacement from ``r_batch``, forms the kind-specific integrand,
    and divides its mean by alpha times mu.  The resampling bias is
    second-order in the batch size, hence the default floor of 1e5
    batch values.

    Parameters
    ----------
    model : VectorModel
    sol : CramerSolution
        Supplies alpha and mu.
    kind : {"linear", "max", "homogeneous-martingale"}
    r_batch : SampleBatch or array_like
        Sample of the fixed-point law for the same model and kind.
    reps : int
        Fresh vectors to draw, >= 1e4.
    rng : numpy Generator, optional
        Fixed internal seed when omitted, for reproducible reports.
    min_batch : int
        Floor on the batch size.

    Returns
    -------
    MomentValue
        ``suspect`` set when alpha >= 2 and a few replications dominate
        the integrand sum (second-moment instability).
    """
    if kind not in _MC_KINDS:
        raise ConstantError(f"Monte Carlo H supports kinds {_MC_KINDS}")
    if reps < _MIN_REPS:
        raise ConstantError(f"reps must be >= {_MIN_REPS}")
    r_values = np.asarray(getattr(r_batch, "values", r_batch), dtype=float)
    if r_values.size < min_batch:
        raise ConstantError(
            f"fixed-point batch has {r_values.size} values; "
            f"need >= {min_batch} to keep resampling bias second-order")
    fp = getattr(r_batch, "model_fingerprint", None)
    if fp is not None and fp != model.fingerprint():
        raise ConstantError("fixed-point batch comes from a different model")
    if rng is None:
        rng = np.random.default_rng(_MC_SEED)
    alpha, mu = sol.alpha, sol.mu

    draw_toll = kind in ("linear", "max")
    q, terms, owner = _resampled_terms(model, r_values, reps, rng, draw_toll)
    power_sums = np.zeros(reps)
    np.add.at(power_sums, owner, terms ** alpha)
    if kind == "max":
        peaks = np.zeros(reps)
        np.maximum.at(peaks, owner, terms)
        outer = np.maximum(peaks, q) ** alpha
    else:
        sums = np.zeros(reps)
        np.add.at(sums, owner, terms)
        if kind == "linear":
            sums += q
        outer = sums ** alpha
    integrand = (outer - power_sums) / (alpha * mu)
    value = float(integrand.mean())
    se = jackknife_mean_se(integrand)
    suspect = alpha >= 2.0 and dominance_ratio(integrand) > 0.05
    return MomentValue(value, "monte-carlo", se, suspect=suspect)


def tail_constant_bounds(model, sol, kind, r_batch=None, rng=None):
    """One-sided bounds on H from component moments.

    For the toll-driven kinds, E[Q^alpha] / (alpha mu) bounds H from
    below when alpha >= 1 and from above when alpha <= 1; at alpha = 1
    the two collapse and pin H exactly.  For the martingale kind with
    non-integer alpha, an upper bound uses the (p-1)-th fixed-point
    moment estimated from a batch, p = ceil(alpha).

    Returns
    -------
    (lower, upper) : pair of float or None
        None marks a side with no applicable bound.
    """
    alpha, mu = sol.alpha, sol.mu
    lower = upper = None
    if kind in ("linear", "max", "max-plus"):
        base = model.q_moment(alpha) / (alpha * mu)
        at_one = abs(alpha - 1.0) <= _INTEGER_TOL
        if alpha >= 1.0 - _INTEGER_TOL:
            lower = base
        if alpha <= 1.0 + _INTEGER_TOL:
            upper = base
        if at_one:
            lower = upper = base
    elif kind == "homogeneous-martingale":
        if _alpha_integer(alpha) is None and r_batch is not None:
            p = math.ceil(alpha)
            r_moment = estimate_moment(r_batch, float(p - 1))
            csum = sum_moment(model, alpha, rng=rng)
            upper = (r_moment.value ** (alpha / (p - 1.0))
                     * csum.value / (alpha * mu))
    else:
        raise ConstantError(f"unknown recursion kind {kind!r}")
    return lower, upper


@dataclass(frozen=True)
class TailConstantReport:
    """All computed routes to H for one (model, kind, alpha).

    Absent routes are None.  Route agreement is a test-level property,
    not enforced here: the report records what each route said.
    """

    kind: str
    alpha: float
    mu: float
    closed_form: Optional[float]
    mc_value: Optional[float]
    mc_std_error: Optional[float]
    mc_suspect: bool
    lower_bound: Optional[float]
    upper_bound: Optional[float]

    def to_dict(self):
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "mu": self.mu,
            "closed_form": self.closed_form,
            "mc_general": self.mc_value,
            "mc_std_error": self.mc_std_error,
            "mc_suspect": self.mc_suspect,
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
        }


def tail_constant_report(model, sol, kind, r_batch=None, reps=_MIN_REPS,
                         rng=None, min_batch=_MIN_BATCH):
    """Assemble every applicable H route into one report."""
    closed = None
    try:
        closed = tail_constant_closed_form(model, sol.alpha, kind)
    except ConstantError:
        pass
    mc = None
    if r_batch is not None and kind in _MC_KINDS:
        try:
            mc = tail_constant_mc(model, sol, kind, r_batch, reps=reps,
                                  rng=rng, min_batch=min_batch)
        except ConstantError:
            # batch too small for the resampling route; leave it absent
            mc = None
    lower, upper = tail_constant_bounds(model, sol, kind, r_batch=r_batch,
                                        rng=rng)
    return TailConstantReport(
        kind=kind,
        alpha=sol.alpha,
        mu=sol.mu,
        closed_form=closed,
        mc_value=None if mc is None else mc.value,
        mc_std_error=None if mc is None else mc.std_error,
        mc_suspect=False if mc is None else mc.suspect,
        lower_bound=lower,
        upper_bound=upper,
    )
