"""Parametric families for the node vector of a weighted branching tree.

A model describes the joint law of one node's data: an offspring count N,
iid child weights C_1..C_N (independent of N), and a nonnegative toll Q.
Everything downstream (root solving, sampling, moment bounds, tail
constants) consumes models only through the interface defined here, so the
closed-form moment algebra lives in one place.

Supported count families: deterministic, two-point, geometric (on
{0,1,2,...}), Poisson.  Supported weight/toll families: deterministic,
lognormal, uniform(0,b), beta-scaled.  Deterministic laws consume no
randomness when sampled; this keeps replication streams aligned across
runs that only differ in depth.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, digamma

__all__ = [
    "ModelError",
    "MomentValue",
    "VectorModel",
    "make_model",
    "sample_vector",
    "moment_function",
    "moment_function_deriv",
    "moment_function_mc",
    "sum_moment",
    "dominance_ratio",
]


class ModelError(ValueError):
    """Invalid family name, invalid parameter, or unusable model."""


# ---------------------------------------------------------------------------
# count laws (offspring distribution)


class DeterministicCount:
    family = "deterministic"

    def __init__(self, value):
        if value != int(value) or value < 0:
            raise ModelError("deterministic count must be a nonnegative integer")
        self.value = int(value)

    def sample(self, rng, size):
        return np.full(size, self.value, dtype=np.int64)

    def mean(self):
        return float(self.value)

    def pair_mean(self):
        # E[N(N-1)/2]
        return self.value * (self.value - 1) / 2.0

    def prob_zero(self):
        return 1.0 if self.value == 0 else 0.0

    def prob_at_least_two(self):
        return 1.0 if self.value >= 2 else 0.0

    def max_value(self):
        return self.value

    def params(self):
        return {"family": self.family, "value": self.value}


class TwoPointCount:
    """Count supported on two integers, P(N=a) = p, P(N=b) = 1-p."""

    family = "two-point"

    def __init__(self, values):
        if len(values) != 2:
            raise ModelError("two-point count needs exactly two support points")
        pts = sorted((int(k), float(p)) for k, p in values.items())
        (self.a, self.pa), (self.b, self.pb) = pts
        if self.a < 0 or any(k != int(k) for k in (self.a, self.b)):
            raise ModelError("two-point support must be nonnegative integers")
        if not (0.0 <= self.pa <= 1.0 and 0.0 <= self.pb <= 1.0):
            raise ModelError("two-point probabilities must lie in [0, 1]")
        if abs(self.pa + self.pb - 1.0) > 1e-12:
            raise ModelError("two-point probabilities must sum to 1")

    def sample(self, rng, size):
        u = rng.random(size)
        return np.where(u < self.pa, self.a, self.b).astype(np.int64)

    def mean(self):
        return self.a * self.pa + self.b * self.pb

    def pair_mean(self):
        return (self.a * (self.a - 1) * self.pa + self.b * (self.b - 1) * self.pb) / 2.0

    def prob_zero(self):
        return self.pa * (self.a == 0) + self.pb * (self.b == 0)

    def prob_at_least_two(self):
        return self.pa * (self.a >= 2) + self.pb * (self.b >= 2)

    def max_value(self):
        return self.b

    def params(self):
        return {"family": self.family, "values": {str(self.a): self.pa, str(self.b): self.pb}}


class GeometricCount:
    """P(N=k) = (1-p)^k p on {0, 1, 2, ...}."""

    family = "geometric"

    def __init__(self, p):
        if not 0.0 < p <= 1.0:
            raise ModelError("geometric success probability must be in (0, 1]")
        self.p = float(p)

    def sample(self, rng, size):
        return rng.geometric(self.p, size) - 1

    def mean(self):
        return (1.0 - self.p) / self.p

    def pair_mean(self):
        q = 1.0 - self.p
        return q * q / (self.p * self.p)

    def prob_zero(self):
        return self.p

    def prob_at_least_two(self):
        return (1.0 - self.p) ** 2

    def max_value(self):
        return None

    def params(self):
        return {"family": self.family, "p": self.p}


class PoissonCount:
    family = "poisson"

    def __init__(self, lam):
        if lam <= 0:
            raise ModelError("poisson mean must be positive")
        self.lam = float(lam)

    def sample(self, rng, size):
        return rng.poisson(self.lam, size)

    def mean(self):
        return self.lam

    def pair_mean(self):
        return self.lam * self.lam / 2.0

    def prob_zero(self):
        return math.exp(-self.lam)

    def prob_at_least_two(self):
        return 1.0 - math.exp(-self.lam) * (1.0 + self.lam)

    def max_value(self):
        return None

    def params(self):
        return {"family": self.family, "mean": self.lam}


# ---------------------------------------------------------------------------
# value laws (weights and tolls)


class DeterministicValue:
    family = "deterministic"
    arithmetic = True

    def __init__(self, value):
        if value < 0:
            raise ModelError("deterministic value must be nonnegative")
        self.value = float(value)

    def sample(self, rng, size):
        return np.full(size, self.value)

    def moment(self, theta):
        # 0^0 = 1 convention so theta = 0 returns total mass
        if self.value == 0.0:
            return 1.0 if theta == 0 else 0.0
        return self.value ** theta

    def log_weighted_moment(self, theta):
        # E[X^theta log X]
        if self.value == 0.0:
            return 0.0
        return self.value ** theta * math.log(self.value)

    def mean(self):
        return self.value

    def prob_positive(self):
        return 1.0 if self.value > 0 else 0.0

    def params(self):
        return {"family": self.family, "value": self.value}


class LognormalValue:
    """log X ~ Normal(mu, sigma2)."""

    family = "lognormal"
    arithmetic = False

    def __init__(self, mu, sigma2):
        if sigma2 <= 0:
            raise ModelError("lognormal variance must be positive")
        self.mu = float(mu)
        self.sigma2 = float(sigma2)
        self.sigma = math.sqrt(self.sigma2)

    def sample(self, rng, size):
        return rng.lognormal(self.mu, self.sigma, size)

    def moment(self, theta):
        return math.exp(theta * self.mu + theta * theta * self.sigma2 / 2.0)

    def log_weighted_moment(self, theta):
        return (self.mu + theta * self.sigma2) * self.moment(theta)

    def mean(self):
        return self.moment(1.0)

    def prob_positive(self):
        return 1.0

    def params(self):
        return {"family": self.family, "mu": self.mu, "sigma2": self.sigma2}


class UniformValue:
    """Uniform on (0, b)."""

    family = "uniform"
    arithmetic = False

    def __init__(self, b):
        if b <= 0:
            raise ModelError("uniform upper endpoint must be positive")
        self.b = float(b)

    def sample(self, rng, size):
        return rng.uniform(0.0, self.b, size)

    def moment(self, theta):
        return self.b ** theta / (theta + 1.0)

    def log_weighted_moment(self, theta):
        return self.b ** theta * (math.log(self.b) - 1.0 / (theta + 1.0)) / (theta + 1.0)

    def mean(self):
        return self.b / 2.0

    def prob_positive(self):
        return 1.0

    def params(self):
        return {"family": self.family, "b": self.b}


class BetaScaledValue:
    """X = scale * Beta(a, b), support (0, scale)."""

    family = "beta-scaled"
    arithmetic = False

    def __init__(self, a, b, scale=1.0):
        if a <= 0 or b <= 0 or scale <= 0:
            raise ModelError("beta-scaled parameters must be positive")
        self.a = float(a)
        self.b = float(b)
        self.scale = float(scale)

    def sample(self, rng, size):
        return self.scale * rng.beta(self.a, self.b, size)

    def moment(self, theta):
        return self.scale ** theta * math.exp(
            betaln(self.a + theta, self.b) - betaln(self.a, self.b)
        )

    def log_weighted_moment(self, theta):
        # d/dtheta of moment: m(theta) * (log scale + psi(a+theta) - psi(a+b+theta))
        return self.moment(theta) * (
            math.log(self.scale)
            + digamma(self.a + theta)
            - digamma(self.a + self.b + theta)
        )

    def mean(self):
        return self.scale * self.a / (self.a + self.b)

    def prob_positive(self):
        return 1.0

    def params(self):
        return {"family": self.family, "a": self.a, "b": self.b, "scale": self.scale}


_COUNT_FAMILIES = {
    "deterministic": lambda s: DeterministicCount(s["value"]),
    "two-point": lambda s: TwoPointCount(s["values"]),
    "geometric": lambda s: GeometricCount(s["p"]),
    "poisson": lambda s: PoissonCount(s["mean"]),
}

_VALUE_FAMILIES = {
    "deterministic": lambda s: DeterministicValue(s["value"]),
    "lognormal": lambda s: LognormalValue(s["mu"], s["sigma2"]),
    "uniform": lambda s: UniformValue(s["b"]),
    "beta-scaled": lambda s: BetaScaledValue(s["a"], s["b"], s.get("scale", 1.0)),
}

_NONHOMOGENEOUS_KINDS = ("linear", "max", "max-plus")


def _build_law(section, families, what):
    if not isinstance(section, dict) or "family" not in section:
        raise ModelError(f"{what} law needs a 'family' entry")
    name = section["family"]
    if name not in families:
        raise ModelError(f"unknown {what} family: {name!r}")
    spec = dict(section)
    spec.pop("family")
    try:
        return families[name]({"family": name, **spec})
    except KeyError as exc:
        raise ModelError(f"{what} family {name!r} missing parameter {exc}") from None
    except ModelError:
        raise
    except (TypeError, ValueError) as exc:
        # unconvertible parameter values surface as config errors, not tracebacks
        raise ModelError(f"{what} family {name!r}: {exc}") from None


# ---------------------------------------------------------------------------


@dataclass
class MomentValue:
    """A moment functional value with its estimation provenance.

    ``std_error`` is exactly 0 for closed-form values.  ``diverged`` marks
    quantities reported as infinite instead of a float; ``suspect`` marks
    Monte Carlo estimates whose sample maxima dominate the mean, a symptom
    of an infinite-variance (or infinite-mean) integrand.
    """

    value: float
    method: str  # "closed-form" | "monte-carlo"
    std_error: float = 0.0
    diverged: bool = False
    suspect: bool = False

    def __post_init__(self):
        if self.std_error < 0:
            raise ModelError("std_error must be nonnegative")
        if self.method == "closed-form" and self.std_error != 0.0:
            raise ModelError("closed-form values carry zero std_error")


@dataclass
class VectorModel:
    """Validated law of one node vector (Q, N, C_1..C_N).

    Child weights are iid, independent of N, and multiplied by ``c_scale``.
    """

    n_law: object
    c_law: object
    q_law: object
    coupling: str = "iid-independent"
    c_scale: float = 1.0
    _fingerprint: str = field(default="", repr=False, compare=False)

    def __post_init__(self):
        if self.coupling != "iid-independent":
            raise ModelError(f"unsupported coupling: {self.coupling!r}")
        if self.c_scale <= 0:
            raise ModelError("c_scale must be positive")

    # -- sampling ----------------------------------------------------------

    def draw_q(self, rng, size):
        return self.q_law.sample(rng, size)

    def draw_mark(self, rng, size):
        """Final-generation marks: q_law, or unit marks when q is fixed at 0."""
        if isinstance(self.q_law, DeterministicValue) and self.q_law.value == 0.0:
            return np.ones(size)
        return self.q_law.sample(rng, size)

    def draw_offspring(self, rng, size):
        """Draw counts for ``size`` nodes, then all child weights flat.

        Draw order (counts first, then weights) is part of the replication
        stream contract; changing it breaks cross-depth coupling.
        """
        counts = self.n_law.sample(rng, size)
        total = int(counts.sum())
        weights = self.c_law.sample(rng, total)
        if self.c_scale != 1.0:
            weights = weights * self.c_scale
        return counts, weights

    # -- closed-form moment helpers ---------------------------------------

    def c_moment(self, theta):
        """E[(c_scale * C)^theta]."""
        return self.c_scale ** theta * self.c_law.moment(theta)

    def c_log_weighted_moment(self, theta):
        """E[(c_scale * C)^theta * log(c_scale * C)]."""
        s = self.c_scale
        return s ** theta * (
            math.log(s) * self.c_law.moment(theta) + self.c_law.log_weighted_moment(theta)
        )

    def q_moment(self, beta):
        return self.q_law.moment(beta)

    def q_mean(self):
        return self.q_law.mean()

    @property
    def nonarithmetic(self):
        return not self.c_law.arithmetic

    # -- provenance --------------------------------------------------------

    def describe(self):
        """Config-shaped description; round-trips through make_model."""
        out = {
            "n": self.n_law.params(),
            "c": self.c_law.params(),
            "q": self.q_law.params(),
        }
        if self.c_scale != 1.0:
            out["c_scale"] = self.c_scale
        return out

    def fingerprint(self):
        if not self._fingerprint:
            blob = json.dumps(self.describe(), sort_keys=True)
            self._fingerprint = hashlib.sha256(blob.encode()).hexdigest()[:16]
        return self._fingerprint


def make_model(spec, recursion_kind=None):
    """Build a validated VectorModel from a config section.

    Parameters
    ----------
    spec : dict
        Keys ``n``, ``c``, ``q`` (each a family section) and optional
        ``c_scale``.
    recursion_kind : str, optional
        Intended use; a toll law fixed at 0 is rejected for the
        nonhomogeneous kinds (linear, max, max-plus).
    """
    if not isinstance(spec, dict):
        raise ModelError("model section must be a mapping")
    unknown = set(spec) - {"n", "c", "q", "c_scale", "coupling"}
    if unknown:
        raise ModelError(f"unknown model keys: {sorted(unknown)}")
    for key in ("n", "c", "q"):
        if key not in spec:
            raise ModelError(f"model section missing {key!r} law")
    model = VectorModel(
        n_law=_build_law(spec["n"], _COUNT_FAMILIES, "count"),
        c_law=_build_law(spec["c"], _VALUE_FAMILIES, "weight"),
        q_law=_build_law(spec["q"], _VALUE_FAMILIES, "toll"),
        coupling=spec.get("coupling", "iid-independent"),
        c_scale=float(spec.get("c_scale", 1.0)),
    )
    if recursion_kind in _NONHOMOGENEOUS_KINDS and model.q_law.prob_positive() == 0.0:
        raise ModelError(
            f"recursion kind {recursion_kind!r} requires P(Q > 0) > 0; "
            "got a toll law fixed at 0"
        )
    return model


def make_value_law(section):
    """Build a standalone nonnegative value law from a family section.

    Used for initial-condition laws that are not part of a model triple.
    """
    return _build_law(section, _VALUE_FAMILIES, "value")


def sample_vector(model, rng):
    """Draw one node vector (q, n, weights) from the model."""
    q = float(model.draw_q(rng, 1)[0])
    counts, weights = model.draw_offspring(rng, 1)
    return q, int(counts[0]), weights


# ---------------------------------------------------------------------------
# moment functionals


def moment_function(model, theta):
    """E[sum_i C_i^theta], the branching moment function, in closed form.

    Factorizes as E[N] * E[C^theta] under the iid-independent coupling.
    theta = 0 is allowed and returns E[N].
    """
    if theta < 0:
        raise ModelError("moment order must be nonnegative")
    value = model.n_law.mean() * model.c_moment(theta)
    if not math.isfinite(value):
        return MomentValue(math.inf, "closed-form", diverged=True)
    return MomentValue(value, "closed-form")


def moment_function_deriv(model, theta):
    """E[sum_i C_i^theta log C_i], the derivative of the moment function."""
    if theta <= 0:
        raise ModelError("moment order must be positive")
    value = model.n_law.mean() * model.c_log_weighted_moment(theta)
    if not math.isfinite(value):
        return MomentValue(math.inf, "closed-form", diverged=True)
    return MomentValue(value, "closed-form")


def moment_function_mc(model, theta, reps, rng):
    """Monte Carlo counterpart of moment_function, for cross-checks."""
    counts, weights = model.draw_offspring(rng, reps)
    terms = np.zeros(reps)
    np.add.at(terms, np.repeat(np.arange(reps), counts), weights ** theta)
    se = float(terms.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    return MomentValue(float(terms.mean()), "monte-carlo", se)


def dominance_ratio(samples):
    """Share of the total absolute mass carried by the single largest term.

    A large value on a big sample suggests the underlying moment may be
    infinite (the usual heavy-tail failure mode of naive averaging).
    """
    total = np.abs(samples).sum()
    if total == 0.0:
        return 0.0
    return float(np.abs(samples).max() / total)


def sum_moment(model, beta, reps=100_000, rng=None):
    """E[(sum_i C_i)^beta].

    Closed form when N <= 1 almost surely (P(N=1) * E[C^beta]) or when both
    laws are deterministic; Monte Carlo with a standard error otherwise.
    """
    if beta <= 0:
        raise ModelError("moment order must be positive")
    n_max = model.n_law.max_value()
    if n_max is not None and n_max <= 1:
        p_one = 1.0 - model.n_law.prob_zero()
        return MomentValue(p_one * model.c_moment(beta), "closed-form")
    if isinstance(model.n_law, DeterministicCount) and isinstance(
        model.c_law, DeterministicValue
    ):
        total = model.n_law.value * model.c_law.value * model.c_scale
        return MomentValue(total ** beta, "closed-form")
    if rng is None:
        raise ModelError("sum_moment needs an rng for Monte Carlo estimation")
    if reps < 1:
        raise ModelError("reps must be >= 1")
    counts, weights = model.draw_offspring(rng, reps)
    sums = np.zeros(reps)
    np.add.at(sums, np.repeat(np.arange(reps), counts), weights)
    powered = sums ** beta
    se = float(powered.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    suspect = reps >= 1000 and dominance_ratio(powered) > 0.05
    return MomentValue(float(powered.mean()), "monte-carlo", se, suspect=suspect)
