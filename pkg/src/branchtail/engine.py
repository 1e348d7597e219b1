"""Depth-recursive sampling of weighted branching recursions.

Each replication grows the tree one generation at a time, holding only
the current generation's path weights, so memory is linear in the width
of the widest generation rather than the tree size.  The tree itself is
never materialized (the max-plus kind keeps a per-generation transcript
so the backward fold can run, still without node objects).

Reproducibility contract
------------------------
Replication ``i`` of a batch owns the counter-based stream keyed by
``(seed, i)``.  Within a replication the draw order per generation is
fixed: toll values first, then offspring counts, then all child weights
flat.  Two consequences are load-bearing and tested: runs of the same
seed at different depths share every draw on the common prefix of
generations (sample-path monotonicity), and the max kind is coupled
below the linear kind replication by replication.

Replications whose node count exceeds the budget are abandoned and
counted, never clipped; their values are excluded from estimates.
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import make_value_law, moment_function
from .moments import constructive_constant, contractive

DEFAULT_BUDGET = 10 ** 7
_CHUNK = 2048  # fixed so reductions associate identically for any worker count

_KINDS = ("linear", "homogeneous-martingale", "max", "max-plus")
_ITERATE_BASE_KINDS = ("linear", "max")


class EngineError(ValueError):
    """Invalid sampling request or a batch with no usable replications."""


@dataclass(frozen=True)
class SampleBatch:
    """Immutable result of a batch of replications.

    ``values`` holds the completed replications in replication order;
    budget-hit replications are excluded from it but counted.  Level
    statistics summarize generation sizes Z_k over completed
    replications (absent generations count as size 0).
    """

    kind: str
    depth: Optional[int]
    values: np.ndarray
    seed: int
    stream_count: int
    budget: int
    total_nodes: int
    truncated_replications: int
    level_mean: np.ndarray
    level_max: np.ndarray
    model_fingerprint: str
    node_counts: Optional[np.ndarray] = field(default=None, repr=False)
    truncated: Optional[np.ndarray] = field(default=None, repr=False)
    base_kind: Optional[str] = None
    r0: Optional[dict] = None

    def __post_init__(self):
        if self.values.size and float(self.values.min()) < 0.0:
            raise EngineError("batch values must be nonnegative")
        if self.truncated is not None:
            if int(self.truncated.sum()) != self.truncated_replications:
                raise EngineError("truncation mask disagrees with its count")

    @property
    def completed(self):
        return int(self.values.size)


def _replication_rng(seed, index):
    return np.random.Generator(np.random.Philox(key=[seed, index]))


def _validate_seed(seed):
    if not isinstance(seed, (int, np.integer)) or seed < 0 or seed >= 2 ** 64:
        raise EngineError("seed must be an integer in [0, 2^64)")
    return int(seed)


def _validate_depth(model, depth):
    if depth is None:
        if model.n_law.prob_zero() <= 0.0:
            raise EngineError(
                "exact mode needs P(N = 0) > 0 so the tree can terminate"
            )
        return None
    if not isinstance(depth, (int, np.integer)) or depth < 0:
        raise EngineError("depth must be an integer >= 0 (or None for exact)")
    return int(depth)


def _validate_kind(model, kind):
    if kind not in _KINDS:
        raise EngineError(f"unknown recursion kind: {kind!r}")
    if kind != "homogeneous-martingale" and model.q_law.prob_positive() == 0.0:
        raise EngineError(f"kind {kind!r} requires P(Q > 0) > 0")


def _replicate_forward(model, kind, depth, budget, rng):
    """One replication of the linear, max, or martingale kind.

    Returns (value or None, node count, generation sizes).  A None value
    means the node budget was hit and the replication abandoned.
    """
    homogeneous = kind == "homogeneous-martingale"
    pi = np.ones(1)
    nodes = 1
    z = [1]
    level = 0
    acc = 0.0
    while True:
        if not homogeneous:
            q = model.draw_q(rng, pi.size)
            if kind == "linear":
                acc += float(q @ pi)
            else:
                acc = max(acc, float((q * pi).max()))
        elif depth is not None and level == depth:
            marks = model.draw_mark(rng, pi.size)
            acc = float(marks @ pi)
        if depth is not None and level == depth:
            break
        counts, weights = model.draw_offspring(rng, pi.size)
        born = int(counts.sum())
        nodes += born
        if nodes > budget:
            return None, nodes, z
        if born == 0:
            break
        pi = np.repeat(pi, counts) * weights
        z.append(born)
        level += 1
    return acc, nodes, z


def _replicate_maxplus(model, depth, budget, rng):
    """One replication of (max over children of C R) + Q, folded backward."""
    transcript = []
    width = 1
    nodes = 1
    z = [1]
    level = 0
    while True:
        q = model.draw_q(rng, width)
        if depth is not None and level == depth:
            transcript.append((q, None, None))
            break
        counts, weights = model.draw_offspring(rng, width)
        born = int(counts.sum())
        nodes += born
        if nodes > budget:
            return None, nodes, z
        transcript.append((q, counts, weights))
        if born == 0:
            break
        width = born
        z.append(born)
        level += 1
    value = np.zeros(0)
    for q, counts, weights in reversed(transcript):
        acc = np.zeros(q.size)
        if counts is not None and value.size:
            owners = np.repeat(np.arange(q.size), counts)
            np.maximum.at(acc, owners, weights * value)
        value = acc + q
    return float(value[0]), nodes, z


def _replicate_iterate(model, base_kind, r0_law, n, budget, rng):
    """One replication of the n-step iterate from initial law r0.

    Grows the tree to generation n, folds generations 0..n-1 with the
    base recursion, and closes with the boundary term built from iid
    draws of r0 at generation n.
    """
    pi = np.ones(1)
    nodes = 1
    z = [1]
    acc = 0.0
    for level in range(n):
        q = model.draw_q(rng, pi.size)
        if base_kind == "linear":
            acc += float(q @ pi)
        else:
            acc = max(acc, float((q * pi).max()))
        counts, weights = model.draw_offspring(rng, pi.size)
        born = int(counts.sum())
        nodes += born
        if nodes > budget:
            return None, nodes, z
        if born == 0:
            return acc, nodes, z
        pi = np.repeat(pi, counts) * weights
        z.append(born)
    boundary = r0_law.sample(rng, pi.size)
    if base_kind == "linear":
        acc += float(boundary @ pi)
    else:
        acc = max(acc, float((boundary * pi).max()))
    return acc, nodes, z


def generation_weights(model, depth, budget, rng):
    """Path weights of generation ``depth`` for one replication.

    Runs the production generation loop (same draw order as the
    martingale kind) and returns the vector of path products at the
    requested generation, empty if the tree dies first, or None with
    the node count when the budget is hit.
    """
    if budget < 1:
        raise EngineError("budget must be >= 1")
    if not isinstance(depth, (int, np.integer)) or depth < 0:
        raise EngineError("depth must be an integer >= 0")
    pi = np.ones(1)
    nodes = 1
    for _ in range(depth):
        counts, weights = model.draw_offspring(rng, pi.size)
        born = int(counts.sum())
        nodes += born
        if nodes > budget:
            return None, nodes
        if born == 0:
            return np.zeros(0), nodes
        pi = np.repeat(pi, counts) * weights
    return pi, nodes


def sample_recursion(model, kind, depth, budget, rng):
    """One replication; returns (value, node_count).

    ``depth=None`` requests exact termination and requires
    P(N = 0) > 0.  A replication that exceeds the node budget returns
    value None with the count at abandonment.
    """
    _validate_kind(model, kind)
    depth = _validate_depth(model, depth)
    if budget < 1:
        raise EngineError("budget must be >= 1")
    if kind == "max-plus":
        value, nodes, _ = _replicate_maxplus(model, depth, budget, rng)
    else:
        value, nodes, _ = _replicate_forward(model, kind, depth, budget, rng)
    return value, nodes


def _run_chunk(model, kind, depth, budget, seed, start, count,
               base_kind=None, r0_params=None):
    """Replications [start, start+count); picklable worker task.

    Returns plain arrays only.  Level sums are integers so chunk merges
    are exact and independent of chunk execution order.
    """
    r0_law = make_value_law(r0_params) if r0_params is not None else None
    values = []
    node_counts = np.empty(count, dtype=np.int64)
    truncated = np.zeros(count, dtype=bool)
    level_sums = []
    level_maxes = []
    for j in range(count):
        rng = _replication_rng(seed, start + j)
        if kind == "iterate-from":
            value, nodes, z = _replicate_iterate(
                model, base_kind, r0_law, depth, budget, rng)
        elif kind == "max-plus":
            value, nodes, z = _replicate_maxplus(model, depth, budget, rng)
        else:
            value, nodes, z = _replicate_forward(model, kind, depth, budget, rng)
        node_counts[j] = nodes
        if value is None:
            truncated[j] = True
            continue
        values.append(value)
        if len(z) > len(level_sums):
            grow = len(z) - len(level_sums)
            level_sums.extend([0] * grow)
            level_maxes.extend([0] * grow)
        for k, zk in enumerate(z):
            level_sums[k] += zk
            if zk > level_maxes[k]:
                level_maxes[k] = zk
    return (np.asarray(values, dtype=float), node_counts, truncated,
            np.asarray(level_sums, dtype=np.int64),
            np.asarray(level_maxes, dtype=np.int64))


def _merge_chunks(results):
    values = np.concatenate([r[0] for r in results])
    node_counts = np.concatenate([r[1] for r in results])
    truncated = np.concatenate([r[2] for r in results])
    depth_top = max(r[3].size for r in results)
    level_sums = np.zeros(depth_top, dtype=np.int64)
    level_maxes = np.zeros(depth_top, dtype=np.int64)
    for r in results:
        level_sums[: r[3].size] += r[3]
        np.maximum(level_maxes[: r[4].size], r[4], out=level_maxes[: r[4].size])
    return values, node_counts, truncated, level_sums, level_maxes


def _batch_common(model, kind, depth, reps, budget, seed, workers,
                  base_kind=None, r0_params=None):
    seed = _validate_seed(seed)
    if reps < 1:
        raise EngineError("reps must be >= 1")
    if workers < 1:
        raise EngineError("workers must be >= 1")
    if budget < 1:
        raise EngineError("budget must be >= 1")
    tasks = [(start, min(_CHUNK, reps - start))
             for start in range(0, reps, _CHUNK)]
    if workers == 1:
        results = [
            _run_chunk(model, kind, depth, budget, seed, start, count,
                       base_kind, r0_params)
            for start, count in tasks
        ]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_chunk, model, kind, depth, budget, seed,
                            start, count, base_kind, r0_params)
                for start, count in tasks
            ]
            results = [f.result() for f in futures]
    values, node_counts, truncated, level_sums, level_maxes = _merge_chunks(results)
    n_truncated = int(truncated.sum())
    if n_truncated == reps:
        raise EngineError(
            f"all {reps} replications exceeded the node budget {budget}"
        )
    level_mean = level_sums / float(reps - n_truncated)
    return SampleBatch(
        kind=kind,
        depth=depth,
        values=values,
        seed=seed,
        stream_count=reps,
        budget=int(budget),
        total_nodes=int(node_counts.sum()),
        truncated_replications=n_truncated,
        level_mean=level_mean,
        level_max=level_maxes,
        model_fingerprint=model.fingerprint(),
        node_counts=node_counts,
        truncated=truncated,
        base_kind=base_kind,
        r0=r0_params,
    )


def run_batch(model, kind, depth, reps, budget=DEFAULT_BUDGET, seed=0,
              workers=1):
    """Sample ``reps`` independent replications into a SampleBatch.

    The output is a deterministic function of (model, kind, depth, reps,
    budget, seed): replication i derives its stream from (seed, i), so
    the worker count changes wall time only.  Raises when every
    replication hits the budget.
    """
    _validate_kind(model, kind)
    depth = _validate_depth(model, depth)
    return _batch_common(model, kind, depth, reps, budget, seed, workers)


def iterate_from(model, kind, r0, n, reps, seed, budget=DEFAULT_BUDGET,
                 workers=1):
    """Sample the n-step iterate of the recursion started from law r0.

    For the linear kind this is the (n-1)-generation partial sum plus
    the generation-n boundary term; for the max kind the analogous
    maximum.  With r0 fixed at 0 the boundary vanishes and the sample
    paths coincide with the plain depth-(n-1) recursion.

    Parameters
    ----------
    model : VectorModel
    kind : {"linear", "max"}
    r0 : dict
        Family section for the initial-value law.
    n : int
        Iteration count, >= 0.
    reps, seed, budget, workers : as run_batch
    """
    if kind not in _ITERATE_BASE_KINDS:
        raise EngineError(f"iterate-from supports kinds {_ITERATE_BASE_KINDS}")
    _validate_kind(model, kind)
    if not isinstance(n, (int, np.integer)) or n < 0:
        raise EngineError("iteration count must be an integer >= 0")
    r0_law = make_value_law(r0)  # validate before farming out
    del r0_law
    return _batch_common(model, "iterate-from", int(n), reps, budget, seed,
                         workers, base_kind=kind, r0_params=dict(r0))


def truncation_bound(model, beta, depth, rng=None):
    """Certified bound on the beta-moment of the depth-truncation error.

    For beta <= 1 the bound is E[Q^beta] rho_beta^(depth+1) / (1 - rho_beta),
    valid whenever rho_beta < 1.  For beta > 1 it is
    K_beta eta^(depth+1) / (1 - eta^(1/beta))^beta with eta = rho v rho_beta
    and K_beta the constructive constant.  Outside the contractive regime
    the bound is infinite and ``inf`` is returned rather than raising.
    """
    if beta <= 0:
        raise EngineError("moment order must be positive")
    if not isinstance(depth, (int, np.integer)) or depth < 0:
        raise EngineError("depth must be an integer >= 0")
    rho_beta = moment_function(model, float(beta)).value
    if beta <= 1.0:
        if not contractive(rho_beta):
            return math.inf
        return (model.q_moment(float(beta)) * rho_beta ** (depth + 1)
                / (1.0 - rho_beta))
    rho = moment_function(model, 1.0).value
    eta = max(rho, rho_beta)
    if not contractive(eta):
        return math.inf
    k_beta = constructive_constant(model, beta, rng=rng)
    if k_beta.diverged:
        return math.inf
    return (k_beta.value * eta ** (depth + 1)
            / (1.0 - eta ** (1.0 / beta)) ** beta)


# ---------------------------------------------------------------------------
# batch serialization

_CSV_MAGIC = "branchtail-batch v1"


def _floats_csv(array):
    return ",".join(repr(float(x)) for x in array)


def write_batch_csv(batch, path):
    """Write one value per row with a metadata header.

    Floats are written with repr so the round-trip is bit-exact.
    """
    meta = {
        "kind": batch.kind,
        "depth": "exact" if batch.depth is None else str(batch.depth),
        "seed": str(batch.seed),
        "stream_count": str(batch.stream_count),
        "budget": str(batch.budget),
        "total_nodes": str(batch.total_nodes),
        "truncated_replications": str(batch.truncated_replications),
        "model_fingerprint": batch.model_fingerprint,
        "level_mean": _floats_csv(batch.level_mean),
        "level_max": ",".join(str(int(x)) for x in batch.level_max),
    }
    if batch.base_kind is not None:
        meta["base_kind"] = batch.base_kind
    if batch.r0 is not None:
        meta["r0"] = json.dumps(batch.r0, sort_keys=True)
    lines = [f"# {_CSV_MAGIC}"]
    lines.extend(f"# {key}={text}" for key, text in meta.items())
    lines.append("value")
    lines.extend(repr(float(v)) for v in batch.values)
    lines.append("")
    with open(path, "w", newline="\n") as handle:
        handle.write("\n".join(lines))


def read_batch_csv(path):
    """Reconstruct a SampleBatch written by write_batch_csv.

    Per-replication node counts are not stored in the CSV; the returned
    batch carries the aggregate statistics only.
    """
    meta = {}
    values = []
    with open(path, newline="") as handle:
        first = handle.readline().strip()
        if first != f"# {_CSV_MAGIC}":
            raise EngineError(f"{path} is not a batch CSV")
        in_header = True
        for line in handle:
            line = line.rstrip("\n")
            if in_header and line.startswith("# "):
                key, _, text = line[2:].partition("=")
                meta[key] = text
                continue
            if in_header:
                if line != "value":
                    raise EngineError("batch CSV missing the value column")
                in_header = False
                continue
            if line:
                values.append(float(line))
    try:
        depth = None if meta["depth"] == "exact" else int(meta["depth"])
        level_mean = (np.array([float(x) for x in meta["level_mean"].split(",")])
                      if meta["level_mean"] else np.zeros(0))
        level_max = (np.array([int(x) for x in meta["level_max"].split(",")],
                              dtype=np.int64)
                     if meta["level_max"] else np.zeros(0, dtype=np.int64))
        return SampleBatch(
            kind=meta["kind"],
            depth=depth,
            values=np.asarray(values, dtype=float),
            seed=int(meta["seed"]),
            stream_count=int(meta["stream_count"]),
            budget=int(meta["budget"]),
            total_nodes=int(meta["total_nodes"]),
            truncated_replications=int(meta["truncated_replications"]),
            level_mean=level_mean,
            level_max=level_max,
            model_fingerprint=meta["model_fingerprint"],
            base_kind=meta.get("base_kind"),
            r0=json.loads(meta["r0"]) if "r0" in meta else None,
        )
    except KeyError as exc:
        raise EngineError(f"batch CSV missing metadata field {exc}") from None


def summary(batch):
    """JSON-ready summary: moments, quantiles, and node-count statistics."""
    values = batch.values
    n = values.size
    mean = float(values.mean())
    sd = float(values.std(ddof=1)) if n > 1 else 0.0
    quantiles = {
        str(q): float(np.quantile(values, q))
        for q in (0.5, 0.9, 0.99, 0.999)
    }
    nodes = {
        "total": batch.total_nodes,
        "mean_per_replication": batch.total_nodes / batch.stream_count,
    }
    if batch.node_counts is not None:
        nodes["max_per_replication"] = int(batch.node_counts.max())
    out = {
        "kind": batch.kind,
        "depth": batch.depth,
        "seed": batch.seed,
        "replications": batch.stream_count,
        "completed": batch.completed,
        "truncated_replications": batch.truncated_replications,
        "budget": batch.budget,
        "model_fingerprint": batch.model_fingerprint,
        "value_mean": mean,
        "value_sd": sd,
        "value_std_error": sd / math.sqrt(n) if n > 1 else 0.0,
        "value_min": float(values.min()),
        "value_max": float(values.max()),
        "quantiles": quantiles,
        "nodes": nodes,
        "levels": {
            "mean": [float(x) for x in batch.level_mean],
            "max": [int(x) for x in batch.level_max],
        },
    }
    if batch.base_kind is not None:
        out["base_kind"] = batch.base_kind
    if batch.r0 is not None:
        out["r0"] = batch.r0
    return out
