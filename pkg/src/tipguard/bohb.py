"""Budgeted hyperparameter search: Hyperband scheduling with TPE sampling.

Successive halving ladders allocate epochs across candidate configurations,
eliminating all but the top 1/eta at each rung. New candidates are drawn
either uniformly at random or from a Tree-structured Parzen Estimator: two
kernel density estimates split the observed configurations into "good" and
"bad" halves, and the proposal maximizing their density ratio wins. That is
the BOHB recipe, reduced to the pieces this package needs (integer and
categorical dimensions, no conditional spaces).
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DIMENSION_KINDS = ("integer", "categorical")

#: Reference sampler defaults; override per call when experimenting.
DEFAULT_RHO = 1.0 / 3.0
DEFAULT_GOOD_FRACTION = 0.15
DEFAULT_N_SAMPLES = 64
DEFAULT_BANDWIDTH_FACTOR = 3.0
DEFAULT_ETA = 3.0

BANDWIDTH_FLOOR = 1e-3
DENSITY_FLOOR = 1e-32
_LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)


# ---------------------------------------------------------------------------
# configuration space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dimension:
    """One search axis: an integer range or a finite set of choices."""

    name: str
    kind: str
    bounds: tuple

    def __post_init__(self):
        if self.kind not in DIMENSION_KINDS:
            raise ValueError(
                f"dimension kind must be one of {DIMENSION_KINDS}, "
                f"got {self.kind!r}")
        bounds = tuple(self.bounds)
        if self.kind == "integer":
            if len(bounds) != 2:
                raise ValueError(f"integer bounds need (low, high), got {bounds}")
            low, high = int(bounds[0]), int(bounds[1])
            if low > high:
                raise ValueError(f"integer bounds reversed: {low} > {high}")
            bounds = (low, high)
        elif not bounds:
            raise ValueError("categorical dimension needs at least one choice")
        object.__setattr__(self, "bounds", bounds)


@dataclass(frozen=True)
class ConfigSpace:
    """The set of legal configurations, as named dimensions."""

    dimensions: tuple

    def __post_init__(self):
        dims = tuple(self.dimensions)
        if not dims:
            raise ValueError("config space needs at least one dimension")
        names = [dim.name for dim in dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dimension names in {names}")
        object.__setattr__(self, "dimensions", dims)

    @property
    def d(self):
        return len(self.dimensions)

    @property
    def integer_dims(self):
        return tuple(d for d in self.dimensions if d.kind == "integer")

    @property
    def categorical_dims(self):
        return tuple(d for d in self.dimensions if d.kind == "categorical")

    def validate(self, config):
        """Raise if `config` is not a point of this space."""
        missing = {d.name for d in self.dimensions} - set(config)
        if missing:
            raise ValueError(f"config is missing dimension(s) {sorted(missing)}")
        for dim in self.dimensions:
            value = config[dim.name]
            if dim.kind == "integer":
                low, high = dim.bounds
                if int(value) != value or not low <= value <= high:
                    raise ValueError(
                        f"{dim.name}={value!r} outside integer range "
                        f"[{low}, {high}]")
            elif value not in dim.bounds:
                raise ValueError(
                    f"{dim.name}={value!r} not one of {dim.bounds}")

    def sample_uniform(self, rng):
        config = {}
        for dim in self.dimensions:
            if dim.kind == "integer":
                low, high = dim.bounds
                config[dim.name] = int(rng.integers(low, high + 1))
            else:
                config[dim.name] = dim.bounds[int(rng.integers(len(dim.bounds)))]
        return config

    def finalize(self, raw):
        """Round and clip a real-valued proposal onto the space."""
        config = {}
        for dim in self.dimensions:
            value = raw[dim.name]
            if dim.kind == "integer":
                low, high = dim.bounds
                config[dim.name] = int(min(high, max(low, round(value))))
            else:
                if value not in dim.bounds:
                    raise ValueError(
                        f"{dim.name}={value!r} not one of {dim.bounds}")
                config[dim.name] = value
        return config


def space_to_json(space):
    payload = {"dimensions": [
        {"name": d.name, "kind": d.kind, "bounds": list(d.bounds)}
        for d in space.dimensions]}
    return json.dumps(payload, indent=2, sort_keys=True)


def space_from_json(text):
    payload = json.loads(text) if isinstance(text, str) else text
    dims = tuple(Dimension(name=d["name"], kind=d["kind"],
                           bounds=tuple(d["bounds"]))
                 for d in payload["dimensions"])
    return ConfigSpace(dimensions=dims)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    """One evaluated configuration at one budget.

    A failed evaluation carries loss +inf so the search can keep going while
    still remembering the configuration; NaN is rejected outright.
    """

    config: dict
    loss: float
    budget: float

    def __post_init__(self):
        loss = float(self.loss)
        if math.isnan(loss):
            raise ValueError("observation loss must not be NaN")
        if not self.budget > 0:
            raise ValueError(f"budget must be positive, got {self.budget}")
        object.__setattr__(self, "loss", loss)
        object.__setattr__(self, "budget", float(self.budget))


def _config_key(config):
    return tuple(sorted(config.items()))


# ---------------------------------------------------------------------------
# successive halving ladder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShSchedule:
    """A rung ladder: (n_configs, budget) rows with geometric elimination."""

    eta: float
    min_budget: float
    max_budget: float
    rungs: tuple  # ((n_configs, budget), ...)


def _ladder_len(ratio, eta):
    """floor(log_eta(ratio)) + 1, computed by multiplication to dodge log()
    roundoff on exact powers."""
    length, level = 1, eta
    while level <= ratio * (1.0 + 1e-12):
        length += 1
        level *= eta
    return length


def sh_schedule(n, eta, min_budget, max_budget):
    """Plan successive halving for `n` configurations.

    Rung i keeps ceil(n / eta^i) configurations. Budgets are anchored at the
    top: the final rung always runs at max_budget and earlier rungs shrink by
    eta, so a lone configuration is evaluated once, at full budget.
    """
    if n < 1:
        raise ValueError(f"need at least one configuration, got {n}")
    if eta <= 1.0:
        raise ValueError(f"eta must exceed 1, got {eta}")
    if not 0 < min_budget <= max_budget:
        raise ValueError(
            f"budgets must satisfy 0 < min <= max, got ({min_budget}, "
            f"{max_budget})")
    n_rungs = min(_ladder_len(n, eta), _ladder_len(max_budget / min_budget, eta))
    rungs = []
    for i in range(n_rungs):
        survivors = math.ceil(n / eta ** i - 1e-12)
        budget = max_budget * eta ** (i - (n_rungs - 1))
        budget = int(min(round(max_budget), max(round(min_budget), round(budget))))
        rungs.append((survivors, max(1, budget)))
    return ShSchedule(eta=eta, min_budget=min_budget, max_budget=max_budget,
                      rungs=tuple(rungs))


def reference_schedule_params():
    """The three-rung 20-to-100-epoch ladder (eta = sqrt 5, so budgets step
    20 -> ~45 -> 100)."""
    return {"min_budget": 20, "max_budget": 100, "eta": math.sqrt(5.0)}


# ---------------------------------------------------------------------------
# TPE: density split, fit, and sampling
# ---------------------------------------------------------------------------


def good_bad_split(n_observations, good_fraction, n_min):
    """Sizes of the good/bad populations: both floored at n_min."""
    n_good = max(n_min, math.floor(good_fraction * n_observations))
    n_bad = max(n_min, n_observations - n_good)
    return n_good, n_bad


@dataclass(frozen=True)
class Kde:
    """A product kernel density: Gaussians over integer dimensions (relaxed
    to the reals) times Laplace-smoothed tables over categorical ones."""

    points: np.ndarray      # (n, #integer dims)
    bandwidths: np.ndarray  # (#integer dims,)
    tables: tuple           # per categorical dim: (#choices,) probabilities

    @property
    def n(self):
        return self.points.shape[0]

    def log_density(self, numeric, cat_indices, bandwidth_factor=1.0):
        total = 0.0
        if self.points.shape[1]:
            h = self.bandwidths * bandwidth_factor
            z = (np.asarray(numeric) - self.points) / h
            log_kernel = (-0.5 * np.sum(z * z, axis=1)
                          - np.sum(np.log(h))
                          - 0.5 * self.points.shape[1] * math.log(2.0 * math.pi))
            peak = log_kernel.max()
            total += peak + math.log(np.exp(log_kernel - peak).sum() / self.n)
        for table, idx in zip(self.tables, cat_indices):
            total += math.log(table[idx])
        return total


@dataclass(frozen=True)
class KdeModel:
    """Good/bad density pair over one budget's observations."""

    space: ConfigSpace
    good: Kde
    bad: Kde
    split_loss: float
    n_good: int
    n_bad: int


def _scott_bandwidths(points):
    n, d = points.shape
    if n < 2:
        return np.full(d, BANDWIDTH_FLOOR)
    spread = np.std(points, axis=0, ddof=1)
    h = spread * n ** (-1.0 / (d + 4.0))
    return np.where(np.isfinite(h) & (h > BANDWIDTH_FLOOR), h, BANDWIDTH_FLOOR)


def _build_kde(space, configs):
    int_dims = space.integer_dims
    points = np.array([[float(c[d.name]) for d in int_dims] for c in configs],
                      dtype=float).reshape(len(configs), len(int_dims))
    tables = []
    for dim in space.categorical_dims:
        counts = np.ones(len(dim.bounds))  # Laplace smoothing
        for config in configs:
            counts[dim.bounds.index(config[dim.name])] += 1.0
        tables.append(counts / counts.sum())
    return Kde(points=points, bandwidths=_scott_bandwidths(points),
               tables=tuple(tables))


def tpe_fit(space, observations, good_fraction=DEFAULT_GOOD_FRACTION,
            n_min=None):
    """Split observations into good/bad populations and fit a KDE to each.

    Ties in loss resolve by insertion order, so the split is deterministic
    even when every observation scored the same.
    """
    if n_min is None:
        n_min = space.d + 1
    n = len(observations)
    if n < n_min + 2:
        raise ValueError(
            f"density fit needs at least {n_min + 2} observations, got {n}")
    order = sorted(range(n), key=lambda i: (observations[i].loss, i))
    n_good, n_bad = good_bad_split(n, good_fraction, n_min)
    good_configs = [observations[order[i]].config for i in range(n_good)]
    bad_configs = [observations[order[i]].config for i in range(n - n_bad, n)]
    split_loss = observations[order[n_good - 1]].loss
    return KdeModel(space=space,
                    good=_build_kde(space, good_configs),
                    bad=_build_kde(space, bad_configs),
                    split_loss=split_loss, n_good=n_good, n_bad=n_bad)


def tpe_sample(model, rng, n_samples=DEFAULT_N_SAMPLES,
               bandwidth_factor=DEFAULT_BANDWIDTH_FACTOR):
    """Propose the candidate with the highest good/bad density ratio.

    Candidates are drawn from the good density with widened bandwidths (to
    keep exploring around promising points), scored with the unwidened
    densities, and the winner is rounded and clipped back onto the space.
    """
    if n_samples < 1:
        raise ValueError(f"need at least one candidate, got {n_samples}")
    space, good, bad = model.space, model.good, model.bad
    int_dims = space.integer_dims
    cat_dims = space.categorical_dims

    centers = rng.integers(good.n, size=n_samples)
    numeric = np.empty((n_samples, len(int_dims)))
    if int_dims:
        widened = good.bandwidths * bandwidth_factor
        numeric = (good.points[centers]
                   + rng.normal(size=(n_samples, len(int_dims))) * widened)
    cat_indices = np.empty((n_samples, len(cat_dims)), dtype=int)
    for j, table in enumerate(good.tables):
        cat_indices[:, j] = np.searchsorted(np.cumsum(table),
                                            rng.random(n_samples),
                                            side="right")

    best_idx, best_score = 0, -math.inf
    for k in range(n_samples):
        log_l = max(good.log_density(numeric[k], cat_indices[k]),
                    _LOG_DENSITY_FLOOR)
        log_g = max(bad.log_density(numeric[k], cat_indices[k]),
                    _LOG_DENSITY_FLOOR)
        if log_l - log_g > best_score:
            best_idx, best_score = k, log_l - log_g

    raw = {dim.name: numeric[best_idx, j] for j, dim in enumerate(int_dims)}
    for j, dim in enumerate(cat_dims):
        raw[dim.name] = dim.bounds[cat_indices[best_idx, j]]
    return space.finalize(raw)


# ---------------------------------------------------------------------------
# the full search
# ---------------------------------------------------------------------------


@dataclass
class TuneResult:
    """Everything a search run produced, audit trail included."""

    incumbent: dict
    incumbent_loss: float
    observations: list
    audit: list = field(default_factory=list)
    kde_consultations: int = 0
    n_evaluations: int = 0
    n_unique_configs: int = 0
    n_unique_at_max: int = 0


def _hyperband_bracket_sizes(s_max, eta):
    """Initial configuration counts for brackets s_max down to 0."""
    return [math.ceil((s_max + 1) / (s + 1) * eta ** s - 1e-12)
            for s in range(s_max, -1, -1)]


def bohb_run(space, objective, *, min_budget, max_budget,
             eta=DEFAULT_ETA, rho=DEFAULT_RHO,
             good_fraction=DEFAULT_GOOD_FRACTION,
             n_samples=DEFAULT_N_SAMPLES,
             bandwidth_factor=DEFAULT_BANDWIDTH_FACTOR,
             n_brackets=None, seed=0, workers=1):
    """Run Hyperband brackets, proposing new configurations via TPE.

    Each new configuration is drawn uniformly at random with probability
    `rho`, otherwise from a TPE fitted to the largest budget that has
    accumulated d + 3 observations. Objective failures score +inf and the
    search continues. The incumbent is the lowest loss seen at full budget.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    rng = np.random.default_rng([seed, 0xB0B])
    s_max = _ladder_len(max_budget / min_budget, eta) - 1
    bracket_sizes = _hyperband_bracket_sizes(s_max, eta)
    if n_brackets is None:
        n_brackets = s_max + 1

    n_min = space.d + 1
    observations = []
    by_budget = {}
    audit = []
    kde_consultations = 0
    proposed = set()

    def current_model():
        for budget in sorted(by_budget, reverse=True):
            group = by_budget[budget]
            if len(group) >= n_min + 2:
                return tpe_fit(space, group, good_fraction, n_min)
        return None

    def evaluate(config, budget):
        started = time.perf_counter()
        try:
            loss = float(objective(config, budget))
            if math.isnan(loss):
                raise ValueError("objective returned NaN")
        except Exception as exc:
            log.warning("objective failed on %s at budget %s: %s",
                        config, budget, exc)
            loss = math.inf
        return loss, time.perf_counter() - started

    def record(config, loss, budget, wall, bracket, rung):
        obs = Observation(config=config, loss=loss, budget=budget)
        observations.append(obs)
        by_budget.setdefault(budget, []).append(obs)
        audit.append({"bracket": bracket, "rung": rung, "config": dict(config),
                      "loss": loss, "budget": budget, "wall_time_s": wall})

    for bracket_index in range(n_brackets):
        s = s_max - bracket_index % (s_max + 1)
        n = bracket_sizes[s_max - s]
        schedule = sh_schedule(n, eta, max_budget * eta ** (-s), max_budget)

        model = current_model()
        configs = []
        for _ in range(schedule.rungs[0][0]):
            config = None
            if model is not None and rng.random() >= rho:
                config = tpe_sample(model, rng, n_samples, bandwidth_factor)
                kde_consultations += 1
                if _config_key(config) in proposed:
                    # A repeat proposal adds no information (the objective is
                    # deterministic) and, worse, piles duplicates into the
                    # good density until its bandwidth collapses. Explore
                    # instead.
                    config = None
            if config is None:
                config = space.sample_uniform(rng)
            proposed.add(_config_key(config))
            configs.append(config)

        losses = []
        for rung_index, (n_rung, budget) in enumerate(schedule.rungs):
            if rung_index:
                order = sorted(range(len(configs)),
                               key=lambda i: (losses[i], i))
                configs = [configs[i] for i in order[:n_rung]]
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(
                        lambda c: evaluate(c, budget), configs))
            else:
                results = [evaluate(c, budget) for c in configs]
            losses = [loss for loss, _ in results]
            for config, (loss, wall) in zip(configs, results):
                record(config, loss, budget, wall, bracket_index, rung_index)

    top_budget = max(o.budget for o in observations)
    finalists = [o for o in observations if o.budget == top_budget]
    best = min(range(len(finalists)), key=lambda i: (finalists[i].loss, i))
    return TuneResult(
        incumbent=dict(finalists[best].config),
        incumbent_loss=finalists[best].loss,
        observations=observations,
        audit=audit,
        kde_consultations=kde_consultations,
        n_evaluations=len(observations),
        n_unique_configs=len({_config_key(o.config) for o in observations}),
        n_unique_at_max=len({_config_key(o.config) for o in finalists}),
    )


def write_audit(records, path):
    """Append-style JSON-lines audit log; +inf losses serialize as "inf"."""
    with open(path, "w", encoding="utf-8") as handle:
        for rec in records:
            row = dict(rec)
            if not math.isfinite(row["loss"]):
                row["loss"] = "inf"
            handle.write(json.dumps(row, sort_keys=True) + "\n")
