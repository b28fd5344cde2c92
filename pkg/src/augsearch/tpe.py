"""Tree-structured Parzen estimator over a mixed categorical/continuous space.

The optimizer splits observed trials at a loss quantile into a good set and a
bad set, fits per-dimension densities to each (truncated-Gaussian mixtures
with nearest-neighbor bandwidths for continuous dims, smoothed counts for
categorical dims), samples candidates from the good density and returns the
one maximizing the good/bad density ratio -- the standard surrogate ranking
for the expected-improvement criterion under a loss-quantile threshold.

suggest/observe are serialized on an internal lock so candidate evaluation
can run on any number of workers; pending trials are invisible to the split.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

MIN_BANDWIDTH = 0.01


@dataclass(frozen=True)
class CategoricalDim:
    cardinality: int

    def __post_init__(self):
        if self.cardinality < 2:
            raise ValueError("categorical dimensions need cardinality >= 2")


@dataclass(frozen=True)
class ContinuousDim:
    """A continuous dimension on [0, 1]."""


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple

    def __post_init__(self):
        if not self.dims:
            raise ValueError("search space needs at least one dimension")
        for d in self.dims:
            if not isinstance(d, (CategoricalDim, ContinuousDim)):
                raise ValueError(f"unknown dimension type: {d!r}")
        object.__setattr__(self, "dims", tuple(self.dims))

    def __len__(self) -> int:
        return len(self.dims)

    @classmethod
    def continuous(cls, n_dims: int) -> "SearchSpace":
        return cls(tuple(ContinuousDim() for _ in range(n_dims)))

    @classmethod
    def for_policies(
        cls, n_sub_policies: int, ops_per_sub_policy: int, op_cardinality: int = 16
    ) -> "SearchSpace":
        """(kind, p, lambda) triple per op slot, sub-policy major order."""
        dims = []
        for _ in range(n_sub_policies * ops_per_sub_policy):
            dims.append(CategoricalDim(op_cardinality))
            dims.append(ContinuousDim())
            dims.append(ContinuousDim())
        return cls(tuple(dims))

    def sample_uniform(self, rng: np.random.Generator) -> np.ndarray:
        out = np.empty(len(self.dims))
        for i, d in enumerate(self.dims):
            out[i] = rng.integers(d.cardinality) if isinstance(d, CategoricalDim) else rng.random()
        return out

    def validate(self, params: np.ndarray) -> None:
        params = np.asarray(params)
        if params.shape != (len(self.dims),):
            raise ValueError(f"expected {len(self.dims)} dims, got shape {params.shape}")
        for i, d in enumerate(self.dims):
            v = params[i]
            if isinstance(d, CategoricalDim):
                if v != int(v) or not 0 <= v < d.cardinality:
                    raise ValueError(f"dim {i}: categorical index {v} out of range")
            elif not 0.0 <= v <= 1.0:
                raise ValueError(f"dim {i}: value {v} outside [0, 1]")


class TrialState(Enum):
    PENDING = "pending"
    COMPLETED = "completed"


@dataclass
class Trial:
    params: np.ndarray
    loss: float | None = None
    state: TrialState = TrialState.PENDING


@dataclass(frozen=True)
class TPEConfig:
    startup_trials: int = 20
    ei_candidates: int = 24
    prior_weight: float = 1.0

    def __post_init__(self):
        if self.startup_trials < 1 or self.ei_candidates < 1 or self.prior_weight <= 0:
            raise ValueError("invalid TPE configuration")


class TrialHistory:
    """Append-only trial record; suggest/observe hold the history lock."""

    def __init__(self, gamma: float = 0.25, config: TPEConfig = TPEConfig()):
        if not 0.0 < gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {gamma}")
        self.gamma = gamma
        self.config = config
        self._trials: list[Trial] = []
        self._lock = threading.Lock()

    @property
    def trials(self) -> tuple[Trial, ...]:
        with self._lock:
            return tuple(self._trials)

    def completed(self) -> list[Trial]:
        return [t for t in self.trials if t.state is TrialState.COMPLETED]

    def __len__(self) -> int:
        return len(self.trials)


def split_observations(history: TrialHistory, gamma: float | None = None):
    """Partition completed trials into (good, bad) at the loss quantile.

    good holds the ceil(gamma * n) lowest-loss trials, ties resolved by
    insertion order; pending trials are ignored.
    """
    gamma = history.gamma if gamma is None else gamma
    completed = history.completed()
    if not completed:
        raise ValueError("no completed trials to split")
    losses = np.array([t.loss for t in completed])
    n_good = math.ceil(gamma * len(completed))
    order = np.argsort(losses, kind="stable")
    good = [completed[i] for i in order[:n_good]]
    bad = [completed[i] for i in order[n_good:]]
    return good, bad


class ParzenDensity:
    """Mixture of [0, 1]-truncated Gaussians plus a uniform prior component.

    Each observed point contributes one component; its bandwidth is the
    distance to its nearer neighbor among the sorted points and the {0, 1}
    boundaries, floored at MIN_BANDWIDTH. The prior carries weight
    prior_weight / (n + prior_weight) so the density is positive everywhere.
    """

    def __init__(self, points: Sequence[float], prior_weight: float = 1.0):
        pts = np.sort(np.asarray(points, dtype=np.float64))
        if pts.size and (pts[0] < 0.0 or pts[-1] > 1.0):
            raise ValueError("points must lie in [0, 1]")
        n = len(pts)
        self.mus = pts
        if n:
            left = np.concatenate(([0.0], pts[:-1]))
            right = np.concatenate((pts[1:], [1.0]))
            self.sigmas = np.maximum(np.minimum(pts - left, right - pts), MIN_BANDWIDTH)
            # mass of each truncated component inside [0, 1]
            self._trunc_lo = ndtr((0.0 - pts) / self.sigmas)
            self._trunc_hi = ndtr((1.0 - pts) / self.sigmas)
        else:
            self.sigmas = pts
            self._trunc_lo = self._trunc_hi = pts
        self.uniform_weight = prior_weight / (n + prior_weight)
        self.component_weight = 1.0 / (n + prior_weight) if n else 0.0

    def pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("density is defined on [0, 1]")
        out = np.full(x.shape, self.uniform_weight)
        if len(self.mus):
            z = (x[..., None] - self.mus) / self.sigmas
            phi = np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * self.sigmas)
            out = out + self.component_weight * (phi / (self._trunc_hi - self._trunc_lo)).sum(
                axis=-1
            )
        return out if out.shape else float(out)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        n = len(self.mus)
        out = np.empty(size)
        for i in range(size):
            if n == 0 or rng.random() < self.uniform_weight:
                out[i] = rng.random()
            else:
                j = int(rng.integers(n))
                lo, hi = self._trunc_lo[j], self._trunc_hi[j]
                u = lo + rng.random() * (hi - lo)
                out[i] = self.mus[j] + self.sigmas[j] * ndtri(u)
        return np.clip(out, 0.0, 1.0)


def parzen_density(points: Sequence[float], x, prior_weight: float = 1.0):
    """Density of the truncated-Gaussian-plus-prior mixture at x (scalar or array)."""
    return ParzenDensity(points, prior_weight).pdf(x)


def categorical_density(counts, prior_weight: float = 1.0) -> np.ndarray:
    """Smoothed category probabilities: (counts + w/k) / (n + w)."""
    counts = np.asarray(counts, dtype=np.float64)
    k = len(counts)
    n = counts.sum()
    return (counts + prior_weight / k) / (n + prior_weight)


class _DimModel:
    """Good/bad densities for one dimension."""

    def __init__(self, dim, good_vals, bad_vals, prior_weight):
        self.dim = dim
        if isinstance(dim, CategoricalDim):
            self.good = categorical_density(
                np.bincount(good_vals.astype(int), minlength=dim.cardinality), prior_weight
            )
            self.bad = categorical_density(
                np.bincount(bad_vals.astype(int), minlength=dim.cardinality), prior_weight
            )
        else:
            self.good = ParzenDensity(good_vals, prior_weight)
            self.bad = ParzenDensity(bad_vals, prior_weight)

    def sample_good(self, rng, size):
        if isinstance(self.dim, CategoricalDim):
            return rng.choice(self.dim.cardinality, size=size, p=self.good).astype(np.float64)
        return self.good.sample(rng, size)

    def log_ratio(self, values):
        if isinstance(self.dim, CategoricalDim):
            idx = values.astype(int)
            return np.log(self.good[idx]) - np.log(self.bad[idx])
        return np.log(self.good.pdf(values)) - np.log(self.bad.pdf(values))


def _guided_candidates(history: TrialHistory, space: SearchSpace, rng: np.random.Generator):
    """Sample EI candidates from the good density and score them by log(l/g).

    Factored out so tests can replay the draw with a copied generator state.
    """
    cfg = history.config
    good, bad = split_observations(history)
    good_mat = np.stack([t.params for t in good])
    bad_mat = (
        np.stack([t.params for t in bad]) if bad else np.empty((0, len(space)))
    )
    cands = np.empty((cfg.ei_candidates, len(space)))
    models = []
    for d in range(len(space)):
        model = _DimModel(
            space.dims[d], good_mat[:, d], bad_mat[:, d] if len(bad_mat) else bad_mat.reshape(0),
            cfg.prior_weight,
        )
        models.append(model)
        cands[:, d] = model.sample_good(rng, cfg.ei_candidates)
    scores = np.zeros(cfg.ei_candidates)
    for d, model in enumerate(models):
        scores += model.log_ratio(cands[:, d])
    return cands, scores


def suggest(history: TrialHistory, space: SearchSpace, rng: np.random.Generator) -> np.ndarray:
    """Propose the next point and record it as a pending trial.

    Uniform until startup_trials observations exist; afterwards the best of
    ei_candidates draws from the good density, ranked by the density ratio.
    """
    with history._lock:
        n_completed = sum(1 for t in history._trials if t.state is TrialState.COMPLETED)
        if n_completed < history.config.startup_trials:
            params = space.sample_uniform(rng)
        else:
            cands, scores = _guided_candidates_locked(history, space, rng)
            params = cands[int(np.argmax(scores))]
        space.validate(params)
        history._trials.append(Trial(params=params.copy(), state=TrialState.PENDING))
        return params


def _guided_candidates_locked(history, space, rng):
    # split_observations re-acquires the lock via .trials; build from the raw list
    completed = [t for t in history._trials if t.state is TrialState.COMPLETED]
    snapshot = TrialHistory(history.gamma, history.config)
    snapshot._trials = completed
    return _guided_candidates(snapshot, space, rng)


def observe(history: TrialHistory, params: np.ndarray, loss: float) -> TrialHistory:
    """Record a completed evaluation; NaN/Inf losses are rejected.

    Completes the oldest pending trial with matching params, or appends a new
    completed trial when none is pending (external observations are allowed).
    """
    params = np.asarray(params, dtype=np.float64)
    if not math.isfinite(loss):
        raise ValueError(f"loss must be finite, got {loss}")
    with history._lock:
        for t in history._trials:
            if t.state is TrialState.PENDING and np.array_equal(t.params, params):
                t.loss = float(loss)
                t.state = TrialState.COMPLETED
                return history
        history._trials.append(
            Trial(params=params.copy(), loss=float(loss), state=TrialState.COMPLETED)
        )
        return history
