"""
Coalescent genealogies under piecewise-constant population size.

Waiting times are drawn by inverting the cumulative coalescent intensity
``Lambda(t) = int_0^t 1/Ne`` exactly, piece by piece. Sampling events inject
lineages at fixed times; the process is memoryless, so a pending waiting time
is simply redrawn after each sampling event.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .coalescent import Grid
from .treeio import CovariateTable, TimeTree, standardize_rows


@dataclass(frozen=True)
class SimSpec:
    sampling_times: np.ndarray  # distinct times, youngest must be 0
    sampling_counts: np.ndarray  # tips sampled at each time
    grid_points: np.ndarray  # g_1 .. g_{M-1}
    log_ne: np.ndarray  # theta, one level per interval
    seed: int | None = None

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.sampling_times, dtype=float))
        counts = np.atleast_1d(np.asarray(self.sampling_counts, dtype=np.int64))
        pts = np.atleast_1d(np.asarray(self.grid_points, dtype=float))
        levels = np.atleast_1d(np.asarray(self.log_ne, dtype=float))
        if times.shape != counts.shape:
            raise ValueError("sampling_times and sampling_counts differ in length")
        if np.any(counts < 0) or counts.sum() < 2:
            raise ValueError("need at least two sampled tips")
        if np.any(times < 0) or not np.all(np.isfinite(times)):
            raise ValueError("sampling times must be finite and non-negative")
        if times[counts > 0].min() != 0:
            raise ValueError("the youngest sampling time must be 0")
        if levels.size != pts.size + 1:
            raise ValueError("need one log-Ne level per grid interval")
        if not np.all(np.isfinite(levels)):
            raise ValueError("log-Ne levels must be finite")
        if pts.size and (pts[0] <= 0 or np.any(np.diff(pts) <= 0)):
            raise ValueError("grid points must be positive and increasing")
        order = np.argsort(times, kind="stable")
        object.__setattr__(self, "sampling_times", times[order])
        object.__setattr__(self, "sampling_counts", counts[order])
        object.__setattr__(self, "grid_points", pts)
        object.__setattr__(self, "log_ne", levels)

    @property
    def n_tips(self) -> int:
        return int(self.sampling_counts.sum())

    @classmethod
    def isochronous(cls, n, grid_points=(), log_ne=(0.0,), seed=None):
        return cls(np.array([0.0]), np.array([n]), np.asarray(grid_points), np.asarray(log_ne), seed)

    @classmethod
    def constant(cls, n, ne=1.0, seed=None):
        return cls.isochronous(n, (), (math.log(ne),), seed)


class CumulativeIntensity:
    """``Lambda(t) = int_0^t 1/Ne(s) ds`` for piecewise-constant Ne, and its inverse."""

    def __init__(self, grid_points, log_ne):
        self.bounds = [0.0] + [float(x) for x in grid_points]
        self.rates = [math.exp(-float(v)) for v in log_ne]
        cum = [0.0]
        for k in range(1, len(self.bounds)):
            cum.append(cum[-1] + (self.bounds[k] - self.bounds[k - 1]) * self.rates[k - 1])
        self.cum = cum

    def __call__(self, t):
        k = bisect.bisect_right(self.bounds, t) - 1
        return self.cum[k] + (t - self.bounds[k]) * self.rates[k]

    def inverse(self, x):
        k = bisect.bisect_right(self.cum, x) - 1
        return self.bounds[k] + (x - self.cum[k]) / self.rates[k]


def simulate_tree(spec: SimSpec, rng=None, validate=True) -> TimeTree:
    """Simulate one genealogy; ``rng`` defaults to a generator seeded from ``spec.seed``."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    n = spec.n_tips
    lam = CumulativeIntensity(spec.grid_points, spec.log_ne)
    times = [float(t) for t in spec.sampling_times]
    counts = [int(c) for c in spec.sampling_counts]

    heights = np.empty(2 * n - 1)
    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    children = np.full((2 * n - 1, 2), -1, dtype=np.int64)
    labels = []
    active = []
    next_tip = 0
    next_internal = n
    s = 0  # next sampling batch
    t = 0.0

    while True:
        while s < len(times) and times[s] <= t:
            for _ in range(counts[s]):
                heights[next_tip] = times[s]
                labels.append(f"t{next_tip + 1}")
                active.append(next_tip)
                next_tip += 1
            s += 1
        k = len(active)
        t_next_sample = times[s] if s < len(times) else math.inf
        if k < 2:
            if s >= len(times):
                break
            t = t_next_sample
            continue
        pairs = 0.5 * k * (k - 1)
        t_coal = lam.inverse(lam(t) + rng.standard_exponential() / pairs)
        if t_coal >= t_next_sample:
            t = t_next_sample
            continue
        i = int(rng.integers(k))
        j = int(rng.integers(k - 1))
        if j >= i:
            j += 1
        a, b = active[i], active[j]
        node = next_internal
        next_internal += 1
        heights[node] = t_coal
        children[node] = (a, b)
        parent[a] = parent[b] = node
        for idx in sorted((i, j), reverse=True):
            active.pop(idx)
        active.append(node)
        t = t_coal

    tree = TimeTree(parent, children, heights, tuple(labels))
    return tree.validate() if validate else tree


def tmrca_samples(spec: SimSpec, replicates: int, rng) -> np.ndarray:
    return np.array([simulate_tree(spec, rng, validate=False).root_height for _ in range(replicates)])


# --------------------------------------------------------------------------
# Scenarios
# --------------------------------------------------------------------------

LINEAR_DEFAULT = {"a": 1.0, "b": 0.8}
CONCAVE_DEFAULT = {"a": 1.5, "b": 0.6, "c": -0.6}


def response(kind, z, coefs):
    """True log-Ne levels: linear or concave quadratic in ``z``, or a user table."""
    z = np.asarray(z, dtype=float)
    if kind == "linear":
        return coefs["a"] + coefs["b"] * z
    if kind == "concave":
        if not coefs["c"] < 0:
            raise ValueError("concave scenario needs c < 0")
        return coefs["a"] + coefs["b"] * z + coefs["c"] * z * z
    if kind == "table":
        levels = np.asarray(coefs["levels"], dtype=float)
        if levels.shape != z.shape:
            raise ValueError("need one log-Ne level per covariate value")
        return levels
    raise ValueError(f"unknown scenario kind {kind!r}")


def synthetic_covariate(n_intervals, seed=0):
    """
    A standardized seasonal series with drift and noise, standing in for an
    observed temperature record (most recent interval first).
    """
    rng = np.random.default_rng(seed)
    k = np.arange(n_intervals)
    raw = np.sin(2 * np.pi * k / 7.3) + 0.04 * k + 0.35 * rng.standard_normal(n_intervals)
    values, _, _ = standardize_rows(raw[None, :], np.zeros((1, n_intervals), bool))
    return values[0]


@dataclass(frozen=True)
class Scenario:
    kind: str
    tree: TimeTree
    covariates: CovariateTable
    truth: np.ndarray
    grid: Grid
    coefs: dict
    sampling_times: np.ndarray
    sampling_counts: np.ndarray


def make_scenario(
    kind,
    covariate=None,
    taxa=200,
    seed=0,
    cutoff=None,
    coefs=None,
    sampling_span=0.8,
    sampling_batches=20,
    isochronous=True,
    n_intervals=24,
):
    """
    Build a synthetic dataset with ``theta_k = f(z_k)``. The grid has one
    interval per covariate value and ``cutoff`` defaults to
    ``n_intervals * 0.5``. Tips are spread over ``sampling_batches`` equally
    spaced times in ``[0, sampling_span * cutoff]`` unless ``isochronous``.
    """
    if covariate is None:
        covariate = synthetic_covariate(n_intervals, seed)
    z = np.asarray(covariate, dtype=float)
    M = z.size
    if coefs is None:
        coefs = dict(LINEAR_DEFAULT if kind == "linear" else CONCAVE_DEFAULT)
    truth = response(kind, z, coefs)
    if cutoff is None:
        cutoff = 0.5 * M
    grid = Grid(np.arange(1, M) * (cutoff / (M - 1)))
    if isochronous:
        times = np.array([0.0])
        counts = np.array([taxa])
    else:
        times = np.linspace(0.0, sampling_span * cutoff, sampling_batches)
        counts = np.full(sampling_batches, taxa // sampling_batches)
        counts[: taxa - counts.sum()] += 1
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    spec = SimSpec(times, counts, grid.points, truth)
    tree = simulate_tree(spec, rng)
    table = CovariateTable(
        ("covariate",), z[None, :].copy(), np.zeros((1, M), bool), np.zeros(1), np.ones(1)
    )
    return Scenario(kind, tree, table, truth, grid, coefs, times, counts)
