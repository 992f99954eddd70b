"""
Piecewise-constant coalescent likelihood on a fixed time grid.

The grid has points ``0 = g_0 < g_1 < ... < g_{M-1}``; interval ``k`` covers
``(g_{k-1}, g_k]`` and the last interval runs from ``g_{M-1}`` up to the root of
each tree. With log population sizes ``theta`` the log-likelihood of one tree
is ``sum_k -m_k theta_k - exp(-theta_k) w_k`` where ``m_k`` counts coalescent
events in interval ``k`` and ``w_k`` is the lineage-pair weighted time spent in
it. Both are computed once per tree, so every evaluation afterwards is O(M).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .treeio import TimeTree

SAMPLING = 0
COALESCENT = 1


class LedgerError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    points: np.ndarray  # g_1 .. g_{M-1}

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).ravel()
        if pts.size < 1:
            raise ValueError("a grid needs at least one point (two intervals)")
        if np.any(~np.isfinite(pts)) or pts[0] <= 0 or np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be positive and strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def n_intervals(self) -> int:
        return self.points.size + 1

    def interval_of(self, times) -> np.ndarray:
        """0-based interval index of each time; intervals are right-closed."""
        return np.searchsorted(self.points, np.asarray(times, dtype=float), side="left")


def build_grid(cutoff: float, intervals: int) -> Grid:
    """Equally spaced grid with ``intervals - 1`` points ending at ``cutoff``."""
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    if intervals < 2:
        raise ValueError("need at least two intervals")
    k = np.arange(1, intervals)
    return Grid(k * (cutoff / (intervals - 1)))


def choose2(n):
    return n * (n - 1) / 2.0


@dataclass(frozen=True)
class IntervalLedger:
    """Per-interval event bookkeeping for one tree.

    ``event_*`` arrays list every sampling and coalescent event in processing
    order; ``event_lineages`` is the lineage count immediately before the event.
    """

    grid: Grid
    event_times: np.ndarray
    event_kinds: np.ndarray
    event_nodes: np.ndarray
    event_lineages: np.ndarray
    event_interval: np.ndarray
    m: np.ndarray  # coalescent events per interval
    s: np.ndarray  # sampling events per interval
    w: np.ndarray  # sum_j C(n_kj, 2) (t_kj - t_k,j-1)
    log_binomials: np.ndarray  # sum over coalescent events of log C(n, 2)
    n_tips: int

    @property
    def n_intervals(self) -> int:
        return self.m.size

    def interval_events(self, k: int):
        """Events of 0-based interval ``k`` as ``(time, kind, lineages_before)``."""
        sel = np.flatnonzero(self.event_interval == k)
        kinds = {SAMPLING: "sampling", COALESCENT: "coalescent"}
        return [
            (float(self.event_times[i]), kinds[int(self.event_kinds[i])], int(self.event_lineages[i]))
            for i in sel
        ]


def _sorted_events(tree: TimeTree):
    n = tree.n_tips
    nodes = np.arange(tree.n_nodes)
    kinds = np.where(nodes < n, SAMPLING, COALESCENT)
    times = tree.heights
    # sampling before coalescent at equal times, then by node id
    order = np.lexsort((nodes, kinds, times))
    return times[order], kinds[order], nodes[order]


def extract_ledger(tree: TimeTree, grid: Grid) -> IntervalLedger:
    if not tree.root_height > 0:
        raise LedgerError("degenerate tree: root height is 0")
    times, kinds, nodes = _sorted_events(tree)
    intervals = grid.interval_of(times)
    M = grid.n_intervals
    bounds = np.append(grid.points, np.inf)

    m = np.zeros(M, dtype=np.int64)
    s = np.zeros(M, dtype=np.int64)
    w = np.zeros(M)
    logb = np.zeros(M)
    lineages = np.empty(times.size, dtype=np.int64)

    lin = 0
    prev = 0.0
    k = 0
    for i in range(times.size):
        t = float(times[i])
        target = int(intervals[i])
        while k < target:
            w[k] += choose2(lin) * (bounds[k] - prev)
            prev = float(bounds[k])
            k += 1
        w[k] += choose2(lin) * (t - prev)
        prev = t
        lineages[i] = lin
        if kinds[i] == SAMPLING:
            s[k] += 1
            lin += 1
        else:
            if lin < 2:
                raise LedgerError(
                    f"corrupt tree: coalescence at t={t:g} with {lin} lineage(s)"
                )
            m[k] += 1
            logb[k] += math.log(choose2(lin))
            lin -= 1
    if lin != 1:
        raise LedgerError(f"corrupt tree: {lin} lineages remain after the root")

    return IntervalLedger(
        grid=grid,
        event_times=times.copy(),
        event_kinds=kinds,
        event_nodes=nodes,
        event_lineages=lineages,
        event_interval=intervals,
        m=m,
        s=s,
        w=w,
        log_binomials=logb,
        n_tips=tree.n_tips,
    )


@dataclass(frozen=True)
class CoalescentData:
    """One or more conditionally independent loci sharing a grid."""

    ledgers: tuple
    grid: Grid
    m: np.ndarray
    w: np.ndarray

    @classmethod
    def from_ledgers(cls, ledgers):
        ledgers = tuple(ledgers)
        if not ledgers:
            raise ValueError("need at least one ledger")
        grid = ledgers[0].grid
        for led in ledgers[1:]:
            if led.grid.n_intervals != grid.n_intervals or not np.array_equal(
                led.grid.points, grid.points
            ):
                raise ValueError("all loci must share the same grid")
        m = np.sum([led.m for led in ledgers], axis=0).astype(float)
        w = np.sum([led.w for led in ledgers], axis=0)
        return cls(ledgers, grid, m, w)

    @classmethod
    def from_trees(cls, trees, grid: Grid):
        return cls.from_ledgers(extract_ledger(t, grid) for t in trees)

    @property
    def n_loci(self) -> int:
        return len(self.ledgers)

    @property
    def n_intervals(self) -> int:
        return self.grid.n_intervals


def _check_theta(data, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.n_intervals,):
        raise ValueError(
            f"theta has shape {theta.shape}, expected ({data.n_intervals},)"
        )
    return theta


def log_likelihood(data: CoalescentData, theta) -> float:
    """Coalescent log-likelihood without theta-free constants."""
    theta = _check_theta(data, theta)
    return float(-np.dot(data.m, theta) - np.dot(np.exp(-theta), data.w))


def grad_log_likelihood(data: CoalescentData, theta) -> np.ndarray:
    theta = _check_theta(data, theta)
    return -data.m + np.exp(-theta) * data.w


def hess_diag_log_likelihood(data: CoalescentData, theta) -> np.ndarray:
    """Diagonal of the (diagonal) Hessian; never positive."""
    theta = _check_theta(data, theta)
    return -np.exp(-theta) * data.w


def log_binomial_product(data: CoalescentData) -> float:
    """log of the product of C(n, 2) over all coalescent events."""
    return float(sum(led.log_binomials.sum() for led in data.ledgers))


def log_tree_normalizer(data: CoalescentData) -> float:
    """
    log of the number of labeled histories compatible with the ordered event
    times. It equals :func:`log_binomial_product`; the full labeled-tree
    log-density is ``log_likelihood + log_binomial_product - log_tree_normalizer``.
    """
    total = 0.0
    for led in data.ledgers:
        coal = led.event_kinds == COALESCENT
        total += float(np.sum(np.log(choose2(led.event_lineages[coal].astype(float)))))
    return total


def piecewise_ne(grid: Grid, theta):
    """Callable ``t -> exp(theta_k)`` for ``t`` in interval ``k``."""
    levels = np.exp(np.asarray(theta, dtype=float))

    def ne(t):
        return float(levels[int(np.searchsorted(grid.points, t, side="left"))])

    return ne


def oracle_log_density(tree: TimeTree, ne, breakpoints=(), epsrel=1e-13) -> float:
    """
    Joint log-density of the coalescent times for a general ``Ne(t)``, using
    adaptive quadrature of ``1/Ne`` between consecutive events. Discontinuities
    of ``ne`` should be listed in ``breakpoints``. Intended as a test oracle
    for small trees.
    """
    heights = np.asarray(tree.heights, dtype=float)
    n = tree.n_tips
    ids = np.arange(heights.size)
    order = sorted(ids, key=lambda i: (heights[i], 0 if i < n else 1, i))
    bps = np.asarray(sorted(breakpoints), dtype=float)

    def hazard_integral(a, b):
        if b <= a:
            return 0.0
        inner = [float(x) for x in bps if a < x < b]
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(
                    lambda x: 1.0 / ne(x),
                    a,
                    b,
                    points=inner or None,
                    epsabs=0.0,
                    epsrel=epsrel,
                    limit=500,
                )
            except integrate.IntegrationWarning as exc:
                raise RuntimeError(f"quadrature did not converge on ({a}, {b}): {exc}") from None
        return val

    logp = 0.0
    lin = 0
    prev = 0.0
    for i in order:
        t = float(heights[i])
        if lin >= 2:
            logp -= choose2(lin) * hazard_integral(prev, t)
        prev = t
        if i < n:
            lin += 1
        else:
            logp += math.log(choose2(lin)) - math.log(ne(t))
            lin -= 1
    return logp
