"""
Posterior summaries of sampler traces: HPD intervals, effective sample sizes,
Gelman-Rubin diagnostics, the covariate-response curve and its flattening
points.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIN_ROWS = 100


class SummaryError(ValueError):
    pass


# --------------------------------------------------------------------------
# Scalar diagnostics
# --------------------------------------------------------------------------


def hpd_interval(samples, mass: float = 0.95):
    """Shortest interval holding ``ceil(mass * n)`` of the sorted samples."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise SummaryError("no samples")
    if not 0 < mass <= 1:
        raise ValueError("mass must lie in (0, 1]")
    k = max(1, int(math.ceil(mass * n - 1e-9)))
    widths = x[k - 1 :] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def autocovariance(x) -> np.ndarray:
    """Biased autocovariance at all lags, via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    d = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def ess(x) -> float:
    """
    Effective sample size with Geyer's initial monotone sequence estimator.
    A constant chain returns its length.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    acov = autocovariance(x)
    if not acov[0] > 1e-300 * max(1.0, float(np.max(np.abs(x))) ** 2):
        return float(n)
    rho = acov / acov[0]
    n_pairs = n // 2
    gamma = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    # initial positive sequence, then enforce monotone decrease
    stop = np.flatnonzero(gamma <= 0)
    gamma = gamma[: stop[0]] if stop.size else gamma
    gamma = np.minimum.accumulate(gamma)
    tau = -1.0 + 2.0 * float(gamma.sum())
    return float(n / max(tau, 1.0 / np.log10(max(n, 10))))


def rhat(chains) -> float:
    """Gelman-Rubin potential scale reduction over equal-length chains (rows)."""
    c = np.asarray(chains, dtype=float)
    if c.ndim != 2 or c.shape[0] < 2:
        return math.nan
    n = c.shape[1]
    means = c.mean(axis=1)
    W = float(c.var(axis=1, ddof=1).mean())
    B = n * float(means.var(ddof=1))
    if W == 0:
        return 1.0 if B == 0 else math.inf
    var = (n - 1) / n * W + B / n
    return math.sqrt(var / W)


# --------------------------------------------------------------------------
# Flattening points
# --------------------------------------------------------------------------


def _check_curve(z, curve):
    z = np.asarray(z, dtype=float)
    curve = np.asarray(curve, dtype=float)
    if z.shape != curve.shape or z.ndim != 1:
        raise ValueError("covariate values and curve must be 1-d and the same length")
    if z.size < 3:
        raise ValueError("need at least 3 curve points")
    if np.any(np.diff(z) <= 0):
        raise ValueError("covariate values must be strictly increasing")
    return z, curve


def flat_regions(z, curve, threshold: float = 0.05):
    """
    Covariate ranges where the finite-difference derivative of ``curve``
    has magnitude below ``threshold``. Interior boundaries are placed where
    the derivative magnitude crosses the threshold, by linear interpolation
    between neighbouring points.
    """
    z, curve = _check_curve(z, curve)
    excess = np.abs(np.gradient(curve, z)) - threshold
    flat = excess < 0
    regions = []
    k = 0
    n = z.size
    while k < n:
        if not flat[k]:
            k += 1
            continue
        j = k
        while j + 1 < n and flat[j + 1]:
            j += 1
        lo = z[0] if k == 0 else _crossing(z, excess, k - 1, k)
        hi = z[-1] if j == n - 1 else _crossing(z, excess, j, j + 1)
        regions.append((float(lo), float(hi)))
        k = j + 1
    return regions


def _crossing(z, excess, a, b):
    ea, eb = excess[a], excess[b]
    return z[a] + (z[b] - z[a]) * ea / (ea - eb)


def flattening_points(z, curve, threshold: float = 0.05):
    """Boundaries of every flat region of the curve, in increasing order."""
    out = []
    for lo, hi in flat_regions(z, curve, threshold):
        out.extend([lo, hi] if hi > lo else [lo])
    return out


# --------------------------------------------------------------------------
# Trace files
# --------------------------------------------------------------------------


@dataclass
class Trace:
    columns: list
    values: np.ndarray  # rows x columns

    def column(self, name):
        return self.values[:, self.columns.index(name)]

    def matching(self, prefix):
        idx = [i for i, c in enumerate(self.columns) if c.startswith(prefix)]
        return [self.columns[i] for i in idx], self.values[:, idx]


def read_trace(path) -> Trace:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise SummaryError(f"{path}: empty trace file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SummaryError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append([float(v) for v in row])
    values = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return Trace(header, values)


def discard_burn_in(trace: Trace, burn_in: float) -> Trace:
    if not 0 <= burn_in < 1:
        raise ValueError("burn-in fraction must lie in [0, 1)")
    start = int(math.floor(burn_in * trace.values.shape[0]))
    return Trace(trace.columns, trace.values[start:])


def read_run_grid(path):
    """
    Read ``covariates_used.csv`` as written by a run: interval bounds and the
    (standardized) covariate values, blank where missing. Returns
    ``(starts, ends, names, values)`` with ``values`` of shape (P, M).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    names = header[3:]
    starts = np.array([float(r[1]) for r in rows])
    ends = np.array([float(r[2]) if r[2] else math.inf for r in rows])
    values = np.array(
        [[float(v) if v else math.nan for v in r[3:]] for r in rows], dtype=float
    ).T.reshape(len(names), len(rows))
    return starts, ends, names, values


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v))


def _stats(x, mass):
    lo, hi = hpd_interval(x, mass)
    return float(np.median(x)), lo, hi


def summarize(trace_paths, grid_path, out_dir, burn_in=0.1, threshold=0.05, mass=0.95):
    """
    Summarize one or more chain traces (pooled after burn-in removal) and
    write ``ne_vs_time.csv``, ``logne_vs_covariate.csv``,
    ``hyperparams.csv`` and ``flattening.csv`` into ``out_dir``. Returns a
    dict with the Gelman-Rubin statistics and the flattening points.
    """
    if isinstance(trace_paths, (str, Path)):
        trace_paths = [trace_paths]
    traces = [discard_burn_in(read_trace(p), burn_in) for p in trace_paths]
    columns = traces[0].columns
    for p, t in zip(trace_paths, traces):
        if t.columns != columns:
            raise SummaryError(f"{p}: trace columns differ from {trace_paths[0]}")
        if t.values.shape[0] < MIN_ROWS:
            raise SummaryError(
                f"{p}: {t.values.shape[0]} rows after burn-in, need at least {MIN_ROWS}"
            )
    pooled = Trace(columns, np.vstack([t.values for t in traces]))
    starts, ends, names, zvals = read_run_grid(grid_path)
    M = starts.size
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    theta = np.column_stack([pooled.column(f"theta_{k + 1}") for k in range(M)])
    g = np.column_stack([pooled.column(f"g_{k + 1}") for k in range(M)])
    n_len = min(t.values.shape[0] for t in traces)

    def r_hat(name):
        if len(traces) < 2:
            return math.nan
        return rhat([t.column(name)[:n_len] for t in traces])

    rows = []
    for k in range(M):
        med, lo, hi = _stats(theta[:, k], mass)
        rows.append(
            [k + 1, _fmt(starts[k]), "inf" if math.isinf(ends[k]) else _fmt(ends[k])]
            + [_fmt(v) for v in (med, lo, hi, math.exp(med), math.exp(lo), math.exp(hi))]
            + [_fmt(ess(theta[:, k])), _fmt(r_hat(f"theta_{k + 1}"))]
        )
    _write_csv(
        out / "ne_vs_time.csv",
        ["interval", "start", "end", "logne_median", "logne_hpd_lower", "logne_hpd_upper",
         "ne_median", "ne_hpd_lower", "ne_hpd_upper", "ess", "rhat"],
        rows,
    )

    curve_rows, flat_rows, flats = [], [], {}
    for p, name in enumerate(names):
        z = zvals[p].copy()
        miss = np.flatnonzero(np.isnan(z))
        for k in miss:
            z[k] = float(np.median(pooled.column(f"z_{name}_{k + 1}")))
        order = np.argsort(z, kind="stable")
        g_med = np.median(g, axis=0)
        for k in order:
            gm, glo, ghi = _stats(g[:, k], mass)
            tm, tlo, thi = _stats(theta[:, k], mass)
            curve_rows.append(
                [name, _fmt(z[k]), k + 1, int(k in miss)]
                + [_fmt(v) for v in (gm, glo, ghi, tm, tlo, thi)]
            )
        zs, curve = z[order], g_med[order]
        if np.all(np.diff(zs) > 0):
            pts = flattening_points(zs, curve, threshold)
            for lo, hi in flat_regions(zs, curve, threshold):
                flat_rows.append([name, _fmt(lo), _fmt(hi), _fmt(threshold)])
        else:
            pts = []
            flat_rows.append([name, "", "", _fmt(threshold)])
        flats[name] = pts
    _write_csv(
        out / "logne_vs_covariate.csv",
        ["covariate", "value", "interval", "imputed", "g_median", "g_pointwise_hpd_lower",
         "g_pointwise_hpd_upper", "logne_median", "logne_pointwise_hpd_lower",
         "logne_pointwise_hpd_upper"],
        curve_rows,
    )
    _write_csv(out / "flattening.csv", ["covariate", "flat_from", "flat_to", "threshold"], flat_rows)

    hyper_names = ["tau"] + [c for c in columns if c.startswith(("sigma2_", "lengthscale_"))]
    rows, rhats = [], {}
    for name in hyper_names:
        x = pooled.column(name)
        med, lo, hi = _stats(x, mass)
        rhats[name] = r_hat(name)
        rows.append([name] + [_fmt(v) for v in (med, lo, hi, float(np.mean(x)), ess(x), rhats[name])])
    for name in ("accepted", "divergent"):
        rows.append([f"{name}_rate", _fmt(np.mean(pooled.column(name))), "", "", "", "", ""])
    _write_csv(
        out / "hyperparams.csv",
        ["parameter", "median", "hpd_lower", "hpd_upper", "mean", "ess", "rhat"],
        rows,
    )
    all_rhat = [r_hat(f"theta_{k + 1}") for k in range(M)] + list(rhats.values())
    finite = [r for r in all_rhat if math.isfinite(r)]
    return {
        "rows": pooled.values.shape[0],
        "max_rhat": max(finite) if finite else math.nan,
        "flattening": flats,
    }
