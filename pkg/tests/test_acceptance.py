"""
Acceptance suite. One test per criterion; each prints a single
``criterion N: PASS|FAIL`` line, and the lines are repeated in the pytest
terminal summary. Run on its own with ``pytest tests/test_acceptance.py -v``.
"""
import csv
import math
import os
import time

import numpy as np
import pytest
from scipy import stats

from fdcheck import central_difference
from test_coalescent import random_case
from test_prior import small_posterior, random_state, table

from gpskygrid import cli, coalescent, hmc, prior, simulate, summary, treeio

RESULTS = []


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    RESULTS.append(line)
    assert ok, line


def best_time(f, repeats=5):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        f()
        best = min(best, time.perf_counter() - t0)
    return best


# --------------------------------------------------------------------------
# 1-3: likelihood, derivatives, linear-time structure
# --------------------------------------------------------------------------


def test_likelihood_oracle():
    rng = np.random.default_rng(2001)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        tree, grid, theta = random_case(rng, max_tips=8, max_intervals=4)
        data = coalescent.CoalescentData.from_trees([tree], grid)
        analytic = coalescent.log_likelihood(data, theta) + coalescent.log_binomial_product(data)
        oracle = coalescent.oracle_log_density(tree, coalescent.piecewise_ne(grid, theta), grid.points)
        worst = max(worst, abs(analytic - oracle))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-8 and elapsed < 60, f"max |analytic - quadrature| = {worst:.2e} over 200 trees, {elapsed:.1f}s")


def test_derivatives():
    rng = np.random.default_rng(2002)
    t0 = time.perf_counter()
    bad = []

    def close(fd, exact, rel):
        return abs(fd - exact) <= rel * max(1.0, abs(exact))

    for _ in range(100):
        tree, grid, theta = random_case(rng)
        data = coalescent.CoalescentData.from_trees([tree], grid)
        g = coalescent.grad_log_likelihood(data, theta)
        H = coalescent.hess_diag_log_likelihood(data, theta)
        for k in range(theta.size):
            fd1 = central_difference(lambda x: coalescent.log_likelihood(data, x), theta, k)
            fd2 = central_difference(lambda x: coalescent.grad_log_likelihood(data, x)[k], theta, k)
            if not close(fd1, g[k], 1e-6):
                bad.append(("likelihood gradient", k))
            if not close(fd2, H[k], 1e-5):
                bad.append(("likelihood Hessian", k))

    for _ in range(100):
        M = int(rng.integers(2, 30))
        tau = float(np.exp(rng.uniform(-3, 4)))
        x = rng.normal(size=M)
        g = prior.gmrf_grad(x, tau)
        for k in range(M):
            fd = central_difference(lambda y: prior.gmrf_log_density(y, tau), x, k)
            if not close(fd, g[k], 1e-6):
                bad.append(("GMRF gradient", k))

    cov = table([[0.3, -1.0, 0.5, 1.4, np.nan, np.nan], [1.0, 0.2, -0.3, -1.1, 0.4, np.nan]])
    post = small_posterior(whiten=True, covariates=cov, level_sd=1.0)
    for _ in range(100):
        q, h, z = random_state(post, rng)
        grad = prior.grad_joint(post, q, h, z)
        for k in range(post.dim):
            fd = central_difference(lambda x: prior.joint_log_posterior(post, x, h, z), q, k)
            if not close(fd, grad[k], 1e-6):
                bad.append(("joint gradient", k))
    elapsed = time.perf_counter() - t0
    report(2, not bad and elapsed < 60, f"{len(bad)} mismatches over 4 x 100 states, {elapsed:.1f}s")


def test_linear_time_structure():
    rng = np.random.default_rng(2003)
    worst = 0.0
    for M in range(2, 51):
        tau = float(np.exp(rng.uniform(-2, 3)))
        x = rng.normal(size=M)
        Q = 2 * np.eye(M) - np.eye(M, k=1) - np.eye(M, k=-1)
        Q[0, 0] = Q[-1, -1] = 1.0
        dense_val = 0.5 * (M - 1) * math.log(tau) - 0.5 * tau * x @ Q @ x
        worst = max(worst, abs(prior.gmrf_log_density(x, tau) - dense_val) / max(1.0, abs(dense_val)))
        worst = max(worst, np.max(np.abs(prior.gmrf_grad(x, tau) + tau * Q @ x)))
        curv = rng.uniform(0.0, 3.0, M)
        diag, off = prior.gmrf_bands(M, tau)
        A = np.diag(diag + curv) + np.diag(off, 1) + np.diag(off, -1)
        b = rng.normal(size=M)
        want = np.linalg.solve(A, b)
        for got in (hmc.tridiag_solve(diag + curv, off, b), hmc.TridiagonalCholesky(diag + curv, off).solve(b)):
            worst = max(worst, np.max(np.abs(got - want)) / max(1.0, np.max(np.abs(want))))

    def timings(M):
        x = rng.normal(size=M)
        diag, off = prior.gmrf_bands(M, 2.0)
        d = diag + 1.0
        return np.array([
            best_time(lambda: prior.gmrf_log_density(x, 2.0)),
            best_time(lambda: prior.gmrf_grad(x, 2.0)),
            best_time(lambda: hmc.tridiag_solve(d, off, x)),
        ])

    ratios = timings(100_000) / timings(10_000)
    ok = worst < 1e-10 and np.all(ratios < 15)
    report(3, ok, f"max dense error {worst:.1e}; 1e4->1e5 time ratios (density, gradient, solve) "
                  f"{', '.join(f'{r:.1f}' for r in ratios)}")


# --------------------------------------------------------------------------
# 4: sampler calibration
# --------------------------------------------------------------------------


def gaussian(A):
    def vg(q):
        g = -A @ q
        return 0.5 * float(q @ g), g
    return vg


def test_sampler_calibration():
    rng = np.random.default_rng(2004)
    M = 20
    off = -rng.uniform(0.2, 0.9, M - 1)
    diag = np.abs(np.r_[off, 0.0]) + np.abs(np.r_[0.0, off]) + rng.uniform(0.3, 2.0, M)
    A = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    cov = np.linalg.inv(A)
    vg = gaussian(A)
    details, ok = [], True
    for mode in ("identity", "diagonal", "tridiagonal"):
        mass = hmc.mass_from_bands(mode, M, diag, off)
        q = rng.normal(size=M)
        logp, g = vg(q)
        draws = np.empty((6000, M))
        for i in range(draws.shape[0]):
            n = int(rng.integers(8, 13))
            tr = hmc.hmc_transition(rng, q, logp, g, vg, 0.2, n, mass)
            q, logp, g = tr.q, tr.logp, tr.grad
            draws[i] = q
        draws = draws[500:]
        worst = 0.0
        for k in range(M):
            for f, target in ((draws[:, k], 0.0), (draws[:, k] ** 2, cov[k, k])):
                mcse = f.std() / math.sqrt(summary.ess(f))
                worst = max(worst, abs(f.mean() - target) / mcse)
        ok &= worst < 4
        details.append(f"{mode} {worst:.2f} MCSE")

        q0, p0 = rng.normal(size=M), mass.sample_momentum(rng)
        l0, g0 = vg(q0)
        q1, p1, _, g1, _ = hmc.leapfrog(q0, p0, g0, vg, 0.1, 100, mass)
        q2, p2, _, _, _ = hmc.leapfrog(q1, -p1, g1, vg, 0.1, 100, mass)
        rev = max(np.max(np.abs(q2 - q0)), np.max(np.abs(p2 + p0)))
        ok &= rev < 1e-10

        def dH(eps):
            qa, pa, la, _, _ = hmc.leapfrog(q0, p0, g0, vg, eps, int(round(1.0 / eps)), mass)
            return abs(hmc.log_accept_ratio(l0, p0, la, pa, mass))

        ratio = dH(0.02) / dH(0.01)
        ok &= 3.5 <= ratio <= 4.5
        details.append(f"reversal {rev:.0e}, dH ratio {ratio:.2f}")
    report(4, ok, "; ".join(details))


# --------------------------------------------------------------------------
# 5: simulation-based calibration
# --------------------------------------------------------------------------

SBC_M, SBC_TIPS, SBC_LEVEL_SD = 5, 20, 1.0
SBC_Z = simulate.synthetic_covariate(SBC_M, seed=7)
SBC_GRID = coalescent.build_grid(1.0, SBC_M)
SBC_TABLE = treeio.CovariateTable(
    ("z",), SBC_Z[None, :].copy(), np.zeros((1, SBC_M), bool), np.zeros(1), np.ones(1)
)


def sbc_prior_draw(rng, post):
    """tau, sigma2, ell from their priors; g from the GP; theta - g from the GMRF plus level prior."""
    s = post.settings
    tau = s.tau_scale / rng.gamma(s.tau_shape)
    sigma2 = rng.exponential(1 / s.sigma2_rate)
    ell = s.lengthscale_min + rng.exponential(1 / s.lengthscale_rate)
    h = post.hyper_vector(tau, [sigma2], [ell])
    _, _, factor = post.kernel_factor(h, None)
    g = factor.lower @ rng.standard_normal(SBC_M)
    diag, off = prior.gmrf_bands(SBC_M, 1.0)
    lam, V = np.linalg.eigh(np.diag(diag) + np.diag(off, 1) + np.diag(off, -1))
    # the constant direction has eigenvalue 0; the level prior covers it
    contrast = V[:, 1:] @ (rng.standard_normal(SBC_M - 1) / np.sqrt(tau * lam[1:]))
    return g + contrast + rng.normal(0.0, SBC_LEVEL_SD)


def sbc_replicate(r, warmup=300, iterations=990, thin=10):
    """Rank of the true theta among 99 thinned posterior draws."""
    rng = np.random.default_rng(np.random.SeedSequence([2005, r]))
    settings = prior.PriorSettings(level_sd=SBC_LEVEL_SD)
    stub = coalescent.CoalescentData.from_trees(
        [simulate.simulate_tree(simulate.SimSpec.constant(2), rng)], SBC_GRID
    )
    theta = sbc_prior_draw(rng, prior.Posterior(stub, SBC_TABLE, settings))
    tree = simulate.simulate_tree(simulate.SimSpec.isochronous(SBC_TIPS, SBC_GRID.points, theta), rng)
    post = prior.Posterior(coalescent.CoalescentData.from_trees([tree], SBC_GRID), SBC_TABLE, settings)
    sampler = hmc.Sampler(post, hmc.SamplerSettings(warmup=warmup, iterations=iterations, thin=thin))
    draws = []

    def keep(state):
        if sampler.is_retained(state.iteration):
            draws.append(state.q[:SBC_M].copy())

    sampler.run(sampler.init_state(rng), keep)
    return (np.array(draws) < theta).sum(axis=0)


@pytest.mark.slow
def test_simulation_based_calibration():
    t0 = time.perf_counter()
    ranks = np.array([sbc_replicate(r) for r in range(200)])
    elapsed = time.perf_counter() - t0
    # 99 draws give ranks 0..99: ten bins of ten ranks, 20 expected per bin
    pvals = [stats.chisquare(np.bincount(ranks[:, k] // 10, minlength=10)).pvalue for k in range(SBC_M)]
    ok = min(pvals) > 0.001 and elapsed < 30 * 60
    report(5, ok, f"chi-squared p per theta_k: {', '.join(f'{p:.3f}' for p in pvals)}; {elapsed / 60:.1f} min")


# --------------------------------------------------------------------------
# 6-7: desk-scale replication of the covariate scenarios
# --------------------------------------------------------------------------


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fit_scenario(tmp_path, kind, seed, taxa=200):
    spec = {"kind": kind, "taxa": taxa, "isochronous": "false", "seed": seed, "warmup": 1000, "iterations": 4000}
    (tmp_path / "spec.cfg").write_text("".join(f"{k} = {v}\n" for k, v in spec.items()))
    sc, out = tmp_path / "scenario", tmp_path / "out"
    assert cli.main(["simulate", "--config", str(tmp_path / "spec.cfg"), "--out-dir", str(sc)]) == 0
    t0 = time.perf_counter()
    assert cli.main(["run", "--config", str(sc / "run.cfg"), "--out-dir", str(out)]) == 0
    elapsed = time.perf_counter() - t0
    truth = read_csv(sc / "truth.csv")
    z = np.array([float(r["covariate"]) for r in truth])
    theta = np.array([float(r["logne"]) for r in truth])
    ne = read_csv(out / "ne_vs_time.csv")
    lo = np.array([float(r["logne_hpd_lower"]) for r in ne])
    hi = np.array([float(r["logne_hpd_upper"]) for r in ne])
    curve = read_csv(out / "logne_vs_covariate.csv")
    zc = np.array([float(r["value"]) for r in curve])
    gc = np.array([float(r["g_median"]) for r in curve])
    return dict(z=z, theta=theta, coverage=np.mean((theta >= lo) & (theta <= hi)),
                zc=zc, gc=gc, elapsed=elapsed)


@pytest.fixture(scope="module")
def linear_fit(tmp_path_factory):
    return fit_scenario(tmp_path_factory.mktemp("linear"), "linear", 11)


@pytest.fixture(scope="module")
def concave_fit(tmp_path_factory):
    return fit_scenario(tmp_path_factory.mktemp("concave"), "concave", 12)


@pytest.mark.slow
def test_scenario_replication(linear_fit, concave_fit):
    c = concave_fit
    order = np.argsort(c["z"])
    spacing = float(np.max(np.diff(c["z"][order])))
    true_arg = c["z"][int(np.argmax(c["theta"]))]
    k = int(np.argmax(c["gc"]))
    interior = 0 < k < c["gc"].size - 1 and np.sum(c["gc"] == c["gc"][k]) == 1
    near = abs(c["zc"][k] - true_arg) <= spacing
    ok = (linear_fit["coverage"] >= 0.9 and c["coverage"] >= 0.9 and interior and near
          and max(linear_fit["elapsed"], c["elapsed"]) < 20 * 60)
    report(6, ok, f"HPD coverage linear {linear_fit['coverage']:.3f}, concave {c['coverage']:.3f}; "
                  f"concave max at z={c['zc'][k]:.2f} vs truth {true_arg:.2f} (spacing {spacing:.2f}); "
                  f"runs {linear_fit['elapsed']:.0f}s, {c['elapsed']:.0f}s")


@pytest.mark.slow
def test_linear_recovery(linear_fit):
    zc, gc = linear_fit["zc"], linear_fit["gc"]
    lo, hi = zc.min(), zc.max()
    central = (zc >= lo + 0.1 * (hi - lo)) & (zc <= hi - 0.1 * (hi - lo))
    slope, icept = np.polyfit(zc[central], gc[central], 1)
    dev = np.max(np.abs(gc[central] - (icept + slope * zc[central])))
    frac = dev / (gc.max() - gc.min())
    report(7, frac < 0.15, f"max deviation from best-fit line {frac:.1%} of curve range")


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("GPSKYGRID_FULL_SCALE"), reason="set GPSKYGRID_FULL_SCALE=1 for 705 taxa")
@pytest.mark.parametrize("kind, seed", [("linear", 11), ("concave", 12)])
def test_full_scale_coverage(tmp_path, kind, seed):
    fit = fit_scenario(tmp_path, kind, seed, taxa=705)
    assert fit["coverage"] >= 0.9


# --------------------------------------------------------------------------
# 8-10: simulator, determinism, flattening
# --------------------------------------------------------------------------


def test_simulator_moments():
    rng = np.random.default_rng(2008)
    ne, details, ok = 1.7, [], True
    for n in (2, 5, 10):
        t = simulate.tmrca_samples(simulate.SimSpec.constant(n, ne), 100_000, rng)
        want = 2 * ne * (1 - 1 / n)
        z = abs(t.mean() - want) / (t.std(ddof=1) / math.sqrt(t.size))
        ok &= z < 3
        details.append(f"n={n} {z:.2f} MCSE")
    report(8, ok, ", ".join(details))


def test_determinism_and_resume(tmp_path):
    spec = "kind = linear\ntaxa = 30\nintervals = 8\nseed = 5\nwarmup = 60\niterations = 140\n"
    (tmp_path / "spec.cfg").write_text(spec)
    sc = tmp_path / "sc"
    cli.main(["simulate", "--config", str(tmp_path / "spec.cfg"), "--out-dir", str(sc)])
    cfg = str(sc / "run.cfg")
    runs = {}
    for name in ("a", "b"):
        cli.main(["run", "--config", cfg, "--out-dir", str(tmp_path / name)])
        runs[name] = (tmp_path / name / "trace_chain1.tsv").read_bytes()
    cli.main(["run", "--config", cfg, "--out-dir", str(tmp_path / "cut"), "--stop-at", "130"])
    cli.main(["resume", "--config", cfg, "--out-dir", str(tmp_path / "cut")])
    resumed = (tmp_path / "cut" / "trace_chain1.tsv").read_bytes()
    same, restored = runs["a"] == runs["b"], runs["a"] == resumed
    report(9, same and restored, f"repeat run identical: {same}; killed at 130 of 200 and resumed identical: {restored}")


@pytest.mark.xfail(strict=True, reason="sech^2(z) = 0.05 holds at +-2.178, not +-2.69; see the decisions ledger")
def test_flattening_tanh():
    z = np.linspace(-4.0, 4.0, 81)
    spacing = z[1] - z[0]
    regions = summary.flat_regions(z, np.tanh(z), 0.05)
    inner = sorted(b for r in regions for b in r if abs(b) < 4.0)
    target = 2.69
    ok = len(inner) == 2 and abs(inner[0] + target) <= spacing and abs(inner[1] - target) <= spacing
    report(10, ok, f"detected boundaries {', '.join(f'{b:+.3f}' for b in inner)} vs +-{target} "
                   f"(analytic sech^2 = 0.05 at +-{math.acosh(math.sqrt(20)):.3f})")
