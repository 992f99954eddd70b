"""
Hamiltonian Monte Carlo for the latent field plus slice moves for the rest.

A chain alternates one HMC transition over the latent position vector with
one sweep of univariate slice updates over the hyperparameters. The mass
matrix over the theta block is the negative posterior Hessian, kept either in
full tridiagonal form (solved with a Thomas sweep) or as its diagonal; other
blocks use identity mass. The mass matrix and step size are adapted during
warmup only, never inside a trajectory.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coalescent

logger = logging.getLogger(__name__)

MASS_FLOOR = 1e-8
DIVERGENCE_THRESHOLD = 1000.0
CHECKPOINT_MAGIC = "GPSKYGRID-CHECKPOINT"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# Tridiagonal linear algebra
# --------------------------------------------------------------------------


def tridiag_solve(diag, off, rhs):
    """
    Solve ``A x = rhs`` for symmetric tridiagonal ``A`` given by its diagonal
    and off-diagonal, by forward elimination and back substitution.
    """
    d = [float(v) for v in diag]
    e = [float(v) for v in off]
    b = [float(v) for v in rhs]
    n = len(d)
    if len(b) != n or len(e) != n - 1:
        raise ValueError("band lengths do not match the right-hand side")
    c = [0.0] * n
    x = [0.0] * n
    piv = d[0]
    if piv == 0.0:
        raise ZeroDivisionError("zero pivot in tridiagonal solve")
    x[0] = b[0] / piv
    for i in range(1, n):
        c[i - 1] = e[i - 1] / piv
        piv = d[i] - e[i - 1] * c[i - 1]
        if piv == 0.0:
            raise ZeroDivisionError("zero pivot in tridiagonal solve")
        x[i] = (b[i] - e[i - 1] * x[i - 1]) / piv
    for i in range(n - 2, -1, -1):
        x[i] -= c[i] * x[i + 1]
    return np.array(x)


class TridiagonalCholesky:
    """``A = L L'`` for SPD tridiagonal ``A``; ``L`` is lower bidiagonal."""

    def __init__(self, diag, off):
        d = [float(v) for v in diag]
        e = [float(v) for v in off]
        n = len(d)
        ld = [0.0] * n
        lo = [0.0] * max(n - 1, 0)
        ld[0] = math.sqrt(d[0]) if d[0] > 0 else _not_spd(0)
        for i in range(1, n):
            lo[i - 1] = e[i - 1] / ld[i - 1]
            r = d[i] - lo[i - 1] ** 2
            ld[i] = math.sqrt(r) if r > 0 else _not_spd(i)
        self.ld = ld
        self.lo = lo
        self.n = n

    def solve(self, rhs):
        ld, lo = self.ld, self.lo
        y = [0.0] * self.n
        y[0] = float(rhs[0]) / ld[0]
        for i in range(1, self.n):
            y[i] = (float(rhs[i]) - lo[i - 1] * y[i - 1]) / ld[i]
        for i in range(self.n - 1, -1, -1):
            if i < self.n - 1:
                y[i] = (y[i] - lo[i] * y[i + 1]) / ld[i]
            else:
                y[i] = y[i] / ld[i]
        return np.array(y)

    def lower_apply(self, xi):
        """``L @ xi``: maps a standard normal draw to N(0, A)."""
        xi = np.asarray(xi, dtype=float)
        out = np.array(self.ld) * xi
        out[1:] += np.array(self.lo) * xi[:-1]
        return out


def _not_spd(i):
    raise ZeroDivisionError(f"tridiagonal matrix is not positive definite (pivot {i})")


# --------------------------------------------------------------------------
# Mass matrix
# --------------------------------------------------------------------------


@dataclass
class MassMatrix:
    """Mass over a position vector whose first ``m`` entries are theta."""

    mode: str
    dim: int
    m: int = 0
    diag: np.ndarray = None  # theta block diagonal (diagonal and tridiagonal modes)
    off: np.ndarray = None  # theta block off-diagonal (tridiagonal mode)
    _chol: TridiagonalCholesky = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode == "tridiagonal":
            self._chol = TridiagonalCholesky(self.diag, self.off)

    def sample_momentum(self, rng):
        xi = rng.standard_normal(self.dim)
        if self.mode == "diagonal":
            xi[: self.m] *= np.sqrt(self.diag)
        elif self.mode == "tridiagonal":
            xi[: self.m] = self._chol.lower_apply(xi[: self.m])
        return xi

    def inv_apply(self, p):
        if self.mode == "identity":
            return np.array(p, dtype=float)
        out = np.array(p, dtype=float)
        if self.mode == "diagonal":
            out[: self.m] /= self.diag
        else:
            out[: self.m] = self._chol.solve(out[: self.m])
        return out

    def kinetic(self, p):
        return 0.5 * float(np.dot(p, self.inv_apply(p)))

    def dense(self):
        A = np.eye(self.dim)
        if self.mode != "identity":
            A[: self.m, : self.m] = np.diag(self.diag)
        if self.mode == "tridiagonal":
            i = np.arange(self.m - 1)
            A[i, i + 1] = A[i + 1, i] = self.off
        return A

    def to_dict(self):
        return {
            "mode": self.mode,
            "dim": self.dim,
            "m": self.m,
            "diag": None if self.diag is None else [float(v) for v in self.diag],
            "off": None if self.off is None else [float(v) for v in self.off],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["mode"],
            d["dim"],
            d["m"],
            None if d["diag"] is None else np.array(d["diag"]),
            None if d["off"] is None else np.array(d["off"]),
        )


def mass_from_bands(mode, dim, diag, off, lik_curvature=None):
    """
    Mass matrix from the bands of ``tau Q`` plus the likelihood curvature.
    ``lik_curvature`` (``exp(-theta) w``, non-negative) is floored at
    ``MASS_FLOOR`` so the tridiagonal form stays positive definite.
    """
    m = len(diag)
    if mode == "identity":
        return MassMatrix("identity", dim, m)
    diag = np.asarray(diag, dtype=float)
    if lik_curvature is not None:
        diag = diag + np.maximum(np.asarray(lik_curvature, dtype=float), MASS_FLOOR)
    if mode == "diagonal":
        return MassMatrix("diagonal", dim, m, np.maximum(diag, MASS_FLOOR))
    if mode == "tridiagonal":
        return MassMatrix("tridiagonal", dim, m, diag, np.asarray(off, dtype=float))
    raise ValueError(f"unknown mass matrix mode {mode!r}")


def build_mass_matrix(posterior, q, h, mode: str) -> MassMatrix:
    """Negative posterior Hessian over theta: ``diag(exp(-theta) w) + tau Q``."""
    from .prior import gmrf_bands

    tau = posterior.hyper_values(h)[0]
    theta = np.asarray(q[: posterior.M], dtype=float)
    diag, off = gmrf_bands(posterior.M, tau)
    curv = -coalescent.hess_diag_log_likelihood(posterior.data, theta)
    return mass_from_bands(mode, posterior.dim, diag, off, curv)


# --------------------------------------------------------------------------
# Leapfrog and HMC transition
# --------------------------------------------------------------------------


def leapfrog(q, p, grad, value_and_grad, step_size, n_steps, mass: MassMatrix):
    """
    ``n_steps`` leapfrog steps from ``(q, p)``; ``grad`` is the log-density
    gradient at ``q``. Returns ``(q, p, log_density, grad, ok)`` where ``ok``
    is False if a non-finite value appeared.
    """
    if n_steps < 1:
        raise ValueError("need at least one leapfrog step")
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float) + 0.5 * step_size * grad
    logp = math.nan
    for i in range(n_steps):
        q = q + step_size * mass.inv_apply(p)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                logp, grad = value_and_grad(q)
        except (FloatingPointError, ValueError, ArithmeticError):
            return q, p, -math.inf, grad, False
        if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
            return q, p, logp, grad, False
        p = p + (step_size if i < n_steps - 1 else 0.5 * step_size) * grad
    return q, p, logp, grad, True


@dataclass
class Transition:
    q: np.ndarray
    logp: float
    grad: np.ndarray
    accepted: bool
    divergent: bool
    accept_prob: float


def log_accept_ratio(logp0, p0, logp1, p1, mass: MassMatrix) -> float:
    """``H(start) - H(proposal)`` with ``H = -logp + p'M^{-1}p / 2``."""
    return (logp1 - mass.kinetic(p1)) - (logp0 - mass.kinetic(p0))


def hmc_transition(rng, q, logp, grad, value_and_grad, step_size, n_steps, mass):
    if not step_size > 0:
        raise ValueError(f"step size must be positive, got {step_size}")
    p0 = mass.sample_momentum(rng)
    q1, p1, logp1, grad1, ok = leapfrog(q, p0, grad, value_and_grad, step_size, n_steps, mass)
    if ok:
        log_ratio = log_accept_ratio(logp, p0, logp1, p1, mass)
        ok = math.isfinite(log_ratio) and log_ratio > -DIVERGENCE_THRESHOLD
    u = rng.uniform()
    if not ok:
        return Transition(q, logp, grad, False, True, 0.0)
    accept_prob = math.exp(min(0.0, log_ratio))
    if u < accept_prob:
        return Transition(q1, logp1, grad1, True, False, accept_prob)
    return Transition(q, logp, grad, False, False, accept_prob)


# --------------------------------------------------------------------------
# Step-size adaptation
# --------------------------------------------------------------------------


@dataclass
class DualAveraging:
    """
    Dual averaging on ``log(step)`` toward a target mean acceptance. The
    shrinkage point is the initial step itself, so a chain already at the
    target acceptance keeps its step size.
    """

    initial: float
    target: float = 0.8
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    t: int = 0
    h_bar: float = 0.0
    log_step: float = None
    log_step_bar: float = None

    def __post_init__(self):
        if self.log_step is None:
            self.log_step = math.log(self.initial)
        if self.log_step_bar is None:
            self.log_step_bar = math.log(self.initial)

    @property
    def mu(self):
        return math.log(self.initial)

    def update(self, accept_stat: float) -> float:
        self.t += 1
        t = self.t
        w = 1.0 / (t + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_stat)
        self.log_step = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        eta = t ** (-self.kappa)
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def step(self):
        return math.exp(self.log_step)

    @property
    def final_step(self):
        return math.exp(self.log_step_bar)


def adapt_step_size(history, initial: float, target: float = 0.8) -> float:
    """Run dual averaging over a history of acceptance statistics."""
    da = DualAveraging(initial, target)
    for a in history:
        da.update(a)
    return da.step


# --------------------------------------------------------------------------
# Slice sampling
# --------------------------------------------------------------------------


def slice_sample(rng, x0, logf, width=1.0, logf0=None, max_steps_out=50, max_shrink=100):
    """
    One univariate slice-sampling update with stepping out and shrinkage.
    Returns ``(x, logf(x))``; the current point is kept if shrinkage exhausts.
    """
    if logf0 is None:
        logf0 = logf(x0)
    level = logf0 + math.log(rng.uniform())
    left = x0 - width * rng.uniform()
    right = left + width
    j = int(math.floor(max_steps_out * rng.uniform()))
    k = max_steps_out - 1 - j
    while j > 0 and logf(left) > level:
        left -= width
        j -= 1
    while k > 0 and logf(right) > level:
        right += width
        k -= 1
    for _ in range(max_shrink):
        x1 = left + (right - left) * rng.uniform()
        lf1 = logf(x1)
        if lf1 > level:
            return x1, lf1
        if x1 < x0:
            left = x1
        else:
            right = x1
    logger.warning("slice sampler exhausted %d shrinks; keeping current value", max_shrink)
    return x0, logf0


HYPER_BOUND = 50.0


def _safe(f, bound=HYPER_BOUND):
    def wrapped(x):
        if abs(x) > bound:
            return -math.inf
        try:
            v = f(x)
        except (FloatingPointError, ValueError, ArithmeticError, OverflowError):
            return -math.inf
        return v if math.isfinite(v) else -math.inf

    return wrapped


def hyperparam_move(rng, posterior, q, h, z_extra=None, width=1.0):
    """
    Slice-sample each unconstrained hyperparameter in turn, conditioned on
    the latent position ``q``. When the posterior is whitened, missing
    covariates (``z_extra``) are updated the same way. Returns ``(h, z_extra)``.
    """
    h = np.array(h, dtype=float)
    z = None if z_extra is None else np.array(z_extra, dtype=float)
    for i in range(h.size):

        def logf(x, i=i):
            hh = h.copy()
            hh[i] = x
            return posterior.log_prior_given_latent(q, hh, z)

        h[i], _ = slice_sample(rng, h[i], _safe(logf), width)
    if z is not None:
        for i in range(z.size):

            def logf(x, i=i):
                zz = z.copy()
                zz[i] = x
                return posterior.log_prior_given_latent(q, h, zz)

            z[i], _ = slice_sample(rng, z[i], _safe(logf, math.inf), width)
    return h, z


# --------------------------------------------------------------------------
# Chains
# --------------------------------------------------------------------------


@dataclass
class SamplerSettings:
    leapfrog_steps: int = 32
    step_size: float = 0.05
    target_accept: float = 0.8
    preconditioning: str = "tridiagonal"
    mass_refresh: int = 100
    refresh_after_warmup: bool = False
    jitter_steps: float = 0.2
    warmup: int = 500
    iterations: int = 2000
    thin: int = 1


@dataclass
class ChainState:
    q: np.ndarray
    h: np.ndarray
    z_extra: np.ndarray
    logp: float
    grad: np.ndarray
    step_size: float
    iteration: int
    mass: MassMatrix
    adapt: DualAveraging
    rng: np.random.Generator
    accepted: bool = False
    divergent: bool = False


def rng_for_chain(seed: int, chain: int = 0, n_chains: int = 1):
    """Per-chain generator: chain ``i`` uses the ``i``-th spawned child of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(max(n_chains, chain + 1))
    return np.random.default_rng(children[chain])


def initial_position(posterior):
    """
    Per-interval estimates shrunk toward the pooled one for theta, split
    evenly between g and the GMRF error; missing covariates at their anchors.

    Neither ``theta - g`` may be constant nor ``g`` zero at the start: both
    make a hyperparameter conditional improper.
    """
    data = posterior.data
    M = posterior.M
    pooled = max(float(data.w.sum()), 1e-300) / max(float(data.m.sum()), 1.0)
    theta = np.log((data.w + pooled) / (data.m + 1.0))
    theta = theta + 1e-3 * np.linspace(-1.0, 1.0, M)
    q = np.zeros(posterior.dim)
    q[:M] = theta
    g = 0.5 * (theta - theta.mean()) + 1e-3
    if posterior.whiten:
        _, _, factor = posterior.kernel_factor(initial_hyper(posterior), posterior.initial_missing())
        g = np.linalg.solve(factor.lower, g)
    q[M : 2 * M] = g
    if not posterior.whiten and posterior.n_missing:
        q[2 * posterior.M :] = posterior.initial_missing()
    z_extra = posterior.initial_missing() if posterior.whiten else None
    return q, z_extra


def initial_hyper(posterior):
    ell0 = posterior.settings.lengthscale_min + 1.0
    return posterior.hyper_vector(1.0, np.ones(posterior.P), np.full(posterior.P, ell0))


class Sampler:
    def __init__(self, posterior, settings: SamplerSettings):
        self.posterior = posterior
        self.settings = settings

    def init_state(self, rng, q=None, h=None, z_extra=None) -> ChainState:
        post = self.posterior
        q0, z0 = initial_position(post)
        q = q0 if q is None else np.array(q, dtype=float)
        z_extra = z0 if z_extra is None else np.array(z_extra, dtype=float)
        h = initial_hyper(post) if h is None else np.array(h, dtype=float)
        logp, grad = post.value_and_grad(q, h, z_extra)
        mass = build_mass_matrix(post, q, h, self.settings.preconditioning)
        s = self.settings
        return ChainState(
            q, h, z_extra, logp, grad, s.step_size, 0, mass,
            DualAveraging(s.step_size, s.target_accept), rng,
        )

    def _vg(self, state):
        post = self.posterior
        h, z = state.h, state.z_extra
        return lambda q: post.value_and_grad(q, h, z)

    def step(self, state: ChainState) -> ChainState:
        s = self.settings
        post = self.posterior
        rng = state.rng
        it = state.iteration
        warm = it < s.warmup
        if warm or s.refresh_after_warmup:
            if it % s.mass_refresh == 0:
                state.mass = build_mass_matrix(post, state.q, state.h, s.preconditioning)

        lo = max(1, int(round(s.leapfrog_steps * (1.0 - s.jitter_steps))))
        hi = max(lo, int(round(s.leapfrog_steps * (1.0 + s.jitter_steps))))
        n_steps = int(rng.integers(lo, hi + 1))
        tr = hmc_transition(
            rng, state.q, state.logp, state.grad, self._vg(state), state.step_size, n_steps, state.mass
        )
        state.q, state.accepted, state.divergent = tr.q, tr.accepted, tr.divergent

        if warm:
            state.adapt.update(tr.accept_prob)
            state.step_size = state.adapt.step
            if it == s.warmup - 1:
                state.step_size = state.adapt.final_step

        state.h, state.z_extra = hyperparam_move(rng, post, state.q, state.h, state.z_extra)
        state.logp, state.grad = post.value_and_grad(state.q, state.h, state.z_extra)
        state.iteration = it + 1
        return state

    def is_retained(self, iteration: int) -> bool:
        """Whether the state after ``iteration`` completed steps goes in the trace."""
        s = self.settings
        k = iteration - s.warmup
        return k > 0 and k % s.thin == 0

    @property
    def total_iterations(self) -> int:
        return self.settings.warmup + self.settings.iterations

    def run(self, state: ChainState, callback=None, stop_at=None) -> ChainState:
        end = self.total_iterations if stop_at is None else min(stop_at, self.total_iterations)
        while state.iteration < end:
            self.step(state)
            if callback is not None:
                callback(state)
        return state


# --------------------------------------------------------------------------
# Trace and checkpoint files
# --------------------------------------------------------------------------


def trace_header(posterior):
    names = list(posterior.covariates.names)
    cols = ["iteration", "log_posterior", "log_likelihood", "tau"]
    cols += [f"sigma2_{n}" for n in names]
    cols += [f"lengthscale_{n}" for n in names]
    cols += [f"theta_{k + 1}" for k in range(posterior.M)]
    cols += [f"g_{k + 1}" for k in range(posterior.M)]
    for p, (_, miss) in enumerate(posterior.blocks):
        cols += [f"z_{names[p]}_{k + 1}" for k in miss]
    cols += ["accepted", "divergent"]
    return cols


def trace_row(posterior, state: ChainState):
    M = posterior.M
    tau, sigma2, ell = posterior.hyper_values(state.h)
    theta = state.q[:M]
    g = posterior.latent_g(state.q, state.h, state.z_extra)
    z = state.z_extra if posterior.whiten else state.q[2 * M :]
    vals = [state.logp, coalescent.log_likelihood(posterior.data, theta), tau]
    vals += list(sigma2) + list(ell) + list(theta) + list(g)
    vals += list(z if z is not None else [])
    cells = [str(state.iteration)] + [repr(float(v)) for v in vals]
    cells += [str(int(state.accepted)), str(int(state.divergent))]
    return cells


def _rng_state(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": st}


def save_checkpoint(path, state: ChainState, meta=None):
    payload = {
        "iteration": state.iteration,
        "q": [float(v) for v in state.q],
        "h": [float(v) for v in state.h],
        "z_extra": None if state.z_extra is None else [float(v) for v in state.z_extra],
        "logp": float(state.logp),
        "grad": [float(v) for v in state.grad],
        "step_size": float(state.step_size),
        "mass": state.mass.to_dict(),
        "adapt": {
            "initial": state.adapt.initial,
            "target": state.adapt.target,
            "t": state.adapt.t,
            "h_bar": state.adapt.h_bar,
            "log_step": state.adapt.log_step,
            "log_step_bar": state.adapt.log_step_bar,
        },
        "rng": _rng_state(state.rng),
        "accepted": state.accepted,
        "divergent": state.divergent,
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(f"{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\n")
        json.dump(payload, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(ChainState, meta)``."""
    with open(path, encoding="utf-8") as fh:
        magic = fh.readline().strip()
        version = fh.readline().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if version != f"version {CHECKPOINT_VERSION}":
            raise ValueError(f"{path}: unsupported checkpoint {version!r}")
        d = json.load(fh)
    rng = np.random.Generator(getattr(np.random, d["rng"]["bit_generator"])())
    rng.bit_generator.state = d["rng"]["state"]
    a = d["adapt"]
    adapt = DualAveraging(
        a["initial"], a["target"], t=a["t"], h_bar=a["h_bar"],
        log_step=a["log_step"], log_step_bar=a["log_step_bar"],
    )
    state = ChainState(
        q=np.array(d["q"]),
        h=np.array(d["h"]),
        z_extra=None if d["z_extra"] is None else np.array(d["z_extra"]),
        logp=d["logp"],
        grad=np.array(d["grad"]),
        step_size=d["step_size"],
        iteration=d["iteration"],
        mass=MassMatrix.from_dict(d["mass"]),
        adapt=adapt,
        rng=rng,
        accepted=d["accepted"],
        divergent=d["divergent"],
    )
    return state, d["meta"]
