"""
Priors on the log population size field and the joint log-posterior.

The latent field is split as ``theta = g + eps``: ``g`` is a Gaussian process
over the covariates (squared-exponential kernel, additive over covariates)
and ``eps`` is a first-order intrinsic GMRF with precision ``tau * Q``. The
GMRF-centric form is used, so ``theta | g ~ GMRF(g, tau)`` and
``g ~ MVN(0, K)``; ``g`` is sampled jointly with ``theta`` rather than
marginalised.

Hyperparameters are sampled on an unconstrained scale::

    h = (log tau, log sigma2_1..P, log(ell_1 - ell_min)..log(ell_P - ell_min))

and every density below that takes ``h`` includes the log-Jacobian of that
transform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import coalescent
from .treeio import CovariateTable

LOG_2PI = math.log(2.0 * math.pi)


class PriorError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, component, value):
        super().__init__(f"non-finite log-posterior component {component!r}: {value}")
        self.component = component


# --------------------------------------------------------------------------
# GMRF
# --------------------------------------------------------------------------


def gmrf_bands(m: int, tau: float = 1.0):
    """Diagonal and off-diagonal of ``tau * Q`` for the first-order random walk."""
    diag = np.full(m, 2.0 * tau)
    diag[0] = diag[-1] = tau
    off = np.full(m - 1, -tau)
    return diag, off


def gmrf_apply(x) -> np.ndarray:
    """``Q @ x`` in O(M)."""
    d = np.diff(x)
    out = np.zeros_like(x, dtype=float)
    out[:-1] -= d
    out[1:] += d
    return out


def gmrf_log_density(x, tau: float) -> float:
    """Intrinsic GMRF log-density up to the 2*pi constant, rank M-1."""
    if not tau > 0:
        raise PriorError(f"GMRF precision must be positive, got {tau}")
    x = np.asarray(x, dtype=float)
    d = np.diff(x)
    return 0.5 * (x.size - 1) * math.log(tau) - 0.5 * tau * float(np.dot(d, d))


def gmrf_grad(x, tau: float) -> np.ndarray:
    if not tau > 0:
        raise PriorError(f"GMRF precision must be positive, got {tau}")
    return -tau * gmrf_apply(np.asarray(x, dtype=float))


# --------------------------------------------------------------------------
# Gaussian process
# --------------------------------------------------------------------------


def kernel_components(Z, sigma2, lengthscale):
    """Per-covariate squared-exponential kernels, shape (P, M, M)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if not np.all(np.isfinite(Z)):
        raise PriorError("non-finite covariate value in kernel input")
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (Z.shape[0],))
    ell = np.broadcast_to(np.asarray(lengthscale, dtype=float), (Z.shape[0],))
    diff = Z[:, :, None] - Z[:, None, :]
    return sigma2[:, None, None] * np.exp(-0.5 * (diff / ell[:, None, None]) ** 2)


def kernel_matrix(Z, sigma2, lengthscale, jitter: float = 0.0) -> np.ndarray:
    """
    Additive squared-exponential kernel over the rows of ``Z`` (P x M).
    ``jitter`` is relative: ``jitter * sum(sigma2)`` is added to the diagonal.
    """
    K = kernel_components(Z, sigma2, lengthscale).sum(axis=0)
    if jitter:
        K[np.diag_indices_from(K)] += jitter * float(np.sum(sigma2))
    return K


@dataclass
class KernelFactor:
    K: np.ndarray  # jittered
    lower: np.ndarray  # Cholesky factor of K
    jitter: float  # absolute diagonal jitter that was added

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve(self, b):
        return linalg.cho_solve((self.lower, True), b, check_finite=False)

    def inverse(self):
        return self.solve(np.eye(self.K.shape[0]))


def factorize_kernel(K, jitter: float = 1e-8, retries: int = 3) -> KernelFactor:
    """
    Cholesky factorisation of ``K + eps I`` with ``eps = jitter * max(diag K)``,
    multiplying ``eps`` by 10 on failure up to ``retries`` times.
    """
    K = np.asarray(K, dtype=float)
    scale = float(np.max(np.diag(K))) if K.size else 1.0
    eps = jitter * scale
    for attempt in range(retries + 1):
        Kj = K.copy()
        Kj[np.diag_indices_from(Kj)] += eps
        try:
            L = linalg.cholesky(Kj, lower=True, check_finite=True)
            return KernelFactor(Kj, L, eps)
        except (linalg.LinAlgError, ValueError):
            eps = eps * 10.0 if eps > 0 else 1e-12 * max(scale, 1.0)
    raise PriorError(
        f"kernel matrix not positive definite after {retries} jitter escalations "
        f"(last jitter {eps / 10.0:g}, diag scale {scale:g})"
    )


def gp_log_density(g, K):
    """
    Zero-mean MVN log-density of ``g``. ``K`` may be a matrix (factorised
    as given, no jitter) or a :class:`KernelFactor`. Returns
    ``(log_density, K^{-1} g)``.
    """
    factor = K if isinstance(K, KernelFactor) else factorize_kernel(K, jitter=0.0)
    g = np.asarray(g, dtype=float)
    alpha = factor.solve(g)
    val = -0.5 * (float(np.dot(g, alpha)) + factor.logdet + g.size * LOG_2PI)
    return val, alpha


# --------------------------------------------------------------------------
# Hyperpriors
# --------------------------------------------------------------------------


def log_inv_gamma(x: float, shape: float, scale: float) -> float:
    return (
        shape * math.log(scale)
        - math.lgamma(shape)
        - (shape + 1.0) * math.log(x)
        - scale / x
    )


def log_exponential(x: float, rate: float) -> float:
    if x < 0:
        return -math.inf
    return math.log(rate) - rate * x


@dataclass(frozen=True)
class PriorSettings:
    tau_shape: float = 1.0
    tau_scale: float = 10.0
    sigma2_rate: float = 1.0
    lengthscale_rate: float = 1.0
    lengthscale_min: float = 0.0
    jitter: float = 1e-8
    missing_precision: float = 1.0
    level_sd: float | None = None


# --------------------------------------------------------------------------
# Missing covariates
# --------------------------------------------------------------------------


def missing_covariate_prior(values, anchor: float, tau_z: float = 1.0):
    """
    Random-walk prior on a block of missing covariate values hanging off a
    fixed ``anchor`` (the oldest observed value). ``values`` run from the one
    adjacent to the anchor outwards. Returns ``(log_density, gradient)``.
    """
    z = np.asarray(values, dtype=float)
    if z.size == 0:
        return 0.0, z.copy()
    chain = np.concatenate(([anchor], z))
    d = np.diff(chain)
    logp = 0.5 * z.size * math.log(tau_z) - 0.5 * tau_z * float(np.dot(d, d))
    grad = -tau_z * d
    grad[:-1] += tau_z * d[1:]
    return logp, grad


def missing_blocks(table: CovariateTable):
    """
    Validate the missing pattern and return, per covariate, the anchor index
    and the (ascending) indices of the missing entries. Missing entries must
    be the oldest intervals of a row, after its last observed value.
    """
    blocks = []
    for p, name in enumerate(table.names):
        miss = np.flatnonzero(table.missing[p])
        obs = np.flatnonzero(~table.missing[p])
        if miss.size and (miss[0] < obs[-1] or np.any(np.diff(miss) != 1)):
            raise PriorError(
                f"covariate {name!r}: missing values must form one block at the oldest "
                "intervals; impute other gaps before running"
            )
        blocks.append((int(obs[-1]), miss))
    return blocks


# --------------------------------------------------------------------------
# Joint posterior
# --------------------------------------------------------------------------


class _HyperTerms:
    __slots__ = ("tau", "sigma2", "ell", "log_prior")


class Posterior:
    """
    Joint log-posterior over the latent position ``q`` and hyperparameters
    ``h`` for fixed genealogies and covariates.

    ``q = (theta, g, z_missing)`` or, when ``whiten`` is set,
    ``q = (theta, u)`` with ``g = chol(K) u``; missing covariates are then
    kept out of ``q`` and passed separately as ``z_extra``.

    Kernel factorisations and hyperprior terms are cached on the last
    ``(h, z)`` seen, so repeated gradient calls with fixed hyperparameters
    cost O(M^2) at most.
    """

    def __init__(self, data, covariates: CovariateTable, settings=PriorSettings(), whiten=True):
        self.data = data
        self.covariates = covariates
        self.settings = settings
        self.whiten = bool(whiten)
        self.M = data.n_intervals
        if covariates.n_intervals != self.M:
            raise PriorError(
                f"covariates cover {covariates.n_intervals} intervals, grid has {self.M}"
            )
        self.P = covariates.n_covariates
        self.blocks = missing_blocks(covariates)
        self.n_missing = int(sum(b[1].size for b in self.blocks))
        self._base_Z = np.where(covariates.missing, 0.0, covariates.values)
        self._m = data.m
        self._w = data.w
        self._kernel_key = None
        self._kernel = None
        self._hyper_key = None
        self._hyper = None
        self._empty = np.zeros(0)

    # layout ---------------------------------------------------------------

    @property
    def n_hyper(self) -> int:
        return 1 + 2 * self.P

    @property
    def dim(self) -> int:
        """Length of the HMC position vector."""
        return 2 * self.M + (0 if self.whiten else self.n_missing)

    def split(self, q):
        M = self.M
        return q[:M], q[M : 2 * M], q[2 * M :]

    def hyper_values(self, h):
        h = np.asarray(h, dtype=float)
        P = self.P
        tau = math.exp(float(h[0]))
        sigma2 = np.exp(h[1 : 1 + P])
        ell = self.settings.lengthscale_min + np.exp(h[1 + P : 1 + 2 * P])
        return tau, sigma2, ell

    def hyper_vector(self, tau, sigma2, ell):
        sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
        ell = np.atleast_1d(np.asarray(ell, dtype=float))
        lam = np.log(ell - self.settings.lengthscale_min)
        return np.concatenate(([math.log(tau)], np.log(sigma2), lam))

    def covariate_matrix(self, z_missing):
        Z = self._base_Z.copy()
        start = 0
        for p, (_, miss) in enumerate(self.blocks):
            Z[p, miss] = z_missing[start : start + miss.size]
            start += miss.size
        return Z

    def initial_missing(self):
        """Missing covariates initialised at their anchors."""
        out = []
        for p, (anchor, miss) in enumerate(self.blocks):
            out.extend([self._base_Z[p, anchor]] * miss.size)
        return np.array(out, dtype=float)

    # cached pieces --------------------------------------------------------

    def _hyper_terms(self, h):
        h = np.asarray(h, dtype=float)
        key = h.tobytes()
        if key != self._hyper_key:
            t = _HyperTerms()
            t.tau, t.sigma2, t.ell = self.hyper_values(h)
            t.log_prior = self.log_hyperprior(h) + self.log_jacobian(h)
            self._hyper, self._hyper_key = t, key
        return self._hyper

    def kernel_factor(self, h, z_missing):
        """``(Z, per-covariate kernels, KernelFactor)`` for the current kernel inputs."""
        h = np.asarray(h, dtype=float)
        z_missing = self._empty if z_missing is None else np.asarray(z_missing, dtype=float)
        key = h[1:].tobytes() + b"|" + z_missing.tobytes()
        if key != self._kernel_key:
            _, sigma2, ell = self.hyper_values(h)
            Z = self.covariate_matrix(z_missing)
            comps = kernel_components(Z, sigma2, ell)
            factor = factorize_kernel(comps.sum(axis=0), self.settings.jitter)
            self._kernel = (Z, comps, factor)
            self._kernel_key = key
        return self._kernel

    def log_hyperprior(self, h):
        """Hyperprior densities on the natural scale, without Jacobians."""
        s = self.settings
        tau, sigma2, ell = self.hyper_values(h)
        val = log_inv_gamma(tau, s.tau_shape, s.tau_scale)
        for p in range(self.P):
            val += log_exponential(sigma2[p], s.sigma2_rate)
            val += log_exponential(ell[p] - s.lengthscale_min, s.lengthscale_rate)
        return val

    def log_jacobian(self, h):
        return float(np.sum(h))

    def missing_terms(self, z_missing):
        logp = 0.0
        grad = np.zeros(self.n_missing)
        if not self.n_missing:
            return logp, grad
        start = 0
        tz = self.settings.missing_precision
        for p, (anchor, miss) in enumerate(self.blocks):
            if miss.size:
                lp, gr = missing_covariate_prior(
                    z_missing[start : start + miss.size], self._base_Z[p, anchor], tz
                )
                logp += lp
                grad[start : start + miss.size] = gr
                start += miss.size
        return logp, grad

    def level_term(self, eps):
        sd = self.settings.level_sd
        if sd is None:
            return 0.0, None
        mean = float(eps.sum()) / eps.size
        val = -0.5 * (mean / sd) ** 2 - math.log(sd) - 0.5 * LOG_2PI
        return val, -mean / (sd * sd * eps.size)

    def _unpack(self, q, h, z_extra):
        q = np.asarray(q, dtype=float)
        M = self.M
        theta, gb = q[:M], q[M : 2 * M]
        z = z_extra if self.whiten else q[2 * M :]
        if z is None:
            z = self._empty
        Z, comps, factor = self.kernel_factor(h, z)
        g = factor.lower @ gb if self.whiten else gb
        return theta, gb, g, z, Z, comps, factor

    # public ---------------------------------------------------------------

    def components(self, q, h, z_extra=None, likelihood=True) -> dict:
        """Every additive term of the log-posterior, keyed by name."""
        hyp = self._hyper_terms(h)
        theta, gb, g, z, Z, comps, factor = self._unpack(q, h, z_extra)
        eps = theta - g
        parts = {}
        if likelihood:
            parts["likelihood"] = coalescent.log_likelihood(self.data, theta)
        parts["gmrf"] = gmrf_log_density(eps, hyp.tau)
        if self.whiten:
            parts["gp"] = -0.5 * (float(np.dot(gb, gb)) + self.M * LOG_2PI)
        else:
            parts["gp"] = gp_log_density(g, factor)[0]
        parts["hyperprior"] = self.log_hyperprior(h)
        parts["jacobian"] = self.log_jacobian(h)
        parts["missing"] = self.missing_terms(z)[0]
        parts["level"] = self.level_term(eps)[0]
        return parts

    def log_posterior(self, q, h, z_extra=None) -> float:
        parts = self.components(q, h, z_extra)
        total = 0.0
        for name, value in parts.items():
            if not math.isfinite(value):
                raise NonFiniteError(name, value)
            total += value
        return total

    def log_prior_given_latent(self, q, h, z_extra=None) -> float:
        """Everything except the likelihood: the hyperparameter conditional."""
        return float(sum(self.components(q, h, z_extra, likelihood=False).values()))

    def value_and_grad(self, q, h, z_extra=None):
        """Log-posterior and its gradient with respect to ``q``."""
        hyp = self._hyper_terms(h)
        tau = hyp.tau
        theta, gb, g, z, Z, comps, factor = self._unpack(q, h, z_extra)
        M = self.M
        eps = theta - g
        d = eps[1:] - eps[:-1]
        # log-likelihood and GMRF inlined: this is the HMC inner loop
        e = np.exp(-theta)
        ew = e * self._w
        lik = -float(np.dot(self._m, theta)) - float(ew.sum())
        gm = 0.5 * (M - 1) * math.log(tau) - 0.5 * tau * float(np.dot(d, d))
        g_eps = np.zeros(M)
        g_eps[:-1] += tau * d
        g_eps[1:] -= tau * d
        lev, g_lev = self.level_term(eps)
        if g_lev is not None:
            g_eps += g_lev
        grad = np.empty(self.dim)
        grad[:M] = ew - self._m + g_eps
        total = lik + gm + lev + hyp.log_prior
        if self.whiten:
            total -= 0.5 * (float(np.dot(gb, gb)) + M * LOG_2PI)
            grad[M : 2 * M] = -(factor.lower.T @ g_eps) - gb
        else:
            gp, alpha = gp_log_density(g, factor)
            total += gp
            grad[M : 2 * M] = -g_eps - alpha
            if self.n_missing:
                miss_lp, miss_grad = self.missing_terms(z)
                total += miss_lp
                grad[2 * M :] = self._covariate_grad(alpha, factor, Z, comps, hyp.ell) + miss_grad
        if self.whiten and self.n_missing:
            total += self.missing_terms(z)[0]
        return total, grad

    def grad(self, q, h, z_extra=None):
        return self.value_and_grad(q, h, z_extra)[1]

    def _covariate_grad(self, alpha, factor, Z, comps, ell):
        # d/dK log N(g; 0, K) = (alpha alpha' - K^-1) / 2, K symmetric
        G = np.outer(alpha, alpha) - factor.inverse()
        out = []
        for p, (_, miss) in enumerate(self.blocks):
            for i in miss:
                dK = -comps[p, i] * (Z[p, i] - Z[p]) / ell[p] ** 2
                out.append(float(np.dot(G[i], dK)))
        return np.array(out)

    def latent_g(self, q, h, z_extra=None):
        """GP values ``g`` on the natural scale (undoes whitening)."""
        return self._unpack(q, h, z_extra)[2]

    def imputed(self, q, z_extra=None):
        """Current values of the missing covariates."""
        if self.whiten:
            return self._empty if z_extra is None else np.asarray(z_extra)
        return np.asarray(q[2 * self.M :])

    def hess_theta_bands(self, q, h):
        """Negative posterior Hessian of the theta block as tridiagonal bands."""
        tau, _, _ = self.hyper_values(h)
        theta = np.asarray(q[: self.M], dtype=float)
        diag, off = gmrf_bands(self.M, tau)
        diag = diag - coalescent.hess_diag_log_likelihood(self.data, theta)
        return diag, off


def joint_log_posterior(posterior: Posterior, q, h, z_extra=None) -> float:
    return posterior.log_posterior(q, h, z_extra)


def grad_joint(posterior: Posterior, q, h, z_extra=None) -> np.ndarray:
    return posterior.grad(q, h, z_extra)
