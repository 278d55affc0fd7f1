"""Probabilistic car-following models: priors, reparameterization, log posterior.

Two noise models (iid acceleration noise, or GP residual plus iid noise) cross
three pooling schemes (pooled, hierarchical, unpooled). All densities are
evaluated on an unconstrained real vector; positive parameters live on the log
scale and the hierarchical covariance uses an LKJ-Cholesky parameterization.
"""
from __future__ import annotations

import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .episodes import Episode
from .gp import (
    CovMatrix,
    FactorizationError,
    KernelHyper,
    NoiseScale,
    assemble_speed_cov,
    assemble_speed_cov_banded,
    gram,
    mvn_logpdf,
)
from .idm import RECOMMENDED_THETA, THETA_NAMES, CfInput, IdmParams, idm_acceleration

BIDM = "bidm"
MAIDM = "maidm"
POOLED = "pooled"
HIERARCHICAL = "hierarchical"
UNPOOLED = "unpooled"

LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of all priors.

    mu0/Sigma0: normal prior on log theta (population prior, and the per-driver
    prior in the pooled/unpooled schemes). mu_eps/sigma1, mu_k/sigma2,
    mu_ell/sigma_ell: log-normal hyperparameters for the noise scales and the
    GP lengthscale. lam: exponential rate of the hierarchical scale vector.
    eta: LKJ shape for the hierarchical correlation factor.
    """

    mu0: tuple = tuple(np.log(RECOMMENDED_THETA))
    Sigma0: tuple = tuple(map(tuple, (0.5**2 * np.eye(5)).tolist()))
    mu_eps: float = float(np.log(0.3))
    sigma1: float = 0.5
    mu_k: float = float(np.log(0.2))
    sigma2: float = 0.5
    mu_ell: float = float(np.log(1.3))
    sigma_ell: float = 0.5
    lam: float = 100.0
    eta: float = 2.0

    def __post_init__(self):
        mu0 = np.asarray(self.mu0, dtype=float)
        Sigma0 = np.asarray(self.Sigma0, dtype=float)
        if mu0.shape != (5,):
            raise ValueError("mu0 must have 5 entries")
        if Sigma0.shape != (5, 5) or not np.allclose(Sigma0, Sigma0.T):
            raise ValueError("Sigma0 must be a symmetric 5x5 matrix")
        if np.any(np.linalg.eigvalsh(Sigma0) <= 0):
            raise ValueError("Sigma0 must be positive definite")
        for name in ("sigma1", "sigma2", "sigma_ell", "lam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        object.__setattr__(self, "mu0", tuple(mu0))
        object.__setattr__(self, "Sigma0", tuple(map(tuple, Sigma0.tolist())))

    def mu0_array(self) -> np.ndarray:
        return np.asarray(self.mu0, dtype=float)

    def Sigma0_array(self) -> np.ndarray:
        return np.asarray(self.Sigma0, dtype=float)


@dataclass(frozen=True)
class ModelSpec:
    """Noise model x pooling scheme plus priors and fixed exponents."""

    noise_model: str = MAIDM
    pooling: str = POOLED
    priors: PriorConfig = field(default_factory=PriorConfig)
    num_drivers: int = 1
    delta: float = 4.0
    s1: float = 0.0

    def __post_init__(self):
        if self.noise_model not in (BIDM, MAIDM):
            raise ValueError(f"noise_model must be {BIDM!r} or {MAIDM!r}")
        if self.pooling not in (POOLED, HIERARCHICAL, UNPOOLED):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.num_drivers < 1:
            raise ValueError("num_drivers must be >= 1")


def corr_chol_from_unconstrained(z: np.ndarray, dim: int) -> tuple[np.ndarray, float]:
    """Unconstrained strict-lower entries -> correlation Cholesky factor.

    Uses the tanh canonical-partial-correlation construction, which keeps row
    norms at one so L @ L.T is a correlation matrix for any z. Also returns
    the log-Jacobian of the map from z to the strict lower triangle of L.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (dim * (dim - 1) // 2,):
        raise ValueError(f"expected {dim * (dim - 1) // 2} entries, got {z.shape}")
    w = np.tanh(z)
    log_jac = float(np.sum(np.log1p(-(w**2))))
    L = np.zeros((dim, dim))
    L[0, 0] = 1.0
    k = 0
    for i in range(1, dim):
        rem = 1.0
        for j in range(i):
            wk = w[k]
            L[i, j] = wk * np.sqrt(rem)
            log_jac += 0.5 * np.log(rem)
            rem *= 1.0 - wk * wk
            k += 1
        L[i, i] = np.sqrt(rem)
    return L, log_jac


def corr_chol_to_unconstrained(L: np.ndarray) -> np.ndarray:
    """Inverse of `corr_chol_from_unconstrained` for a valid correlation factor."""
    dim = L.shape[0]
    z = np.empty(dim * (dim - 1) // 2)
    k = 0
    for i in range(1, dim):
        rem = 1.0
        for j in range(i):
            w = L[i, j] / np.sqrt(rem)
            z[k] = np.arctanh(w)
            rem *= 1.0 - w * w
            k += 1
    return z


def lkj_chol_logdensity(L: np.ndarray, eta: float) -> float:
    """Unnormalized LKJ log-density of a correlation Cholesky factor."""
    dim = L.shape[0]
    diag = np.diag(L)[1:]
    coeffs = np.array([dim - i + 2.0 * eta - 3.0 for i in range(1, dim)])
    return float(np.sum(coeffs * np.log(diag)))


def normal_logpdf(x, mu, sigma):
    """Scalar normal log-density; also the unconstrained density of a log-normal."""
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * LOG2PI


def exponential_unconstrained_logpdf(x, lam: float):
    """Density of log(y) where y ~ Exponential(rate lam), Jacobian included."""
    return np.log(lam) - lam * np.exp(x) + x


_CORR_PAIRS = [(j, i) for i in range(1, 5) for j in range(i)]


class ParamLayout:
    """Index map between the flat unconstrained vector and named parameters.

    Layout order: per-driver log theta blocks (one shared block when pooled),
    then for the hierarchical scheme the population log theta, the correlation
    coordinates, and the log scale vector, then log sigma_eps and, for the GP
    noise model, log sigma_k and log ell.
    """

    def __init__(self, spec: ModelSpec, driver_labels: list[str] | None = None):
        self.spec = spec
        D = spec.num_drivers
        if driver_labels is None:
            driver_labels = [f"d{i}" for i in range(D)]
        if len(driver_labels) != D:
            raise ValueError("driver_labels length must match num_drivers")
        self.driver_labels = list(driver_labels)

        names: list[str] = []
        idx = 0
        if spec.pooling == POOLED:
            shared = slice(0, 5)
            self.theta_slices = [shared] * D
            names += list(THETA_NAMES)
            idx = 5
        else:
            self.theta_slices = []
            for label in self.driver_labels:
                self.theta_slices.append(slice(idx, idx + 5))
                names += [f"{n}[{label}]" for n in THETA_NAMES]
                idx += 5
        if spec.pooling == HIERARCHICAL:
            self.pop_slice = slice(idx, idx + 5)
            names += [f"pop_{n}" for n in THETA_NAMES]
            idx += 5
            self.corr_slice = slice(idx, idx + 10)
            names += [f"corr[{THETA_NAMES[j]},{THETA_NAMES[i]}]" for j, i in _CORR_PAIRS]
            idx += 10
            self.sd_slice = slice(idx, idx + 5)
            names += [f"sigma0[{n}]" for n in THETA_NAMES]
            idx += 5
        else:
            self.pop_slice = None
            self.corr_slice = None
            self.sd_slice = None
        self.sigma_eps_index = idx
        names.append("sigma_eps")
        idx += 1
        if spec.noise_model == MAIDM:
            self.sigma_k_index = idx
            names.append("sigma_k")
            self.ell_index = idx + 1
            names.append("ell")
            idx += 2
        else:
            self.sigma_k_index = None
            self.ell_index = None
        self.size = idx
        self.names = names

        self._sigma0_chol = np.linalg.cholesky(spec.priors.Sigma0_array())

    def theta_params(self, p: np.ndarray, driver: int) -> IdmParams:
        log_theta = p[self.theta_slices[driver]]
        theta = np.exp(log_theta)
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta overflow")
        return IdmParams.from_theta(theta, delta=self.spec.delta, s1=self.spec.s1)

    def noise_values(self, p: np.ndarray) -> tuple[float, float | None, float | None]:
        sigma_eps = float(np.exp(p[self.sigma_eps_index]))
        sigma_k = ell = None
        if self.sigma_k_index is not None:
            sigma_k = float(np.exp(p[self.sigma_k_index]))
            ell = float(np.exp(p[self.ell_index]))
        return sigma_eps, sigma_k, ell

    def constrain(self, p: np.ndarray) -> np.ndarray:
        """Flat unconstrained vector -> named constrained values (same length)."""
        p = np.asarray(p, dtype=float)
        if p.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {p.shape}")
        out = np.exp(p)
        if self.corr_slice is not None:
            L, _ = corr_chol_from_unconstrained(p[self.corr_slice], 5)
            R = L @ L.T
            out[self.corr_slice] = np.array([R[i, j] for j, i in _CORR_PAIRS])
        return out

    def unconstrain(self, c: np.ndarray) -> np.ndarray:
        """Inverse of `constrain`; correlation entries must form a valid matrix."""
        c = np.asarray(c, dtype=float)
        if c.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {c.shape}")
        out = np.empty(self.size)
        mask = np.ones(self.size, dtype=bool)
        if self.corr_slice is not None:
            mask[self.corr_slice] = False
            R = np.eye(5)
            for r, (j, i) in zip(c[self.corr_slice], _CORR_PAIRS):
                R[i, j] = R[j, i] = r
            L = np.linalg.cholesky(R)
            out[self.corr_slice] = corr_chol_to_unconstrained(L)
        out[mask] = np.log(c[mask])
        return out

    def default_blocks(self) -> list[np.ndarray]:
        """Proposal blocks: per-driver theta, hierarchy blocks, one noise block."""
        blocks = []
        seen = set()
        for sl in self.theta_slices:
            key = (sl.start, sl.stop)
            if key not in seen:
                seen.add(key)
                blocks.append(np.arange(sl.start, sl.stop))
        if self.pop_slice is not None:
            blocks.append(np.arange(self.pop_slice.start, self.pop_slice.stop))
            blocks.append(np.arange(self.corr_slice.start, self.corr_slice.stop))
            blocks.append(np.arange(self.sd_slice.start, self.sd_slice.stop))
        noise = [self.sigma_eps_index]
        if self.sigma_k_index is not None:
            noise += [self.sigma_k_index, self.ell_index]
        blocks.append(np.array(noise))
        return blocks

    def initial_point(self, rng: np.random.Generator | None = None, jitter: float = 0.1) -> np.ndarray:
        """Constrained prior centers, optionally jittered +-jitter relative."""
        priors = self.spec.priors
        p = np.zeros(self.size)
        for sl in dict.fromkeys((s.start, s.stop) for s in self.theta_slices):
            p[sl[0] : sl[1]] = priors.mu0_array()
        if self.pop_slice is not None:
            p[self.pop_slice] = priors.mu0_array()
            p[self.corr_slice] = 0.0
            p[self.sd_slice] = np.log(1.0 / priors.lam)
        p[self.sigma_eps_index] = priors.mu_eps
        if self.sigma_k_index is not None:
            p[self.sigma_k_index] = priors.mu_k
            p[self.ell_index] = priors.mu_ell
        if rng is not None and jitter > 0:
            c = self.constrain(p)
            scale = 1.0 + rng.uniform(-jitter, jitter, size=self.size)
            if self.corr_slice is not None:
                scale[self.corr_slice] = 1.0  # keep correlations at zero
            p = self.unconstrain(c * scale)
        return p


def log_prior(p: np.ndarray, spec: ModelSpec, layout: ParamLayout | None = None) -> float:
    """Log prior density on the unconstrained vector, Jacobians included."""
    if layout is None:
        layout = ParamLayout(spec)
    p = np.asarray(p, dtype=float)
    priors = spec.priors
    mu0 = priors.mu0_array()
    total = 0.0

    def mvn_term(x, mean, chol):
        zv = solve_triangular(chol, x - mean, lower=True, check_finite=False)
        return -0.5 * float(zv @ zv) - float(np.sum(np.log(np.diag(chol)))) - 2.5 * LOG2PI

    if spec.pooling == POOLED:
        total += mvn_term(p[layout.theta_slices[0]], mu0, layout._sigma0_chol)
    elif spec.pooling == UNPOOLED:
        for sl in layout.theta_slices:
            total += mvn_term(p[sl], mu0, layout._sigma0_chol)
    else:
        z_sd = p[layout.sd_slice]
        sigma0 = np.exp(z_sd)
        if not np.all(np.isfinite(sigma0)):
            raise ValueError("sigma0 overflow")
        total += float(np.sum(exponential_unconstrained_logpdf(z_sd, priors.lam)))
        L_corr, corr_jac = corr_chol_from_unconstrained(p[layout.corr_slice], 5)
        total += lkj_chol_logdensity(L_corr, priors.eta) + corr_jac
        chol_sigma = sigma0[:, None] * L_corr
        pop = p[layout.pop_slice]
        total += mvn_term(pop, mu0, chol_sigma)
        for sl in layout.theta_slices:
            total += mvn_term(p[sl], pop, chol_sigma)

    total += float(normal_logpdf(p[layout.sigma_eps_index], priors.mu_eps, priors.sigma1))
    if spec.noise_model == MAIDM:
        total += float(normal_logpdf(p[layout.sigma_k_index], priors.mu_k, priors.sigma2))
        total += float(normal_logpdf(p[layout.ell_index], priors.mu_ell, priors.sigma_ell))
    return total


def one_step_speed_mean(ep: Episode, theta: IdmParams) -> np.ndarray:
    """Teacher-forced next-step speed: observed speed plus IDM acceleration * dt."""
    inp = CfInput(s=ep.s[:-1], v=ep.v[:-1], dv=ep.dv[:-1])
    return ep.v[:-1] + idm_acceleration(inp, theta) * ep.dt


def _sigma_value(sigma) -> float:
    return sigma.sigma_eps if isinstance(sigma, NoiseScale) else float(sigma)


def loglik_bidm(theta: IdmParams, sigma_eps, ep: Episode) -> float:
    """One-step-ahead iid Gaussian speed likelihood, conditioned on observed inputs."""
    sd = _sigma_value(sigma_eps) * ep.dt
    r = ep.v[1:] - one_step_speed_mean(ep, theta)
    n = r.size
    return float(-0.5 * np.sum((r / sd) ** 2) - n * np.log(sd) - 0.5 * n * LOG2PI)


class CovCache:
    """Thread-safe LRU of factored speed covariances keyed on the noise scales.

    The squared-exponential kernel is stationary and episodes are uniform, so
    (sigma_k, ell, sigma_eps, dt, n) determines the matrix. Narrow-band
    kernels (short lengthscale relative to the horizon) get the banded
    factorization, everything else the dense route.
    """

    def __init__(self, maxsize: int = 32):
        self.maxsize = maxsize
        self._store: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def speed_cov(self, sigma_k: float, ell: float, sigma_eps: float, dt: float, n: int):
        key = (sigma_k, ell, sigma_eps, dt, n)
        with self._lock:
            if key in self._store:
                self._store.move_to_end(key)
                return self._store[key]
        hyper = KernelHyper(sigma_k=sigma_k, ell=ell)
        noise = NoiseScale(sigma_eps)
        cov = assemble_speed_cov_banded(n, dt, hyper, noise)
        if cov is None:
            cov = assemble_speed_cov(gram(np.arange(n) * dt, hyper), noise, dt)
            cov.chol  # factor before publishing
        with self._lock:
            self._store[key] = cov
            if len(self._store) > self.maxsize:
                self._store.popitem(last=False)
        return cov


def loglik_maidm(
    theta: IdmParams,
    sigma_eps,
    hyper: KernelHyper,
    ep: Episode,
    cache: CovCache | None = None,
) -> float:
    """One-step-ahead multivariate normal speed likelihood with GP memory."""
    sigma = _sigma_value(sigma_eps)
    mean = one_step_speed_mean(ep, theta)
    if cache is not None:
        cov = cache.speed_cov(hyper.sigma_k, hyper.ell, sigma, ep.dt, ep.n - 1)
    else:
        K = gram(ep.t[:-1], hyper)
        cov = assemble_speed_cov(K, NoiseScale(sigma), ep.dt)
    return mvn_logpdf(ep.v[1:], mean, cov)


class LogPosterior:
    """Callable log posterior over the unconstrained vector for fixed data.

    Non-finite evaluations return -inf and are tallied in `rejections` by
    cause; the sampler treats them as ordinary rejections.
    """

    def __init__(self, spec: ModelSpec, episodes: list[Episode]):
        if len(episodes) != spec.num_drivers:
            raise ValueError(
                f"got {len(episodes)} episodes for num_drivers={spec.num_drivers}"
            )
        self.spec = spec
        self.episodes = list(episodes)
        self.layout = ParamLayout(spec, driver_labels=[ep.driver_id for ep in episodes])
        self.cache = CovCache()
        self.rejections: Counter = Counter()

    def __call__(self, p: np.ndarray) -> float:
        layout = self.layout
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                total = log_prior(p, self.spec, layout)
                if not np.isfinite(total):
                    self.rejections["prior"] += 1
                    return -np.inf
                sigma_eps, sigma_k, ell = layout.noise_values(p)
                if self.spec.noise_model == MAIDM:
                    hyper = KernelHyper(sigma_k=sigma_k, ell=ell)
                for d, ep in enumerate(self.episodes):
                    theta = layout.theta_params(p, d)
                    if self.spec.noise_model == BIDM:
                        total += loglik_bidm(theta, sigma_eps, ep)
                    else:
                        total += loglik_maidm(theta, sigma_eps, hyper, ep, cache=self.cache)
                if not np.isfinite(total):
                    self.rejections["likelihood"] += 1
                    return -np.inf
                return float(total)
        except FactorizationError:
            self.rejections["factorization"] += 1
            return -np.inf
        except (ValueError, OverflowError):
            self.rejections["invalid"] += 1
            return -np.inf


def log_posterior(p: np.ndarray, spec: ModelSpec, episodes: list[Episode]) -> float:
    """One-shot evaluation; build a LogPosterior instance for repeated use."""
    return LogPosterior(spec, episodes)(p)
