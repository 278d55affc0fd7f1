"""General-purpose MCMC over a supplied log posterior.

The default sampler is block-adaptive random-walk Metropolis: per-block
proposal covariances and scales adapt during warmup only and are frozen
afterwards, preserving detailed balance over the recorded draws. An optional
Hamiltonian mode uses central finite-difference gradients for targets without
analytic derivatives. Chains use independent generators spawned from the
master seed via numpy's SeedSequence.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import ndtri

from .idm import THETA_NAMES


class DiagnosticError(RuntimeError):
    """Sampler produced chains that fail a hard quality gate."""


@dataclass
class SamplerConfig:
    num_chains: int = 4
    warmup_steps: int = 5000
    draw_steps: int = 5000
    target_accept: float | None = None  # default 0.234 for rwm, 0.8 for hmc
    seed: int = 0
    algorithm: str = "rwm"
    blocks: list | None = None  # index arrays; None -> one block over all dims
    cov_update_interval: int = 100  # first adaptation window length
    hmc_leapfrog_steps: int = 10
    fd_step: float = 1e-5  # relative central-difference step for hmc gradients

    def __post_init__(self):
        if self.num_chains < 2:
            raise ValueError("num_chains must be >= 2")
        if self.warmup_steps < 1 or self.draw_steps < 1:
            raise ValueError("warmup_steps and draw_steps must be >= 1")
        if self.algorithm not in ("rwm", "hmc"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.target_accept is None:
            self.target_accept = 0.234 if self.algorithm == "rwm" else 0.8


@dataclass
class PosteriorSamples:
    """Labeled constrained-space draws: (chains, draws, parameters)."""

    names: list[str]
    draws: np.ndarray
    acceptance: np.ndarray | None = None  # (chains, blocks)
    seed: int | None = None
    proposal_hash: str | None = None

    def __post_init__(self):
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise ValueError("draws must be (chains, draws, len(names))")

    @property
    def num_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def num_draws(self) -> int:
        return self.draws.shape[1]

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def column(self, name: str) -> np.ndarray:
        return self.flat()[:, self.names.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["chain", "draw", *self.names])
            for c in range(self.num_chains):
                for d in range(self.num_draws):
                    writer.writerow(
                        [c, d, *(f"{x:.17g}" for x in self.draws[c, d])]
                    )

    @classmethod
    def from_csv(cls, path) -> "PosteriorSamples":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[:2] != ["chain", "draw"]:
                raise ValueError(f"{path}: not a draws file (header {header!r})")
            names = header[2:]
            rows = [(int(r[0]), [float(x) for x in r[2:]]) for r in reader if r]
        if not rows:
            raise ValueError(f"{path}: no draws")
        chains = sorted({c for c, _ in rows})
        per_chain = [np.array([v for c, v in rows if c == ci]) for ci in chains]
        if len({a.shape for a in per_chain}) != 1:
            raise ValueError(f"{path}: ragged chains")
        return cls(names=names, draws=np.stack(per_chain))


class _BlockProposal:
    """Scaled multivariate normal proposal with warmup-only windowed adaptation.

    The proposal scale follows a capped Robbins-Monro recursion toward the
    target acceptance throughout warmup. The proposal covariance is refreshed
    from doubling windows of recent warmup states (never the early transient),
    so a refresh is never computed from pre-convergence history; any trailing
    partial window is ignored.
    """

    def __init__(self, idx: np.ndarray, target_accept: float, warmup_steps: int, first_window: int = 100):
        self.idx = idx
        d = idx.size
        self.target = target_accept
        self.log_scale = 0.0
        self.chol = 0.1 * np.eye(d)
        w0 = max(first_window, 5 * d)
        # doubling windows after a scale-only phase; the final window is
        # stretched to end exactly at warmup so the frozen covariance comes
        # from the latest (post-transit) stretch of the chain
        boundaries = []
        pos, w = w0, w0
        while pos + w < warmup_steps:
            boundaries.append(pos + w)
            pos += w
            w *= 2
        if boundaries:
            boundaries[-1] = warmup_steps
        elif warmup_steps > 2 * w0:
            boundaries = [warmup_steps]
        self._window_start = w0
        self._boundaries = boundaries
        self._count = 0
        self._mean = np.zeros(d)
        self._m2 = np.zeros((d, d))

    def propose(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = x.copy()
        out[self.idx] += np.exp(self.log_scale) * (self.chol @ rng.normal(size=self.idx.size))
        return out

    def observe(self, x_block: np.ndarray, accept_prob: float, iteration: int):
        rate = min(0.15, (iteration + 10.0) ** -0.6)
        self.log_scale += rate * (accept_prob - self.target)
        if iteration < self._window_start or not self._boundaries:
            return
        self._count += 1
        delta = x_block - self._mean
        self._mean += delta / self._count
        self._m2 += np.outer(delta, x_block - self._mean)
        if iteration + 1 == self._boundaries[0]:
            d = self.idx.size
            if self._count >= max(20, 5 * d):
                cov = self._m2 / (self._count - 1)
                ridge = max(1e-12, 1e-6 * float(np.mean(np.diag(cov))))
                cov = (2.38**2 / d) * cov + ridge * np.eye(d)
                try:
                    self.chol = np.linalg.cholesky(cov)
                    self.log_scale = 0.0
                except np.linalg.LinAlgError:
                    pass  # keep previous factor until the window improves
            self._count = 0
            self._mean[:] = 0.0
            self._m2[:] = 0.0
            self._boundaries.pop(0)

    def state_bytes(self) -> bytes:
        return self.chol.tobytes() + np.float64(self.log_scale).tobytes()


def _fd_gradient(logpost, x: np.ndarray, lp_x: float, rel_step: float) -> np.ndarray:
    grad = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (logpost(xp) - logpost(xm)) / (2.0 * h)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite finite-difference gradient")
    return grad


def _run_chain_rwm(logpost, x0, cfg: SamplerConfig, blocks, rng, record):
    x = np.asarray(x0, dtype=float).copy()
    lp = logpost(x)
    if not np.isfinite(lp):
        raise ValueError("log posterior not finite at the initial point")
    proposals = [
        _BlockProposal(idx, cfg.target_accept, first_window=cfg.cov_update_interval)
        for idx in blocks
    ]
    accept_counts = np.zeros(len(blocks))
    for it in range(cfg.warmup_steps + cfg.draw_steps):
        warming = it < cfg.warmup_steps
        for b, prop in enumerate(proposals):
            x_new = prop.propose(x, rng)
            lp_new = logpost(x_new)
            log_r = lp_new - lp
            accept_prob = float(np.exp(min(0.0, log_r))) if np.isfinite(lp_new) else 0.0
            accepted = rng.uniform() < accept_prob
            if accepted:
                x, lp = x_new, lp_new
            if warming:
                prop.observe(x[prop.idx], accept_prob, it)
            else:
                accept_counts[b] += accepted
        if it == cfg.warmup_steps - 1:
            frozen = hashlib.sha256(b"".join(p.state_bytes() for p in proposals)).hexdigest()
        if not warming:
            record(x)
    post_hash = hashlib.sha256(b"".join(p.state_bytes() for p in proposals)).hexdigest()
    if cfg.warmup_steps > 0 and post_hash != frozen:
        raise AssertionError("proposal adapted after warmup freeze")
    return accept_counts, post_hash


def _run_chain_hmc(logpost, x0, cfg: SamplerConfig, rng, record):
    x = np.asarray(x0, dtype=float).copy()
    lp = logpost(x)
    if not np.isfinite(lp):
        raise ValueError("log posterior not finite at the initial point")
    dim = x.size
    step = 0.1
    mass = np.ones(dim)
    history = []
    accepted = 0.0
    total = 0
    for it in range(cfg.warmup_steps + cfg.draw_steps):
        warming = it < cfg.warmup_steps
        p0 = rng.normal(size=dim) * np.sqrt(mass)
        xq = x.copy()
        try:
            grad = _fd_gradient(logpost, xq, lp, cfg.fd_step)
            pq = p0 + 0.5 * step * grad
            for _ in range(cfg.hmc_leapfrog_steps):
                xq = xq + step * pq / mass
                lpq = logpost(xq)
                grad = _fd_gradient(logpost, xq, lpq, cfg.fd_step)
                pq = pq + step * grad
            pq -= 0.5 * step * grad
            lpq = logpost(xq)
            log_r = (lpq - lp) - 0.5 * float(pq @ (pq / mass) - p0 @ (p0 / mass))
            accept_prob = float(np.exp(min(0.0, log_r))) if np.isfinite(lpq) else 0.0
        except FloatingPointError:
            accept_prob = 0.0
        if rng.uniform() < accept_prob:
            x, lp = xq, lpq
        if warming:
            step *= np.exp((accept_prob - cfg.target_accept) / (it + 1) ** 0.6)
            history.append(x.copy())
            if len(history) > 100 and it % cfg.cov_update_interval == 0:
                var = np.var(np.asarray(history), axis=0)
                mass = 1.0 / np.maximum(var, 1e-12)
        else:
            accepted += accept_prob
            total += 1
            record(x)
    return np.array([accepted / max(total, 1)]), hashlib.sha256(
        np.float64(step).tobytes() + mass.tobytes()
    ).hexdigest()


def run_chains(
    logpost,
    inits: list[np.ndarray],
    cfg: SamplerConfig,
    names: list[str] | None = None,
    constrain=None,
) -> PosteriorSamples:
    """Run `cfg.num_chains` chains and collect constrained draws.

    `inits` supplies one unconstrained start per chain; `constrain` maps an
    unconstrained vector to the stored (named) values, identity when omitted.
    """
    if len(inits) != cfg.num_chains:
        raise ValueError("need one init per chain")
    dim = np.asarray(inits[0]).size
    if cfg.blocks is None:
        blocks = [np.arange(dim)]
    else:
        blocks = [np.asarray(b, dtype=int) for b in cfg.blocks]
        flat = np.concatenate(blocks) if blocks else np.array([], dtype=int)
        if flat.size != np.unique(flat).size:
            raise ValueError("blocks must not overlap")
        if flat.size and (flat.min() < 0 or flat.max() >= dim):
            raise ValueError("block index out of range")
    if constrain is None:
        constrain = lambda x: x
    if names is None:
        names = [f"x{i}" for i in range(dim)]

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_chains)
    all_draws = []
    acceptance = []
    prop_hash = None
    for c in range(cfg.num_chains):
        rng = np.random.default_rng(seeds[c])
        chain_draws = np.empty((cfg.draw_steps, len(names)))
        counter = {"i": 0}

        def record(x):
            chain_draws[counter["i"]] = constrain(x)
            counter["i"] += 1

        if cfg.algorithm == "rwm":
            counts, prop_hash = _run_chain_rwm(logpost, inits[c], cfg, blocks, rng, record)
            rates = counts / cfg.draw_steps
        else:
            rates, prop_hash = _run_chain_hmc(logpost, inits[c], cfg, rng, record)
        acceptance.append(rates)
        all_draws.append(chain_draws)
        if np.any(rates < 0.01):
            bad = int(np.argmin(rates))
            raise DiagnosticError(
                f"chain {c}: block {bad} acceptance {rates[bad]:.4f} < 0.01 after warmup"
            )
    draws = np.stack(all_draws)
    if not np.all(np.isfinite(draws)):
        raise DiagnosticError("chains contain non-finite draws")
    return PosteriorSamples(
        names=list(names),
        draws=draws,
        acceptance=np.asarray(acceptance),
        seed=cfg.seed,
        proposal_hash=prop_hash,
    )


def _split_chains(x: np.ndarray) -> np.ndarray:
    """(chains, draws) -> (2*chains, draws//2), dropping an odd trailing draw."""
    c, n = x.shape
    half = n // 2
    return np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    from scipy.stats import rankdata

    flat = x.reshape(-1)
    ranks = rankdata(flat, method="average")
    z = ndtri((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(x.shape)


def _basic_rhat(x: np.ndarray) -> float:
    m, n = x.shape
    chain_means = x.mean(axis=1)
    chain_vars = x.var(axis=1, ddof=1)
    w = chain_vars.mean()
    b_over_n = chain_means.var(ddof=1)
    if w <= 0:
        return np.nan
    var_plus = (n - 1) / n * w + b_over_n
    return float(np.sqrt(var_plus / w))


def rhat(samples: PosteriorSamples) -> dict[str, float]:
    """Rank-normalized split R-hat per parameter; NaN flags degenerate chains."""
    if samples.num_chains < 2:
        raise ValueError("R-hat needs at least 2 chains")
    if samples.num_draws < 4:
        raise ValueError("R-hat needs at least 4 draws per chain")
    out = {}
    for j, name in enumerate(samples.names):
        x = samples.draws[:, :, j]
        if np.allclose(x.var(axis=1), 0):
            out[name] = np.nan
            continue
        out[name] = _basic_rhat(_rank_normalize(_split_chains(x)))
    return out


def _chain_autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n].real / n
    return acov


def ess(samples: PosteriorSamples) -> dict[str, float]:
    """Bulk effective sample size via Geyer's initial monotone sequence."""
    if samples.num_chains < 2:
        raise ValueError("ESS needs at least 2 chains")
    out = {}
    for j, name in enumerate(samples.names):
        raw = samples.draws[:, :, j]
        if np.allclose(raw.var(axis=1), 0):
            out[name] = np.nan
            continue
        x = _rank_normalize(_split_chains(raw))
        m, n = x.shape
        acov = np.stack([_chain_autocov(x[i]) for i in range(m)])
        chain_var = acov[:, 0] * n / (n - 1)
        w = chain_var.mean()
        var_plus = (n - 1) / n * w + x.mean(axis=1).var(ddof=1)
        rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
        # Geyer initial monotone positive sequence over lag pairs
        tau = -1.0
        prev_pair = np.inf
        t = 0
        while t + 1 < n:
            pair = rho[t] + rho[t + 1]
            if pair <= 0:
                break
            pair = min(pair, prev_pair)
            prev_pair = pair
            tau += 2.0 * pair
            t += 2
        total = samples.num_chains * samples.num_draws
        out[name] = float(min(total, total / max(tau, 1e-3)))
    return out


@dataclass
class Diagnostics:
    """Per-parameter convergence statistics plus degeneracy flags."""

    rhat: dict
    ess: dict
    degenerate: list
    max_rhat: float
    min_ess: float
    rejections: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples: PosteriorSamples, rejections: dict | None = None) -> "Diagnostics":
        r = rhat(samples)
        e = ess(samples)
        degenerate = sorted(k for k in r if not np.isfinite(r[k]))
        finite_r = [v for v in r.values() if np.isfinite(v)]
        finite_e = [v for v in e.values() if np.isfinite(v)]
        return cls(
            rhat=r,
            ess=e,
            degenerate=degenerate,
            max_rhat=max(finite_r) if finite_r else np.nan,
            min_ess=min(finite_e) if finite_e else np.nan,
            rejections=dict(rejections or {}),
        )

    def to_json(self, path) -> None:
        def clean(d):
            return {k: (None if not np.isfinite(v) else float(v)) for k, v in d.items()}

        payload = {
            "rhat": clean(self.rhat),
            "ess": clean(self.ess),
            "degenerate": self.degenerate,
            "max_rhat": None if not np.isfinite(self.max_rhat) else float(self.max_rhat),
            "min_ess": None if not np.isfinite(self.min_ess) else float(self.min_ess),
            "rejections": self.rejections,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class Summary:
    """Posterior summaries plus pairwise theta correlations per driver group."""

    table: pd.DataFrame
    theta_corr: dict

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def summarize(samples: PosteriorSamples) -> Summary:
    flat = samples.flat()
    rows = []
    for j, name in enumerate(samples.names):
        col = flat[:, j]
        rows.append(
            {
                "name": name,
                "mean": float(col.mean()),
                "sd": float(col.std(ddof=0)),
                "q05": float(np.quantile(col, 0.05)),
                "q95": float(np.quantile(col, 0.95)),
            }
        )
    table = pd.DataFrame(rows)

    groups: dict[str, list[str]] = {}
    for name in samples.names:
        for base in THETA_NAMES:
            if name == base:
                groups.setdefault("", []).append(name)
            elif name.startswith(f"{base}["):
                groups.setdefault(name[len(base) + 1 : -1], []).append(name)
            elif name == f"pop_{base}":
                groups.setdefault("population", []).append(name)
    theta_corr = {}
    for label, cols in groups.items():
        if len(cols) == 5:
            mat = np.stack([samples.column(c) for c in cols])
            if np.all(mat.std(axis=1) > 0):
                theta_corr[label] = np.corrcoef(mat)
    return Summary(table=table, theta_corr=theta_corr)
