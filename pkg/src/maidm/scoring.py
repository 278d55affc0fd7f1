"""Simulation scoring: ensemble RMSE, empirical CRPS, residual autocorrelation.

CRPS uses the plug-in empirical-CDF convention (pairwise term divided by N^2).
The exact step-function integral and the energy form are both computed and
cross-asserted on every call.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .episodes import Episode
from .simulate import SimOutput


def rmse_ensemble(sim: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Per-replicate root mean squared deviation over time: (mean, sd) across replicates."""
    sim = np.atleast_2d(np.asarray(sim, dtype=float))
    truth = np.asarray(truth, dtype=float)
    if sim.shape[1] != truth.size:
        raise ValueError(f"grid mismatch: sim has {sim.shape[1]} samples, truth {truth.size}")
    per_rep = np.sqrt(np.mean((sim - truth[None, :]) ** 2, axis=1))
    return float(per_rep.mean()), float(per_rep.std(ddof=0))


def _crps_energy(sorted_x: np.ndarray, y: float) -> float:
    n = sorted_x.size
    e_xy = np.abs(sorted_x - y).mean()
    coeff = 2.0 * np.arange(n) - n + 1.0
    e_xx = 2.0 * np.sum(coeff * sorted_x) / n**2
    return float(e_xy - 0.5 * e_xx)


def _crps_integral(sorted_x: np.ndarray, y: float) -> float:
    n = sorted_x.size
    points = np.unique(np.concatenate([sorted_x, [y]]))
    total = 0.0
    for lo, hi in zip(points[:-1], points[1:]):
        width = hi - lo
        cdf = np.searchsorted(sorted_x, lo, side="right") / n
        ind = 1.0 if lo >= y else 0.0
        total += (cdf - ind) ** 2 * width
    return float(total)


def crps_empirical(ensemble: np.ndarray, y: float) -> float:
    """CRPS of the empirical step CDF against a scalar observation.

    Computed in closed form from sorted values; the equivalent energy form is
    asserted against the integral form on every call.
    """
    ensemble = np.asarray(ensemble, dtype=float).ravel()
    if ensemble.size == 0:
        raise ValueError("ensemble must be non-empty")
    xs = np.sort(ensemble)
    value = _crps_integral(xs, float(y))
    energy = _crps_energy(xs, float(y))
    scale = max(1.0, abs(value))
    if abs(value - energy) > 1e-9 * scale:
        raise AssertionError(f"CRPS forms disagree: integral {value}, energy {energy}")
    return value


def crps_series(
    sim: np.ndarray,
    truth: np.ndarray,
    t: np.ndarray,
    probe_times=(),
) -> tuple[float, dict]:
    """Time-averaged CRPS of the replicate ensemble, plus values at probe times."""
    sim = np.atleast_2d(np.asarray(sim, dtype=float))
    truth = np.asarray(truth, dtype=float)
    t = np.asarray(t, dtype=float)
    if sim.shape[1] != truth.size or truth.size != t.size:
        raise ValueError("sim, truth, and t must share the time grid")
    per_t = np.array([crps_empirical(sim[:, i], truth[i]) for i in range(t.size)])
    probes = {}
    for pt in probe_times:
        idx = int(np.argmin(np.abs(t - pt)))
        if abs(t[idx] - pt) > 0.5 * (t[1] - t[0]) + 1e-9:
            raise ValueError(f"probe time {pt} outside the simulated horizon")
        probes[float(pt)] = float(per_t[idx])
    return float(per_t.mean()), probes


def residual_autocorr(residuals: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags 0..max_lag; NaN for a degenerate series."""
    r = np.asarray(residuals, dtype=float)
    if r.ndim != 1:
        raise ValueError("residuals must be 1-D")
    if r.size <= max_lag + 10:
        raise ValueError(f"series of length {r.size} too short for max_lag={max_lag}")
    rc = r - r.mean()
    denom = float(rc @ rc)
    if denom <= 0:
        return np.full(max_lag + 1, np.nan)
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        out[k] = float(rc[:-k] @ rc[k:]) / denom
    return out


@dataclass
class ScoreReport:
    """Per-channel RMSE and CRPS of a simulation ensemble against truth."""

    rmse: dict = field(default_factory=dict)  # channel -> (mean, sd)
    crps_mean: dict = field(default_factory=dict)  # channel -> time-averaged CRPS
    crps_probes: dict = field(default_factory=dict)  # channel -> {probe_t: value}
    lag1_autocorr: dict = field(default_factory=dict)  # channel -> lag-1 of mean residual

    def to_json(self, path) -> None:
        payload = {
            "rmse": {k: {"mean": v[0], "sd": v[1]} for k, v in self.rmse.items()},
            "crps_mean": self.crps_mean,
            "crps_probes": {k: {f"{t:g}": v for t, v in d.items()} for k, d in self.crps_probes.items()},
            "lag1_autocorr": self.lag1_autocorr,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        """Flat table: one row per channel with RMSE and CRPS columns (SI units)."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("channel,rmse_mean,rmse_sd,crps_mean,crps_probes\n")
            for ch in sorted(set(self.rmse) | set(self.crps_mean)):
                mean, sd = self.rmse.get(ch, (np.nan, np.nan))
                probes = self.crps_probes.get(ch, {})
                probe_str = ";".join(f"{t:g}:{v:.6g}" for t, v in sorted(probes.items()))
                fh.write(
                    f"{ch},{mean:.9g},{sd:.9g},{self.crps_mean.get(ch, np.nan):.9g},{probe_str}\n"
                )


def _truth_channel(truth: Episode, channel: str) -> np.ndarray:
    if channel == "v":
        return truth.v
    if channel == "s":
        return truth.s
    if channel == "x":
        return truth.x
    if channel == "a":
        # observed acceleration by finite difference of the speed channel
        return np.diff(truth.v) / truth.dt
    raise ValueError(f"unknown channel {channel!r}")


def score_simulation(
    sim: SimOutput,
    truth: Episode,
    channels=("a", "v", "s"),
    probe_times=(),
) -> ScoreReport:
    """Score every requested channel of the ensemble against the episode.

    Acceleration is compared on the step grid (first n-1 samples); speed and
    gap on the full grid. Time grids must agree.
    """
    if sim.t.size != truth.n or np.max(np.abs(sim.t - (truth.t - truth.t[0]))) > 1e-6:
        raise ValueError("simulation and truth time grids differ")
    report = ScoreReport()
    for ch in channels:
        y = _truth_channel(truth, ch)
        x = sim.channel(ch)
        tgrid = sim.t
        if ch == "a":
            x = x[:, : truth.n - 1]
            tgrid = sim.t[: truth.n - 1]
        report.rmse[ch] = rmse_ensemble(x, y)
        mean_crps, probes = crps_series(x, y, tgrid, probe_times=[p for p in probe_times if p <= tgrid[-1]])
        report.crps_mean[ch] = mean_crps
        report.crps_probes[ch] = probes
        resid = x.mean(axis=0) - y
        if resid.size > 30:
            report.lag1_autocorr[ch] = float(residual_autocorr(resid, 1)[1])
    return report
