"""Deterministic and stochastic car-following simulation.

Single-pair rollouts run all replicates in lockstep as vectors, so parameter
ensembles drawn from a posterior cost one pass over the horizon. Ring-road
simulation steps every vehicle synchronously from the previous state. GP
residual paths are drawn once per replicate at initialization (exact Cholesky
on short horizons, spectral features on long ones, via gp.sample_gp_path).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .episodes import Episode, LeaderTrack
from .gp import KernelHyper, sample_gp_path, sample_gp_paths_uniform
from .idm import IdmParams, KinematicState, _accel_raw
from .mcmc import PosteriorSamples

DETERMINISTIC = "deterministic"
STOCH_BIDM = "stoch_bidm"
STOCH_MAIDM = "stoch_maidm"
MODES = (DETERMINISTIC, STOCH_BIDM, STOCH_MAIDM)

ENVELOPE_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
ENVELOPE_COLUMNS = ("q025", "q25", "q50", "q75", "q975")
SIM_CHANNELS = ("a", "v", "s", "x")


@dataclass
class SimConfig:
    """Replicate count, horizon, seed, and optional noise overrides."""

    mode: str = DETERMINISTIC
    n_replicates: int = 1
    horizon: float | None = None  # seconds; None -> full leader track
    seed: int = 0
    sigma_eps: float | None = None
    sigma_k: float | None = None
    ell: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")


@dataclass
class SimOutput:
    """Replicate trajectories on the leader grid, with collision flags."""

    t: np.ndarray
    a: np.ndarray  # (replicates, T)
    v: np.ndarray
    s: np.ndarray
    x: np.ndarray
    collisions: list = field(default_factory=list)  # (replicate, step)
    provenance: dict = field(default_factory=dict)

    @property
    def n_replicates(self) -> int:
        return self.a.shape[0]

    def channel(self, name: str) -> np.ndarray:
        if name not in SIM_CHANNELS:
            raise KeyError(f"unknown channel {name!r}; have {SIM_CHANNELS}")
        return getattr(self, name)

    def quantile_envelope(self, qs=ENVELOPE_QUANTILES) -> dict:
        return {ch: np.quantile(self.channel(ch), qs, axis=0) for ch in SIM_CHANNELS}


@dataclass
class ParameterSets:
    """Joint posterior draws of (theta, sigma_eps[, sigma_k, ell]) by row."""

    theta: np.ndarray  # (n, 5)
    sigma_eps: np.ndarray  # (n,)
    sigma_k: np.ndarray | None = None
    ell: np.ndarray | None = None
    indices: np.ndarray | None = None  # source rows in the flattened draws

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def idm_params(self, delta: float = 4.0, s1: float = 0.0) -> IdmParams:
        return IdmParams.from_theta(self.theta.T, delta=delta, s1=s1)

    def as_tuples(self) -> list:
        out = []
        for i in range(self.n):
            row = (self.theta[i].copy(), float(self.sigma_eps[i]))
            if self.sigma_k is not None:
                row += (float(self.sigma_k[i]), float(self.ell[i]))
            out.append(row)
        return out


def sample_parameter_sets(
    samples: PosteriorSamples, n: int, seed, driver: str | None = None
) -> ParameterSets:
    """Draw n joint parameter rows with replacement from pooled post-warmup draws.

    Rows are sampled whole to preserve posterior correlations. `driver`
    selects per-driver theta columns like "v0[<driver>]"; None uses the plain
    pooled names.
    """
    flat = samples.flat()
    if flat.shape[0] == 0:
        raise ValueError("posterior samples are empty")
    if n < 1:
        raise ValueError("n must be >= 1")

    def col(name: str, required: bool = True) -> np.ndarray | None:
        if name in samples.names:
            return flat[:, samples.names.index(name)]
        if required:
            raise ValueError(f"draws are missing column {name!r}; have {samples.names}")
        return None

    suffix = "" if driver is None else f"[{driver}]"
    theta_cols = [col(f"{b}{suffix}") for b in ("v0", "s0", "T", "alpha", "beta")]
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, flat.shape[0], size=n)
    sigma_k = col("sigma_k", required=False)
    ell = col("ell", required=False)
    return ParameterSets(
        theta=np.stack(theta_cols, axis=1)[rows],
        sigma_eps=col("sigma_eps")[rows],
        sigma_k=None if sigma_k is None else sigma_k[rows],
        ell=None if ell is None else ell[rows],
        indices=rows,
    )


def _as_leader(leader) -> LeaderTrack:
    if isinstance(leader, Episode):
        return leader.leader_track()
    if isinstance(leader, LeaderTrack):
        return leader
    raise TypeError(f"leader must be an Episode or LeaderTrack, got {type(leader)!r}")


def _clip_horizon(track: LeaderTrack, horizon: float | None) -> LeaderTrack:
    if horizon is None:
        return track
    n = int(round(horizon / track.dt)) + 1
    if n < 2 or n > track.t.size:
        raise ValueError(
            f"horizon {horizon} s needs {n} samples, leader has {track.t.size}"
        )
    return LeaderTrack(t=track.t[:n], x=track.x[:n], v=track.v[:n], length=track.length)


def _ensemble_rollout(
    track: LeaderTrack,
    init: KinematicState,
    params: IdmParams,
    n_replicates: int,
    extra_accel: np.ndarray | None,
    eps_sd,
    rng: np.random.Generator | None,
    provenance: dict,
) -> SimOutput:
    n = track.t.size
    dt = track.dt
    shape = (n_replicates, n)
    x = np.empty(shape)
    v = np.empty(shape)
    a = np.zeros(shape)
    s = np.empty(shape)
    x[:, 0] = init.x
    v[:, 0] = init.v
    active = np.ones(n_replicates, dtype=bool)
    collisions: list = []
    draw_noise = rng is not None and np.any(np.asarray(eps_sd) > 0)
    for i in range(n):
        gap = track.x[i] - x[:, i] - track.length
        s[:, i] = gap
        newly = active & (gap <= 0.0)
        if np.any(newly):
            collisions.extend((int(r), i) for r in np.flatnonzero(newly))
            active &= ~newly
            v[newly, i] = 0.0
        safe_gap = np.where(active, gap, 1.0)
        accel = _accel_raw(safe_gap, v[:, i], v[:, i] - track.v[i], params)
        if extra_accel is not None and i < n - 1:
            accel = accel + extra_accel[:, i]
        if draw_noise and i < n - 1:
            accel = accel + np.asarray(eps_sd) * rng.normal(size=n_replicates)
        accel = np.where(active, accel, 0.0)
        a[:, i] = accel
        if i + 1 < n:
            v_next = np.maximum(0.0, v[:, i] + accel * dt)
            x[:, i + 1] = x[:, i] + 0.5 * (v[:, i] + v_next) * dt
            v[:, i + 1] = v_next
    return SimOutput(
        t=track.t.copy(), a=a, v=v, s=s, x=x, collisions=collisions, provenance=provenance
    )


def simulate_deterministic(theta: IdmParams, leader, init=None, cfg: SimConfig | None = None) -> SimOutput:
    """Noise-free rollout; theta fields may be per-replicate arrays."""
    cfg = cfg or SimConfig()
    track = _clip_horizon(_as_leader(leader), cfg.horizon)
    init = init or (leader.initial_state() if isinstance(leader, Episode) else None)
    if init is None:
        raise ValueError("init state required when leader is not an Episode")
    # one replicate per parameter set; a scalar theta needs a single pass
    n_rep = np.asarray(theta.v0).size if np.ndim(theta.v0) > 0 else 1
    return _ensemble_rollout(
        track,
        init,
        theta,
        n_rep,
        None,
        0.0,
        None,
        {"mode": DETERMINISTIC, "seed": None},
    )


def simulate_stochastic_bidm(
    theta: IdmParams, sigma_eps, leader, init=None, cfg: SimConfig | None = None
) -> SimOutput:
    """Per-step iid Gaussian acceleration noise around the IDM response."""
    cfg = cfg or SimConfig(mode=STOCH_BIDM)
    track = _clip_horizon(_as_leader(leader), cfg.horizon)
    init = init or (leader.initial_state() if isinstance(leader, Episode) else None)
    if init is None:
        raise ValueError("init state required when leader is not an Episode")
    rng = np.random.default_rng(cfg.seed)
    return _ensemble_rollout(
        track,
        init,
        theta,
        cfg.n_replicates,
        None,
        sigma_eps,
        rng,
        {"mode": STOCH_BIDM, "seed": cfg.seed},
    )


def _batch_gp_paths(times: np.ndarray, sigma_k, ell, n_replicates: int, rng) -> np.ndarray:
    """(n_replicates, len(times)) GP draws, factoring once per distinct hyper pair."""
    sigma_k = np.broadcast_to(np.asarray(sigma_k, dtype=float), (n_replicates,))
    ell = np.broadcast_to(np.asarray(ell, dtype=float), (n_replicates,))
    paths = np.empty((n_replicates, times.size))
    if times.size > 2000:
        for r in range(n_replicates):
            if sigma_k[r] <= 0:
                paths[r] = 0.0
            else:
                paths[r] = sample_gp_path(times, KernelHyper(sigma_k[r], ell[r]), rng)
        return paths
    pairs = np.stack([sigma_k, ell], axis=1)
    uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
    for u, (sk, el) in enumerate(uniq):
        members = np.flatnonzero(inverse == u)
        if sk <= 0:
            paths[members] = 0.0
            continue
        paths[members] = sample_gp_paths_uniform(
            times, KernelHyper(float(sk), float(el)), members.size, rng
        )
    return paths


def simulate_stochastic_maidm(
    theta: IdmParams,
    sigma_eps,
    hyper,
    leader,
    init=None,
    cfg: SimConfig | None = None,
    gp_paths: np.ndarray | None = None,
) -> SimOutput:
    """GP residual path per replicate (drawn once over the horizon) plus iid noise.

    `hyper` is a KernelHyper or a (sigma_k, ell) pair of scalars/arrays;
    `gp_paths` overrides the drawn paths (testing hook).
    """
    cfg = cfg or SimConfig(mode=STOCH_MAIDM)
    track = _clip_horizon(_as_leader(leader), cfg.horizon)
    init = init or (leader.initial_state() if isinstance(leader, Episode) else None)
    if init is None:
        raise ValueError("init state required when leader is not an Episode")
    if isinstance(hyper, KernelHyper):
        sigma_k, ell = hyper.sigma_k, hyper.ell
    else:
        sigma_k, ell = hyper
    rng = np.random.default_rng(cfg.seed)
    n = track.t.size
    if gp_paths is None:
        if np.any(np.asarray(sigma_k) > 0):
            gp_paths = _batch_gp_paths(track.t[:-1], sigma_k, ell, cfg.n_replicates, rng)
        # an all-zero scale leaves the GP forcing out entirely
    elif gp_paths.shape != (cfg.n_replicates, n - 1):
        raise ValueError(f"gp_paths must have shape {(cfg.n_replicates, n - 1)}")
    return _ensemble_rollout(
        track,
        init,
        theta,
        cfg.n_replicates,
        gp_paths,
        sigma_eps,
        rng,
        {"mode": STOCH_MAIDM, "seed": cfg.seed},
    )


@dataclass
class RingConfig:
    """Closed single-lane loop geometry and horizon."""

    radius: float = 128.0
    num_vehicles: int = 37
    initial_speed: float = 11.6
    duration: float = 3000.0
    dt: float = 0.5
    vehicle_length: float = 5.0

    def __post_init__(self):
        for name in ("radius", "duration", "dt", "vehicle_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_vehicles < 1 or self.initial_speed < 0:
            raise ValueError("need num_vehicles >= 1 and initial_speed >= 0")
        if self.num_vehicles * self.vehicle_length >= self.circumference:
            raise ValueError("ring is overfilled: vehicles do not fit on the circumference")

    @property
    def circumference(self) -> float:
        return 2.0 * np.pi * self.radius

    @property
    def num_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass
class RingOutput:
    """Wrapped positions and speeds per vehicle over the ring horizon."""

    t: np.ndarray
    x: np.ndarray  # (vehicles, T) in [0, circumference)
    v: np.ndarray
    circumference: float
    vehicle_length: float
    collisions: list = field(default_factory=list)  # (vehicle, step)
    provenance: dict = field(default_factory=dict)

    @property
    def num_vehicles(self) -> int:
        return self.x.shape[0]

    def gaps(self) -> np.ndarray:
        if self.num_vehicles == 1:
            return np.full_like(self.x, self.circumference - self.vehicle_length)
        lead = np.roll(self.x, -1, axis=0)
        return (lead - self.x) % self.circumference - self.vehicle_length


def ring_simulate(
    cfg: RingConfig,
    theta: IdmParams,
    mode: str = DETERMINISTIC,
    sigma_eps: float = 0.0,
    hyper: KernelHyper | None = None,
    seed: int = 0,
) -> RingOutput:
    """Multi-vehicle simulation on a periodic track with synchronous updates.

    theta fields may be scalars (homogeneous) or per-vehicle arrays
    (heterogeneous, e.g. one posterior draw per vehicle). In the GP mode each
    vehicle gets its own residual path over the full horizon. Non-positive
    gaps are flagged per vehicle and clamped for the acceleration evaluation
    rather than aborting the run.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == STOCH_MAIDM and hyper is None:
        raise ValueError("stoch_maidm needs kernel hyperparameters")
    V = cfg.num_vehicles
    n_steps = cfg.num_steps
    C = cfg.circumference
    t = np.arange(n_steps + 1) * cfg.dt
    x = np.empty((V, n_steps + 1))
    v = np.empty((V, n_steps + 1))
    x[:, 0] = np.arange(V) * (C / V)
    v[:, 0] = cfg.initial_speed
    rng = np.random.default_rng(seed)
    gp_paths = None
    if mode == STOCH_MAIDM:
        seeds = np.random.SeedSequence(seed).spawn(V + 1)
        rng = np.random.default_rng(seeds[0])
        gp_paths = np.stack(
            [sample_gp_path(t[:-1], hyper, np.random.default_rng(seeds[i + 1])) for i in range(V)]
        )
    collisions: list = []
    for i in range(n_steps):
        xi = x[:, i]
        vi = v[:, i]
        if V == 1:
            gap = np.array([C - cfg.vehicle_length])  # own tail a full lap ahead
        else:
            gap = (np.roll(xi, -1) - xi) % C - cfg.vehicle_length
        bad = gap <= 0.0
        if np.any(bad):
            collisions.extend((int(j), i) for j in np.flatnonzero(bad))
            gap = np.where(bad, 0.01, gap)
        accel = _accel_raw(gap, vi, vi - np.roll(vi, -1), theta)
        if gp_paths is not None:
            accel = accel + gp_paths[:, i]
        if mode in (STOCH_BIDM, STOCH_MAIDM) and sigma_eps > 0:
            accel = accel + sigma_eps * rng.normal(size=V)
        v_next = np.maximum(0.0, vi + accel * cfg.dt)
        x[:, i + 1] = (xi + 0.5 * (vi + v_next) * cfg.dt) % C
        v[:, i + 1] = v_next
    return RingOutput(
        t=t,
        x=x,
        v=v,
        circumference=C,
        vehicle_length=cfg.vehicle_length,
        collisions=collisions,
        provenance={"mode": mode, "seed": seed},
    )


def fundamental_diagram(out: RingOutput, window: float = 60.0, segments: int = 8) -> pd.DataFrame:
    """Edie aggregation over ring-segment x time-window cells.

    Returns density (veh/km), flow (veh/h), and speed (m/s) per non-empty
    cell; within a step the motion is attributed at the step-average speed.
    """
    if window <= 0 or segments < 1:
        raise ValueError("window must be positive and segments >= 1")
    C = out.circumference
    seg_len = C / segments
    n_windows = int(np.floor((out.t[-1] - out.t[0]) / window + 1e-9))
    if n_windows < 1:
        raise ValueError("window longer than the simulated horizon")
    time_spent = np.zeros((n_windows, segments))
    dist_run = np.zeros((n_windows, segments))
    dt = float(out.t[1] - out.t[0])
    for i in range(out.t.size - 1):
        w = int(np.floor((out.t[i] - out.t[0]) / window + 1e-9))
        if w >= n_windows:
            break
        for j in range(out.num_vehicles):
            pos = out.x[j, i]
            d = (out.x[j, i + 1] - pos) % C
            if d == 0.0:
                time_spent[w, int(pos // seg_len) % segments] += dt
                continue
            # split [pos, pos + d] across segment boundaries in unwrapped
            # coordinates; the index modulo handles the wrap
            end = pos + d
            for k in range(int(pos // seg_len), int(end // seg_len) + 1):
                sub = min(end, (k + 1) * seg_len) - max(pos, k * seg_len)
                if sub <= 0.0:
                    continue
                seg = k % segments
                dist_run[w, seg] += sub
                time_spent[w, seg] += dt * sub / d
    rows = []
    area = seg_len * window
    for w in range(n_windows):
        for seg in range(segments):
            T = time_spent[w, seg]
            if T <= 0:
                continue
            D = dist_run[w, seg]
            rows.append(
                {
                    "density": T / area * 1000.0,
                    "flow": D / area * 3600.0,
                    "speed": D / T,
                }
            )
    return pd.DataFrame(rows, columns=["density", "flow", "speed"])


def save_envelope(sim: SimOutput, out_dir) -> list[str]:
    """One CSV per channel: t plus the five envelope quantiles."""
    paths = []
    env = sim.quantile_envelope()
    for ch in SIM_CHANNELS:
        path = os.path.join(out_dir, f"envelope_{ch}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t," + ",".join(ENVELOPE_COLUMNS) + "\n")
            for i in range(sim.t.size):
                vals = ",".join(f"{env[ch][q, i]:.15g}" for q in range(len(ENVELOPE_QUANTILES)))
                fh.write(f"{sim.t[i]:.15g},{vals}\n")
        paths.append(path)
    return paths


def save_replicates(sim: SimOutput, out_dir) -> list[str]:
    """One CSV per replicate with header t,a,v,s,x."""
    paths = []
    for r in range(sim.n_replicates):
        path = os.path.join(out_dir, f"rep_{r:05d}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,a,v,s,x\n")
            for i in range(sim.t.size):
                fh.write(
                    f"{sim.t[i]:.15g},{sim.a[r, i]:.15g},{sim.v[r, i]:.15g},"
                    f"{sim.s[r, i]:.15g},{sim.x[r, i]:.15g}\n"
                )
        paths.append(path)
    return paths


def load_replicates(rep_dir) -> SimOutput:
    """Rebuild a SimOutput from a directory of rep_*.csv files."""
    files = sorted(
        f for f in os.listdir(rep_dir) if f.startswith("rep_") and f.endswith(".csv")
    )
    if not files:
        raise ValueError(f"no replicate files found in {rep_dir}")
    cols = {ch: [] for ch in SIM_CHANNELS}
    t = None
    for name in files:
        df = pd.read_csv(os.path.join(rep_dir, name))
        missing = [c for c in ("t", *SIM_CHANNELS) if c not in df.columns]
        if missing:
            raise ValueError(f"{name}: missing channel columns {missing}")
        if t is None:
            t = df["t"].to_numpy()
        elif not np.array_equal(t, df["t"].to_numpy()):
            raise ValueError(f"{name}: time grid differs from the first replicate")
        for ch in SIM_CHANNELS:
            cols[ch].append(df[ch].to_numpy())
    return SimOutput(
        t=t,
        a=np.stack(cols["a"]),
        v=np.stack(cols["v"]),
        s=np.stack(cols["s"]),
        x=np.stack(cols["x"]),
        provenance={"source": str(rep_dir)},
    )


def save_ring_csv(out: RingOutput, path) -> None:
    """Long-format ring trajectories: t,vehicle,x,v."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,vehicle,x,v\n")
        for i in range(out.t.size):
            for j in range(out.num_vehicles):
                fh.write(f"{out.t[i]:.15g},{j},{out.x[j, i]:.15g},{out.v[j, i]:.15g}\n")
