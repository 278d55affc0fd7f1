"""Canonical leader-follower episodes: extraction, resampling, synthesis, CSV I/O.

An Episode is a uniformly sampled pair trajectory with positive gaps
throughout. Gap and approach rate are derived from the stored channels, so the
consistency invariants hold by construction and files are never trusted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .idm import CfInput, IdmParams, KinematicState, equilibrium_gap, idm_acceleration, step
from .gp import KernelHyper, sample_gp_path

VEHICLE_CLASSES = ("car", "truck")

EPISODE_CSV_HEADER = "t,x_follow,v_follow,x_lead,v_lead,leader_length,driver_id,vehicle_class"


class SchemaError(ValueError):
    """An input table or file does not match the expected schema."""


@dataclass(frozen=True)
class Episode:
    """Uniformly sampled leader-follower time series.

    Channels: follower position/speed, leader position/speed; the gap
    s = x_lead - x - leader_length must stay strictly positive.
    """

    driver_id: str
    dt: float
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    x_lead: np.ndarray
    v_lead: np.ndarray
    leader_length: float
    vehicle_class: str = "car"

    def __post_init__(self):
        for name in ("t", "x", "v", "x_lead", "v_lead"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.t.size
        if n < 2:
            raise ValueError("episode needs at least 2 samples")
        for name in ("x", "v", "x_lead", "v_lead"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"channel {name} length mismatch")
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"channel {name} contains non-finite values")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if np.max(np.abs(np.diff(self.t) - self.dt)) > 1e-6:
            raise ValueError("timestamps are not uniform at the declared dt")
        if self.leader_length < 0 or not np.isfinite(self.leader_length):
            raise ValueError(f"bad leader_length {self.leader_length!r}")
        if self.vehicle_class not in VEHICLE_CLASSES:
            raise ValueError(f"vehicle_class must be one of {VEHICLE_CLASSES}")
        if np.min(self.s) <= 0:
            raise ValueError("gap must stay strictly positive over the episode")

    @property
    def s(self) -> np.ndarray:
        return self.x_lead - self.x - self.leader_length

    @property
    def dv(self) -> np.ndarray:
        return self.v - self.v_lead

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def initial_state(self) -> KinematicState:
        return KinematicState(x=float(self.x[0]), v=float(self.v[0]))

    def leader_track(self) -> "LeaderTrack":
        return LeaderTrack(t=self.t, x=self.x_lead, v=self.v_lead, length=self.leader_length)


@dataclass(frozen=True)
class LeaderTrack:
    """Leader channel only, for simulations without recorded follower truth."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    length: float

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])


TRACK_COLUMNS = ("frame", "id", "preceding_id", "x", "v", "length")


def highd_to_tracks(tracks: pd.DataFrame, meta: pd.DataFrame | None = None) -> pd.DataFrame:
    """Map a HighD-style track table onto the canonical column schema.

    Columns frame, id, precedingId, x, xVelocity, width become frame, id,
    preceding_id, x, v, length; vehicle classes come from `meta` (id, class)
    when given. Tracks are assumed longitudinally aligned and
    direction-normalized upstream; no coordinate transform is applied here.
    """
    mapping = {"precedingId": "preceding_id", "xVelocity": "v", "width": "length"}
    missing = [c for c in ("frame", "id", "precedingId", "x", "xVelocity", "width") if c not in tracks.columns]
    if missing:
        raise SchemaError(f"HighD table is missing columns: {missing}")
    out = tracks.rename(columns=mapping)[list(TRACK_COLUMNS)].copy()
    if meta is not None:
        if not {"id", "class"}.issubset(meta.columns):
            raise SchemaError("HighD meta table needs columns: id, class")
        classes = meta.set_index("id")["class"].astype(str).str.lower()
        out["vehicle_class"] = out["id"].map(classes).fillna("car")
    return out


def extract_episodes(tracks: pd.DataFrame, min_duration: float, dt: float) -> list[Episode]:
    """Cut maximal leader-follower intervals of duration >= min_duration.

    Intervals break at leader changes, missing leader frames, frame gaps, and
    non-positive gaps; the duration rule is boundary-inclusive.
    """
    missing = [c for c in TRACK_COLUMNS if c not in tracks.columns]
    if missing:
        raise SchemaError(f"track table is missing columns: {missing}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    by_frame = {}
    for row in tracks.itertuples(index=False):
        by_frame[(int(row.id), int(row.frame))] = (float(row.x), float(row.v), float(row.length))
    has_class = "vehicle_class" in tracks.columns

    episodes: list[Episode] = []

    def close(run: list, fid: int, vclass: str, leader_length: float):
        if len(run) >= 2 and (len(run) - 1) * dt >= min_duration - 1e-9:
            frames = np.array([r[0] for r in run])
            episodes.append(
                Episode(
                    driver_id=str(fid),
                    dt=dt,
                    t=(frames - frames[0]) * dt,
                    x=np.array([r[1] for r in run]),
                    v=np.array([r[2] for r in run]),
                    x_lead=np.array([r[3] for r in run]),
                    v_lead=np.array([r[4] for r in run]),
                    leader_length=leader_length,
                    vehicle_class=vclass,
                )
            )

    for fid, group in tracks.groupby("id", sort=True):
        group = group.sort_values("frame")
        vclass = str(group["vehicle_class"].iloc[0]) if has_class else "car"
        run: list = []
        run_leader = None
        run_length = 0.0
        prev_frame = None
        for row in group.itertuples(index=False):
            frame = int(row.frame)
            lid = int(row.preceding_id)
            valid = False
            if lid > 0 and (lid, frame) in by_frame:
                x_lead, v_lead, length = by_frame[(lid, frame)]
                if x_lead - float(row.x) - length > 0:
                    valid = True
            contiguous = (
                run
                and lid == run_leader
                and prev_frame is not None
                and frame == prev_frame + 1
            )
            if valid and contiguous:
                run.append((frame, float(row.x), float(row.v), x_lead, v_lead))
            else:
                close(run, fid, vclass, run_length)
                if valid:
                    run = [(frame, float(row.x), float(row.v), x_lead, v_lead)]
                    run_leader = lid
                    run_length = length
                else:
                    run = []
                    run_leader = None
            prev_frame = frame
        close(run, fid, vclass, run_length)
    return episodes


def resample(ep: Episode, new_dt: float) -> Episode:
    """Strided decimation onto a coarser grid; new_dt must be a multiple of ep.dt."""
    ratio = new_dt / ep.dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ValueError(f"new_dt {new_dt} is not an integer multiple of dt {ep.dt}")
    if stride == 1:
        return ep
    return Episode(
        driver_id=ep.driver_id,
        dt=ep.dt * stride,
        t=ep.t[::stride],
        x=ep.x[::stride],
        v=ep.v[::stride],
        x_lead=ep.x_lead[::stride],
        v_lead=ep.v_lead[::stride],
        leader_length=ep.leader_length,
        vehicle_class=ep.vehicle_class,
    )


def leader_speed_profile(profile: dict, t: np.ndarray) -> np.ndarray:
    """Evaluate a leader speed profile descriptor on a time grid.

    Kinds: constant {speed}; piecewise {t, v} with linear interpolation;
    stop_and_go {v_low, v_high, period} cycling cruise / brake / crawl /
    accelerate with linear ramps.
    """
    kind = profile.get("kind")
    if kind == "constant":
        return np.full_like(np.asarray(t, dtype=float), float(profile["speed"]))
    if kind == "piecewise":
        knots_t = np.asarray(profile["t"], dtype=float)
        knots_v = np.asarray(profile["v"], dtype=float)
        if knots_t.size != knots_v.size or knots_t.size < 2:
            raise ValueError("piecewise profile needs matching t/v knots")
        return np.interp(t, knots_t, knots_v)
    if kind == "stop_and_go":
        v_low = float(profile.get("v_low", 2.0))
        v_high = float(profile.get("v_high", 15.0))
        period = float(profile.get("period", 60.0))
        if not 0 <= v_low <= v_high or period <= 0:
            raise ValueError("stop_and_go needs 0 <= v_low <= v_high and period > 0")
        # cycle fractions: cruise 0.3, brake 0.2, crawl 0.3, accelerate 0.2
        phase = (np.asarray(t, dtype=float) / period) % 1.0
        knots = np.array([0.0, 0.3, 0.5, 0.8, 1.0])
        speeds = np.array([v_high, v_high, v_low, v_low, v_high])
        return np.interp(phase, knots, speeds)
    raise ValueError(f"unknown leader profile kind {kind!r}")


def _integrate_positions(v: np.ndarray, dt: float, x0: float = 0.0) -> np.ndarray:
    x = np.empty_like(v)
    x[0] = x0
    x[1:] = x0 + np.cumsum(0.5 * (v[:-1] + v[1:]) * dt)
    return x


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic episode with recorded ground truth.

    sigma_k = 0 produces i.i.d. acceleration noise only; sigma_k > 0 adds a
    GP residual path with lengthscale ell (seconds).
    """

    theta: IdmParams
    sigma_eps: float = 0.0
    sigma_k: float = 0.0
    ell: float = 1.3
    leader: dict = field(default_factory=lambda: {"kind": "constant", "speed": 15.0})
    duration: float = 300.0
    dt: float = 0.2
    seed: int = 0
    driver_id: str = "synth-0"
    vehicle_class: str = "car"
    leader_length: float = 5.0
    init_gap: float | None = None

    def __post_init__(self):
        if self.sigma_eps < 0 or self.sigma_k < 0 or self.ell <= 0:
            raise ValueError("noise scales must be non-negative and ell positive")
        if self.num_samples < 100:
            raise ValueError("duration/dt must yield at least 100 samples")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration / self.dt)) + 1


def synth_generate(spec: SynthSpec) -> tuple[Episode, dict]:
    """Generate a follower trajectory from the IDM plus the configured noise.

    Returns the episode and a ground-truth record (parameters, noise spec,
    seed, attempt). Collisions trigger regeneration with a fresh child seed,
    up to 10 attempts.
    """
    n = spec.num_samples
    t = np.arange(n) * spec.dt
    v_lead = leader_speed_profile(spec.leader, t)
    if np.any(v_lead < 0):
        raise ValueError("leader profile produced negative speeds")
    x_lead = _integrate_positions(v_lead, spec.dt, x0=1000.0)

    if spec.init_gap is not None:
        gap0 = spec.init_gap
    elif v_lead[0] < spec.theta.v0:
        gap0 = equilibrium_gap(float(v_lead[0]), spec.theta)
    else:
        gap0 = 2.0 * (spec.theta.s0 + v_lead[0] * spec.theta.T)

    stochastic = spec.sigma_eps > 0 or spec.sigma_k > 0
    children = np.random.SeedSequence(spec.seed).spawn(10)
    last_error = None
    for attempt, child in enumerate(children):
        rng = np.random.default_rng(child)
        resid = np.zeros(n - 1)
        if spec.sigma_k > 0:
            hyper = KernelHyper(sigma_k=spec.sigma_k, ell=spec.ell)
            resid = resid + sample_gp_path(t[:-1], hyper, rng)
        if spec.sigma_eps > 0:
            resid = resid + rng.normal(0.0, spec.sigma_eps, size=n - 1)

        x = np.empty(n)
        v = np.empty(n)
        x[0] = x_lead[0] - spec.leader_length - gap0
        v[0] = v_lead[0]
        collided = False
        for i in range(n - 1):
            s = x_lead[i] - x[i] - spec.leader_length
            if s <= 0:
                collided = True
                break
            a_idm = idm_acceleration(CfInput(s=s, v=v[i], dv=v[i] - v_lead[i]), spec.theta)
            nxt = step(KinematicState(x=x[i], v=v[i]), a_idm + resid[i], spec.dt)
            x[i + 1], v[i + 1] = nxt.x, nxt.v
        if not collided and x_lead[-1] - x[-1] - spec.leader_length > 0:
            episode = Episode(
                driver_id=spec.driver_id,
                dt=spec.dt,
                t=t,
                x=x,
                v=v,
                x_lead=x_lead,
                v_lead=v_lead,
                leader_length=spec.leader_length,
                vehicle_class=spec.vehicle_class,
            )
            truth = {
                "theta": {k: float(getattr(spec.theta, k)) for k in ("v0", "s0", "T", "alpha", "beta")},
                "delta": float(spec.theta.delta),
                "s1": float(spec.theta.s1),
                "sigma_eps": float(spec.sigma_eps),
                "sigma_k": float(spec.sigma_k),
                "ell": float(spec.ell),
                "leader": dict(spec.leader),
                "duration": float(spec.duration),
                "dt": float(spec.dt),
                "seed": int(spec.seed),
                "attempt": attempt,
            }
            return episode, truth
        last_error = f"collision on attempt {attempt}"
        if not stochastic:
            break
    raise RuntimeError(f"synthetic generation failed: {last_error} (seed {spec.seed})")


def save_episode_csv(ep: Episode, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(EPISODE_CSV_HEADER + "\n")
        for i in range(ep.n):
            fh.write(
                f"{ep.t[i]:.15g},{ep.x[i]:.15g},{ep.v[i]:.15g},"
                f"{ep.x_lead[i]:.15g},{ep.v_lead[i]:.15g},{ep.leader_length:.15g},"
                f"{ep.driver_id},{ep.vehicle_class}\n"
            )


def load_episode_csv(path) -> Episode:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != EPISODE_CSV_HEADER:
        raise SchemaError(f"{path}: line 1: expected header {EPISODE_CSV_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise SchemaError(f"{path}: line {lineno}: expected 8 fields, got {len(parts)}")
        try:
            rows.append(
                (
                    [float(p) for p in parts[:6]],
                    parts[6],
                    parts[7],
                )
            )
        except ValueError as exc:
            raise SchemaError(f"{path}: line {lineno}: {exc}") from exc
    if len(rows) < 2:
        raise SchemaError(f"{path}: fewer than 2 data rows")
    nums = np.array([r[0] for r in rows])
    driver_ids = {r[1] for r in rows}
    classes = {r[2] for r in rows}
    lengths = set(nums[:, 5])
    if len(driver_ids) > 1 or len(classes) > 1 or len(lengths) > 1:
        raise SchemaError(f"{path}: driver_id, vehicle_class, leader_length must be constant")
    t = nums[:, 0]
    dt = float(t[1] - t[0])
    try:
        return Episode(
            driver_id=rows[0][1],
            dt=dt,
            t=t,
            x=nums[:, 1],
            v=nums[:, 2],
            x_lead=nums[:, 3],
            v_lead=nums[:, 4],
            leader_length=float(nums[0, 5]),
            vehicle_class=rows[0][2],
        )
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def save_ground_truth(truth: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ground_truth(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
