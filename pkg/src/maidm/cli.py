"""Command-line orchestration: synth, calibrate, simulate, ring, evaluate.

Every command reads a YAML config (flags override file values), writes a
resolved-config snapshot next to its outputs, and is deterministic given the
resolved config and seed. Exit codes: 0 success, 2 config/validation error,
3 numeric/diagnostic failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import yaml

from .episodes import Episode, SchemaError, SynthSpec, load_episode_csv, resample, save_episode_csv, save_ground_truth, synth_generate
from .gp import FactorizationError, KernelHyper
from .idm import THETA_NAMES, IdmParams
from .mcmc import Diagnostics, DiagnosticError, PosteriorSamples, SamplerConfig, run_chains, summarize
from .model import LogPosterior, ModelSpec, PriorConfig
from .scoring import score_simulation
from .simulate import (
    MODES,
    RingConfig,
    SimConfig,
    STOCH_BIDM,
    STOCH_MAIDM,
    DETERMINISTIC,
    fundamental_diagram,
    load_replicates,
    ring_simulate,
    sample_parameter_sets,
    save_envelope,
    save_replicates,
    save_ring_csv,
    simulate_deterministic,
    simulate_stochastic_bidm,
    simulate_stochastic_maidm,
)

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Bad or missing configuration."""


def _load_config(path: str, command: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    version = raw.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported config version {version!r}")
    if command not in raw:
        raise ConfigError(f"{path}: missing top-level section {command!r}")
    section = raw[command]
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: section {command!r} must be a mapping")
    return dict(section)


def _resolve_common(args, section: dict) -> dict:
    resolved = dict(section)
    if args.seed is not None:
        resolved["seed"] = args.seed
    resolved.setdefault("seed", 0)
    resolved["threads"] = args.threads
    return resolved


def _write_resolved(out_dir: str, command: str, resolved: dict) -> None:
    payload = {"version": CONFIG_VERSION, "command": command, command: resolved}
    with open(os.path.join(out_dir, "resolved_config.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True, default_flow_style=False)


def _require(section: dict, key: str, command: str):
    if key not in section:
        raise ConfigError(f"{command}: missing required key {key!r}")
    return section[key]


def _theta_from_config(raw, command: str) -> IdmParams:
    if isinstance(raw, dict):
        try:
            return IdmParams(**{k: float(v) for k, v in raw.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{command}: bad theta mapping: {exc}") from exc
    raw = list(raw)
    if len(raw) != 5:
        raise ConfigError(f"{command}: theta must have 5 entries [v0, s0, T, alpha, beta]")
    return IdmParams.from_theta([float(v) for v in raw])


def cmd_synth(args) -> int:
    section = _resolve_common(args, _load_config(args.config, "synth"))
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    theta = _theta_from_config(_require(section, "theta", "synth"), "synth")
    n_drivers = int(section.get("drivers", 1))
    if n_drivers < 1:
        raise ConfigError("synth: drivers must be >= 1")
    jitter = float(section.get("theta_jitter", 0.0))
    prefix = str(section.get("driver_prefix", "drv"))
    seed = int(section["seed"])
    children = np.random.SeedSequence(seed).spawn(n_drivers)
    for d in range(n_drivers):
        child_rng = np.random.default_rng(children[d])
        theta_d = theta
        if jitter > 0:
            factors = np.exp(child_rng.normal(0.0, jitter, size=5))
            theta_d = IdmParams.from_theta(theta.theta() * factors, delta=theta.delta, s1=theta.s1)
        spec = SynthSpec(
            theta=theta_d,
            sigma_eps=float(section.get("sigma_eps", 0.0)),
            sigma_k=float(section.get("sigma_k", 0.0)),
            ell=float(section.get("ell_seconds", 1.3)),
            leader=dict(section.get("leader", {"kind": "constant", "speed": 15.0})),
            duration=float(section.get("duration", 300.0)),
            dt=float(section.get("dt", 0.2)),
            seed=int(child_rng.integers(0, 2**31 - 1)),
            driver_id=f"{prefix}{d}",
            vehicle_class=str(section.get("vehicle_class", "car")),
            leader_length=float(section.get("leader_length", 5.0)),
        )
        episode, truth = synth_generate(spec)
        save_episode_csv(episode, os.path.join(out_dir, f"ep_{spec.driver_id}.csv"))
        save_ground_truth(truth, os.path.join(out_dir, f"ep_{spec.driver_id}.truth.json"))
    _write_resolved(out_dir, "synth", section)
    print(f"synth: wrote {n_drivers} episode(s) to {out_dir}")
    return 0


def _priors_from_config(raw: dict | None) -> PriorConfig:
    if not raw:
        return PriorConfig()
    kwargs = {}
    if "mu0" in raw:
        kwargs["mu0"] = tuple(float(v) for v in raw["mu0"])
    if "theta_medians" in raw:
        kwargs["mu0"] = tuple(np.log([float(v) for v in raw["theta_medians"]]))
    if "Sigma0_diag" in raw:
        sds = np.asarray([float(v) for v in raw["Sigma0_diag"]])
        kwargs["Sigma0"] = tuple(map(tuple, np.diag(sds**2).tolist()))
    if "Sigma0" in raw:
        kwargs["Sigma0"] = tuple(map(tuple, np.asarray(raw["Sigma0"], dtype=float).tolist()))
    for key in ("mu_eps", "sigma1", "mu_k", "sigma2", "mu_ell", "sigma_ell", "lam", "eta"):
        if key in raw:
            kwargs[key] = float(raw[key])
    return PriorConfig(**kwargs)


def _load_episodes(section: dict, command: str) -> list[Episode]:
    paths = _require(section, "episodes", command)
    if isinstance(paths, str):
        paths = [paths]
    episodes = [load_episode_csv(p) for p in paths]
    new_dt = section.get("resample_dt")
    if new_dt is not None:
        episodes = [resample(ep, float(new_dt)) for ep in episodes]
    return episodes


def cmd_calibrate(args) -> int:
    section = _resolve_common(args, _load_config(args.config, "calibrate"))
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    episodes = _load_episodes(section, "calibrate")
    model_raw = dict(section.get("model", {}))
    spec = ModelSpec(
        noise_model=str(model_raw.get("noise_model", "maidm")),
        pooling=str(model_raw.get("pooling", "pooled")),
        priors=_priors_from_config(section.get("priors")),
        num_drivers=len(episodes),
        delta=float(model_raw.get("delta", 4.0)),
        s1=float(model_raw.get("s1", 0.0)),
    )
    sampler_raw = dict(section.get("sampler", {}))
    logpost = LogPosterior(spec, episodes)
    cfg = SamplerConfig(
        num_chains=int(sampler_raw.get("num_chains", 2)),
        warmup_steps=int(sampler_raw.get("warmup_steps", 5000)),
        draw_steps=int(sampler_raw.get("draw_steps", 5000)),
        seed=int(section["seed"]),
        algorithm=str(sampler_raw.get("algorithm", "rwm")),
        blocks=logpost.layout.default_blocks(),
    )
    init_seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_chains + 1)[1:]
    inits = [
        logpost.layout.initial_point(np.random.default_rng(s), jitter=0.1)
        for s in init_seeds
    ]
    samples = run_chains(
        logpost, inits, cfg, names=logpost.layout.names, constrain=logpost.layout.constrain
    )
    samples.to_csv(os.path.join(out_dir, "draws.csv"))
    diag = Diagnostics.from_samples(samples, rejections=logpost.rejections)
    diag.to_json(os.path.join(out_dir, "diagnostics.json"))
    _write_resolved(out_dir, "calibrate", section)

    threshold = float(section.get("rhat_threshold", 1.05))
    if np.isfinite(diag.max_rhat) and diag.max_rhat > threshold and not args.force:
        raise DiagnosticError(
            f"max R-hat {diag.max_rhat:.4f} exceeds {threshold}; "
            "summary withheld (re-run with --force to override)"
        )
    summary = summarize(samples)
    dt = episodes[0].dt
    notes = []
    for name in summary.table["name"]:
        if name == "ell":
            mean = float(summary.table.loc[summary.table["name"] == "ell", "mean"].iloc[0])
            notes.append(f"{mean / dt:.2f} samples at dt={dt:g}s")
        else:
            notes.append("")
    summary.table["note"] = notes
    summary.to_csv(os.path.join(out_dir, "summary.csv"))
    with np.printoptions(precision=4):
        print(summary.table.to_string(index=False))
    return 0


def _resolve_parameter_sets(section: dict, command: str, n: int, seed: int):
    draws_path = _require(section, "draws", command)
    samples = PosteriorSamples.from_csv(draws_path)
    driver = section.get("driver")
    return samples, sample_parameter_sets(samples, n, seed, driver=driver)


def cmd_simulate(args) -> int:
    section = _resolve_common(args, _load_config(args.config, "simulate"))
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    episode = load_episode_csv(_require(section, "episode", "simulate"))
    mode = str(section.get("mode", DETERMINISTIC))
    if mode not in MODES:
        raise ConfigError(f"simulate: mode must be one of {MODES}")
    n = int(section.get("n_replicates", 100))
    seed = int(section["seed"])
    probe_times = [float(p) for p in section.get("probe_times", [])]
    channels = tuple(section.get("channels", ("a", "v", "s")))
    cfg = SimConfig(mode=mode, n_replicates=n, seed=seed)

    if mode == DETERMINISTIC:
        samples = PosteriorSamples.from_csv(_require(section, "draws", "simulate"))
        driver = section.get("driver")
        suffix = "" if driver is None else f"[{driver}]"
        means = []
        for base in THETA_NAMES:
            name = f"{base}{suffix}"
            if name not in samples.names:
                raise ConfigError(f"simulate: draws are missing column {name!r}")
            means.append(float(samples.column(name).mean()))
        sim = simulate_deterministic(IdmParams.from_theta(means), episode, cfg=cfg)
    else:
        samples, sets = _resolve_parameter_sets(section, "simulate", n, seed)
        theta = sets.idm_params()
        sigma_eps = sets.sigma_eps if section.get("sigma_eps") is None else float(section["sigma_eps"])
        if mode == STOCH_BIDM:
            sim = simulate_stochastic_bidm(theta, sigma_eps, episode, cfg=cfg)
        else:
            sigma_k = sets.sigma_k if section.get("sigma_k") is None else float(section["sigma_k"])
            ell = sets.ell if section.get("ell_seconds") is None else float(section["ell_seconds"])
            if sigma_k is None or ell is None:
                raise ConfigError(
                    "simulate: stoch_maidm needs sigma_k and ell columns in the draws "
                    "file or explicit sigma_k / ell_seconds overrides"
                )
            sim = simulate_stochastic_maidm(theta, sigma_eps, (sigma_k, ell), episode, cfg=cfg)

    output_kind = str(section.get("output", "envelope"))
    if output_kind == "replicates":
        rep_dir = os.path.join(out_dir, "replicates")
        os.makedirs(rep_dir, exist_ok=True)
        save_replicates(sim, rep_dir)
    elif output_kind == "envelope":
        save_envelope(sim, out_dir)
    else:
        raise ConfigError(f"simulate: output must be 'envelope' or 'replicates', got {output_kind!r}")
    report = score_simulation(sim, episode, channels=channels, probe_times=probe_times)
    report.to_json(os.path.join(out_dir, "report.json"))
    report.to_csv(os.path.join(out_dir, "report.csv"))
    _write_resolved(out_dir, "simulate", section)
    print(f"simulate: mode={mode} replicates={sim.n_replicates} collisions={len(sim.collisions)}")
    return 0


def cmd_ring(args) -> int:
    section = _resolve_common(args, _load_config(args.config, "ring"))
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    ring_cfg = RingConfig(
        radius=float(section.get("radius", 128.0)),
        num_vehicles=int(section.get("num_vehicles", 37)),
        initial_speed=float(section.get("initial_speed", 11.6)),
        duration=float(section.get("duration", 3000.0)),
        dt=float(section.get("dt", 0.5)),
        vehicle_length=float(section.get("vehicle_length", 5.0)),
    )
    mode = str(section.get("mode", DETERMINISTIC))
    if mode not in MODES:
        raise ConfigError(f"ring: mode must be one of {MODES}")
    seed = int(section["seed"])
    params_raw = dict(section.get("params", {"kind": "fixed"}))
    kind = params_raw.get("kind", "fixed")
    if kind == "fixed":
        theta = _theta_from_config(params_raw.get("theta", list(IdmParams.recommended().theta())), "ring")
    elif kind == "draws":
        if "draws" not in params_raw:
            raise ConfigError("ring: params.kind=draws requires params.draws (a draws file)")
        samples = PosteriorSamples.from_csv(params_raw["draws"])
        sets = sample_parameter_sets(
            samples, ring_cfg.num_vehicles, seed, driver=params_raw.get("driver")
        )
        theta = sets.idm_params()
    else:
        raise ConfigError(f"ring: params.kind must be 'fixed' or 'draws', got {kind!r}")
    sigma_eps = float(section.get("sigma_eps", 0.3 if mode == STOCH_BIDM else 0.1))
    hyper = None
    if mode == STOCH_MAIDM:
        hyper = KernelHyper(
            sigma_k=float(section.get("sigma_k", 0.2)),
            ell=float(section.get("ell_seconds", 1.3)),
        )
    out = ring_simulate(ring_cfg, theta, mode=mode, sigma_eps=sigma_eps, hyper=hyper, seed=seed)
    save_ring_csv(out, os.path.join(out_dir, "ring.csv"))
    fd = fundamental_diagram(
        out,
        window=float(section.get("fd_window", 60.0)),
        segments=int(section.get("fd_segments", 8)),
    )
    fd.to_csv(os.path.join(out_dir, "fd.csv"), index=False, float_format="%.12g", lineterminator="\n")
    _write_resolved(out_dir, "ring", section)
    print(
        f"ring: vehicles={ring_cfg.num_vehicles} steps={ring_cfg.num_steps} "
        f"collisions={len(out.collisions)} fd_cells={len(fd)}"
    )
    return 0


def cmd_evaluate(args) -> int:
    section = _resolve_common(args, _load_config(args.config, "evaluate"))
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    sim = load_replicates(_require(section, "replicates_dir", "evaluate"))
    episode = load_episode_csv(_require(section, "episode", "evaluate"))
    report = score_simulation(
        sim,
        episode,
        channels=tuple(section.get("channels", ("a", "v", "s"))),
        probe_times=[float(p) for p in section.get("probe_times", [])],
    )
    report.to_json(os.path.join(out_dir, "report.json"))
    report.to_csv(os.path.join(out_dir, "report.csv"))
    _write_resolved(out_dir, "evaluate", section)
    print(f"evaluate: scored {sim.n_replicates} replicates against {episode.driver_id}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maidm",
        description="Bayesian car-following calibration and stochastic simulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("synth", cmd_synth),
        ("calibrate", cmd_calibrate),
        ("simulate", cmd_simulate),
        ("ring", cmd_ring),
        ("evaluate", cmd_evaluate),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (recorded; execution is deterministic)")
        p.add_argument("--force", action="store_true", help="write outputs even when diagnostics fail")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DiagnosticError, FactorizationError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
