import json
import os
import shutil

import numpy as np
import pytest
import yaml

from maidm.cli import main
from maidm.episodes import load_episode_csv, load_ground_truth
from maidm.mcmc import PosteriorSamples


def write_config(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(payload, fh)
    return str(path)


def dir_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            p = os.path.join(base, name)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


SYNTH_SECTION = {
    "drivers": 1,
    "theta": [33.3, 2.0, 1.6, 0.73, 1.67],
    "sigma_eps": 0.1,
    "leader": {"kind": "stop_and_go", "v_low": 3.0, "v_high": 14.0, "period": 40.0},
    "duration": 60.0,
    "dt": 0.2,
    "seed": 5,
}


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    cfg = write_config(root / "cfg.yaml", {"version": 1, "synth": dict(SYNTH_SECTION)})
    out = root / "out"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def calibrated_run(tmp_path_factory, synth_run):
    root = tmp_path_factory.mktemp("calib")
    episode = str(synth_run / "ep_drv0.csv")
    cfg = write_config(
        root / "cfg.yaml",
        {
            "version": 1,
            "calibrate": {
                "episodes": [episode],
                "model": {"noise_model": "bidm", "pooling": "pooled"},
                "sampler": {"num_chains": 2, "warmup_steps": 300, "draw_steps": 300},
                "rhat_threshold": 3.0,
                "seed": 1,
            },
        },
    )
    out = root / "out"
    assert main(["calibrate", "--config", cfg, "--out", str(out)]) == 0
    return out, episode


class TestSynth:
    def test_writes_episode_and_truth(self, synth_run):
        ep = load_episode_csv(synth_run / "ep_drv0.csv")
        truth = load_ground_truth(synth_run / "ep_drv0.truth.json")
        assert ep.driver_id == "drv0"
        assert truth["sigma_eps"] == 0.1
        assert (synth_run / "resolved_config.yaml").exists()

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.yaml", {"version": 1, "synth": dict(SYNTH_SECTION)})
        out = tmp_path / "out"
        assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
        first = dir_bytes(out)
        shutil.rmtree(out)
        assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
        assert dir_bytes(out) == first

    def test_driver_jitter_produces_distinct_truths(self, tmp_path):
        section = dict(SYNTH_SECTION, drivers=3, theta_jitter=0.1)
        cfg = write_config(tmp_path / "cfg.yaml", {"version": 1, "synth": section})
        out = tmp_path / "out"
        assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
        truths = [load_ground_truth(out / f"ep_drv{d}.truth.json") for d in range(3)]
        t_values = {t["theta"]["T"] for t in truths}
        assert len(t_values) == 3

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.yaml", {"version": 1, "synth": dict(SYNTH_SECTION)})
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["synth", "--config", cfg, "--out", str(out2), "--seed", "99"]) == 0
        a = load_episode_csv(out1 / "ep_drv0.csv")
        b = load_episode_csv(out2 / "ep_drv0.csv")
        assert not np.array_equal(a.v, b.v)


class TestCalibrate:
    def test_outputs_and_summary_rows(self, calibrated_run):
        out, _ = calibrated_run
        samples = PosteriorSamples.from_csv(out / "draws.csv")
        assert samples.names == ["v0", "s0", "T", "alpha", "beta", "sigma_eps"]
        assert samples.draws.shape == (2, 300, 6)
        diag = json.loads((out / "diagnostics.json").read_text())
        assert set(diag["rhat"]) == set(samples.names)
        summary = (out / "summary.csv").read_text().splitlines()
        assert summary[0] == "name,mean,sd,q05,q95,note"
        assert len(summary) == 7

    def test_maidm_adds_kernel_rows(self, tmp_path, synth_run):
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {
                "version": 1,
                "calibrate": {
                    "episodes": [str(synth_run / "ep_drv0.csv")],
                    "resample_dt": 1.0,
                    "model": {"noise_model": "maidm", "pooling": "pooled"},
                    "sampler": {"num_chains": 2, "warmup_steps": 100, "draw_steps": 100},
                    "rhat_threshold": 10.0,
                    "seed": 2,
                },
            },
        )
        out = tmp_path / "out"
        assert main(["calibrate", "--config", cfg, "--out", str(out)]) == 0
        samples = PosteriorSamples.from_csv(out / "draws.csv")
        assert samples.names[-2:] == ["sigma_k", "ell"]
        summary = (out / "summary.csv").read_text()
        assert "samples at dt=" in summary

    def test_unpooled_two_drivers_doubles_theta_columns(self, tmp_path):
        section = dict(SYNTH_SECTION, drivers=2, theta_jitter=0.05)
        synth_cfg = write_config(tmp_path / "s.yaml", {"version": 1, "synth": section})
        data_dir = tmp_path / "data"
        assert main(["synth", "--config", synth_cfg, "--out", str(data_dir)]) == 0
        cfg = write_config(
            tmp_path / "c.yaml",
            {
                "version": 1,
                "calibrate": {
                    "episodes": [str(data_dir / "ep_drv0.csv"), str(data_dir / "ep_drv1.csv")],
                    "model": {"noise_model": "bidm", "pooling": "unpooled"},
                    "sampler": {"num_chains": 2, "warmup_steps": 100, "draw_steps": 100},
                    "rhat_threshold": 10.0,
                    "seed": 3,
                },
            },
        )
        out = tmp_path / "out"
        assert main(["calibrate", "--config", cfg, "--out", str(out)]) == 0
        samples = PosteriorSamples.from_csv(out / "draws.csv")
        theta_cols = [n for n in samples.names if "[" in n]
        assert len(theta_cols) == 10
        assert "v0[drv0]" in samples.names and "v0[drv1]" in samples.names

    def test_rhat_gate_refuses_summary_without_force(self, tmp_path, synth_run):
        base = {
            "episodes": [str(synth_run / "ep_drv0.csv")],
            "model": {"noise_model": "bidm", "pooling": "pooled"},
            "sampler": {"num_chains": 2, "warmup_steps": 100, "draw_steps": 100},
            "rhat_threshold": 0.0,
            "seed": 4,
        }
        cfg = write_config(tmp_path / "cfg.yaml", {"version": 1, "calibrate": base})
        out = tmp_path / "out"
        assert main(["calibrate", "--config", cfg, "--out", str(out)]) == 3
        assert (out / "draws.csv").exists()
        assert (out / "diagnostics.json").exists()
        assert not (out / "summary.csv").exists()
        out2 = tmp_path / "out2"
        assert main(["calibrate", "--config", cfg, "--out", str(out2), "--force"]) == 0
        assert (out2 / "summary.csv").exists()


class TestSimulateAndEvaluate:
    def test_stochastic_envelope_and_report(self, tmp_path, calibrated_run):
        out_cal, episode = calibrated_run
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {
                "version": 1,
                "simulate": {
                    "draws": str(out_cal / "draws.csv"),
                    "episode": episode,
                    "mode": "stoch_bidm",
                    "n_replicates": 50,
                    "probe_times": [37.0],
                    "seed": 6,
                },
            },
        )
        out = tmp_path / "out"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        for ch in ("a", "v", "s", "x"):
            lines = (out / f"envelope_{ch}.csv").read_text().splitlines()
            assert lines[0] == "t,q025,q25,q50,q75,q975"
        report = json.loads((out / "report.json").read_text())
        assert "v" in report["crps_mean"]

    def test_deterministic_ignores_replicates(self, tmp_path, calibrated_run):
        out_cal, episode = calibrated_run
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {
                "version": 1,
                "simulate": {
                    "draws": str(out_cal / "draws.csv"),
                    "episode": episode,
                    "mode": "deterministic",
                    "n_replicates": 500,
                    "output": "replicates",
                    "seed": 7,
                },
            },
        )
        out = tmp_path / "out"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        reps = os.listdir(out / "replicates")
        assert reps == ["rep_00000.csv"]

    def test_maidm_mode_requires_kernel_columns(self, tmp_path, calibrated_run):
        out_cal, episode = calibrated_run  # bidm draws: no sigma_k / ell
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {
                "version": 1,
                "simulate": {
                    "draws": str(out_cal / "draws.csv"),
                    "episode": episode,
                    "mode": "stoch_maidm",
                    "n_replicates": 5,
                    "seed": 8,
                },
            },
        )
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "out")]) == 2

    def test_evaluate_roundtrip_and_self_score(self, tmp_path, calibrated_run):
        out_cal, episode = calibrated_run
        sim_cfg = write_config(
            tmp_path / "sim.yaml",
            {
                "version": 1,
                "simulate": {
                    "draws": str(out_cal / "draws.csv"),
                    "episode": episode,
                    "mode": "stoch_bidm",
                    "n_replicates": 10,
                    "output": "replicates",
                    "seed": 9,
                },
            },
        )
        sim_out = tmp_path / "sim_out"
        assert main(["simulate", "--config", sim_cfg, "--out", str(sim_out)]) == 0
        eval_cfg = write_config(
            tmp_path / "eval.yaml",
            {
                "version": 1,
                "evaluate": {
                    "replicates_dir": str(sim_out / "replicates"),
                    "episode": episode,
                    "seed": 0,
                },
            },
        )
        out1, out2 = tmp_path / "e1", tmp_path / "e2"
        assert main(["evaluate", "--config", eval_cfg, "--out", str(out1)]) == 0
        assert main(["evaluate", "--config", eval_cfg, "--out", str(out2)]) == 0
        assert dir_bytes(out1) == dir_bytes(out2)

    def test_evaluate_self_truth_zero_scores(self, tmp_path, synth_run):
        # fabricate a single replicate equal to the truth
        episode = load_episode_csv(synth_run / "ep_drv0.csv")
        rep_dir = tmp_path / "replicates"
        os.makedirs(rep_dir)
        accel = np.append(np.diff(episode.v) / episode.dt, 0.0)
        with open(rep_dir / "rep_00000.csv", "w") as fh:
            fh.write("t,a,v,s,x\n")
            for i in range(episode.n):
                fh.write(
                    f"{episode.t[i]:.15g},{accel[i]:.15g},{episode.v[i]:.15g},"
                    f"{episode.s[i]:.15g},{episode.x[i]:.15g}\n"
                )
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {
                "version": 1,
                "evaluate": {
                    "replicates_dir": str(rep_dir),
                    "episode": str(synth_run / "ep_drv0.csv"),
                    "seed": 0,
                },
            },
        )
        out = tmp_path / "out"
        assert main(["evaluate", "--config", cfg, "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        for ch in ("a", "v", "s"):
            assert report["rmse"][ch]["mean"] == pytest.approx(0.0, abs=1e-9)
            assert report["crps_mean"][ch] == pytest.approx(0.0, abs=1e-9)

    def test_evaluate_missing_channel_named(self, tmp_path, synth_run):
        rep_dir = tmp_path / "replicates"
        os.makedirs(rep_dir)
        (rep_dir / "rep_00000.csv").write_text("t,a,v\n0,0,1\n0.2,0,1\n")
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {
                "version": 1,
                "evaluate": {
                    "replicates_dir": str(rep_dir),
                    "episode": str(synth_run / "ep_drv0.csv"),
                    "seed": 0,
                },
            },
        )
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "out")]) == 2


class TestRing:
    def test_small_ring_outputs(self, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {
                "version": 1,
                "ring": {
                    "num_vehicles": 8,
                    "duration": 120.0,
                    "mode": "stoch_bidm",
                    "sigma_eps": 0.3,
                    "fd_window": 30.0,
                    "fd_segments": 4,
                    "seed": 12,
                },
            },
        )
        out = tmp_path / "out"
        assert main(["ring", "--config", cfg, "--out", str(out)]) == 0
        ring_lines = (out / "ring.csv").read_text().splitlines()
        assert ring_lines[0] == "t,vehicle,x,v"
        assert len(ring_lines) == 1 + 8 * 241
        fd_lines = (out / "fd.csv").read_text().splitlines()
        assert fd_lines[0] == "density,flow,speed"
        assert len(fd_lines) > 1

    def test_single_vehicle_ring(self, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {"version": 1, "ring": {"num_vehicles": 1, "duration": 60.0, "fd_window": 30.0, "seed": 0}},
        )
        assert main(["ring", "--config", cfg, "--out", str(tmp_path / "out")]) == 0

    def test_heterogeneous_requires_draws(self, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {
                "version": 1,
                "ring": {
                    "num_vehicles": 5,
                    "duration": 50.0,
                    "params": {"kind": "draws"},
                    "fd_window": 25.0,
                    "seed": 0,
                },
            },
        )
        assert main(["ring", "--config", cfg, "--out", str(tmp_path / "out")]) == 2

    def test_defaults_echoed_in_resolved_config(self, tmp_path, calibrated_run):
        out_cal, _ = calibrated_run
        cfg = write_config(
            tmp_path / "cfg.yaml",
            {
                "version": 1,
                "ring": {
                    "duration": 50.0,
                    "mode": "stoch_bidm",
                    "params": {"kind": "draws", "draws": str(out_cal / "draws.csv")},
                    "fd_window": 25.0,
                    "seed": 3,
                },
            },
        )
        out = tmp_path / "out"
        assert main(["ring", "--config", cfg, "--out", str(out)]) == 0
        resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
        assert resolved["command"] == "ring"
        lines = (out / "ring.csv").read_text().splitlines()
        vehicles = {line.split(",")[1] for line in lines[1:]}
        assert len(vehicles) == 37  # default vehicle count


class TestErrorPaths:
    def test_missing_config_file_is_io_error(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 4

    def test_bad_section_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.yaml", {"version": 1, "wrong": {}})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_bad_version_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.yaml", {"version": 99, "synth": dict(SYNTH_SECTION)})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_invalid_theta_rejected(self, tmp_path):
        section = dict(SYNTH_SECTION, theta=[1.0, 2.0])
        cfg = write_config(tmp_path / "cfg.yaml", {"version": 1, "synth": section})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_bad_threads(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.yaml", {"version": 1, "synth": dict(SYNTH_SECTION)})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o"), "--threads", "0"]) == 2
