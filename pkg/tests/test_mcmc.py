import numpy as np
import pytest

from maidm.mcmc import (
    DiagnosticError,
    Diagnostics,
    PosteriorSamples,
    SamplerConfig,
    ess,
    rhat,
    run_chains,
    summarize,
)


def gaussian_logpost(mean, cov):
    cov = np.atleast_2d(cov)
    prec = np.linalg.inv(cov)
    mean = np.atleast_1d(mean)

    def logpost(x):
        d = x - mean
        return -0.5 * float(d @ prec @ d)

    return logpost


class TestRunChains:
    def test_standard_normal_moments(self):
        cfg = SamplerConfig(num_chains=4, warmup_steps=5000, draw_steps=5000, seed=1)
        inits = [np.array([x]) for x in (-2.0, -0.5, 0.5, 2.0)]
        samples = run_chains(gaussian_logpost(0.0, 1.0), inits, cfg)
        draws = samples.column("x0")
        e = ess(samples)["x0"]
        mcse = draws.std() / np.sqrt(e)
        assert abs(draws.mean()) < 3 * mcse
        assert abs(draws.std() - 1.0) < 0.05
        assert rhat(samples)["x0"] < 1.01

    def test_correlated_gaussian_recovers_correlation(self):
        cov = np.array([[1.0, 0.8], [0.8, 1.0]])
        cfg = SamplerConfig(num_chains=4, warmup_steps=4000, draw_steps=4000, seed=2)
        inits = [np.zeros(2) + off for off in (-1.0, -0.3, 0.3, 1.0)]
        samples = run_chains(gaussian_logpost(np.zeros(2), cov), inits, cfg)
        flat = samples.flat()
        corr = np.corrcoef(flat.T)[0, 1]
        assert corr == pytest.approx(0.8, abs=0.05)

    def test_lognormal_target_via_log_transform(self):
        # sample y = log(x) with x ~ LogNormal(0, 1): y is standard normal
        logpost = gaussian_logpost(0.0, 1.0)
        cfg = SamplerConfig(num_chains=4, warmup_steps=3000, draw_steps=3000, seed=3)
        inits = [np.array([v]) for v in (-1.0, 0.0, 0.5, 1.0)]
        samples = run_chains(logpost, inits, cfg, names=["x"], constrain=np.exp)
        draws = samples.column("x")
        assert np.all(draws > 0)
        assert np.median(draws) == pytest.approx(1.0, rel=0.05)

    def test_conjugate_normal_normal_posterior(self):
        # prior mu ~ N(0, 1), data y_i ~ N(mu, 1): posterior N(sum(y)/(n+1), 1/(n+1))
        rng = np.random.default_rng(0)
        y = rng.normal(1.2, 1.0, size=20)
        post_mean = y.sum() / (y.size + 1)
        post_var = 1.0 / (y.size + 1)

        def logpost(x):
            mu = x[0]
            return -0.5 * mu**2 - 0.5 * float(np.sum((y - mu) ** 2))

        cfg = SamplerConfig(num_chains=4, warmup_steps=3000, draw_steps=5000, seed=4)
        samples = run_chains(logpost, [np.array([v]) for v in (-1.0, 0.0, 1.0, 2.0)], cfg)
        draws = samples.column("x0")
        e = ess(samples)["x0"]
        mcse = draws.std() / np.sqrt(e)
        assert abs(draws.mean() - post_mean) < 3 * mcse
        sd_mcse = draws.std() / np.sqrt(2 * max(e - 1, 1))
        assert abs(draws.std() - np.sqrt(post_var)) < 4 * sd_mcse

    def test_block_updates_target_joint(self):
        cov = np.array([[1.0, 0.5], [0.5, 2.0]])
        cfg = SamplerConfig(
            num_chains=4,
            warmup_steps=3000,
            draw_steps=3000,
            seed=5,
            blocks=[np.array([0]), np.array([1])],
        )
        samples = run_chains(gaussian_logpost(np.zeros(2), cov), [np.zeros(2)] * 4, cfg)
        flat = samples.flat()
        assert np.cov(flat.T)[1, 1] == pytest.approx(2.0, rel=0.12)
        assert np.corrcoef(flat.T)[0, 1] == pytest.approx(0.5 / np.sqrt(2), abs=0.07)

    def test_reproducible_bit_identical(self):
        cfg = SamplerConfig(num_chains=2, warmup_steps=500, draw_steps=500, seed=11)
        a = run_chains(gaussian_logpost(0.0, 1.0), [np.zeros(1), np.ones(1)], cfg)
        b = run_chains(gaussian_logpost(0.0, 1.0), [np.zeros(1), np.ones(1)], cfg)
        assert np.array_equal(a.draws, b.draws)
        assert a.proposal_hash == b.proposal_hash

    def test_different_seed_differs(self):
        cfg1 = SamplerConfig(num_chains=2, warmup_steps=300, draw_steps=300, seed=1)
        cfg2 = SamplerConfig(num_chains=2, warmup_steps=300, draw_steps=300, seed=2)
        a = run_chains(gaussian_logpost(0.0, 1.0), [np.zeros(1), np.ones(1)], cfg1)
        b = run_chains(gaussian_logpost(0.0, 1.0), [np.zeros(1), np.ones(1)], cfg2)
        assert not np.array_equal(a.draws, b.draws)

    def test_nonfinite_init_rejected(self):
        def logpost(x):
            return -np.inf

        cfg = SamplerConfig(num_chains=2, warmup_steps=100, draw_steps=100, seed=0)
        with pytest.raises(ValueError, match="initial point"):
            run_chains(logpost, [np.zeros(1), np.zeros(1)], cfg)

    def test_all_rejected_block_raises_diagnostic_error(self):
        # support is a single point: every proposal is rejected
        x_star = np.array([0.0])

        def logpost(x):
            return 0.0 if np.array_equal(x, x_star) else -np.inf

        cfg = SamplerConfig(num_chains=2, warmup_steps=50, draw_steps=200, seed=0)
        with pytest.raises(DiagnosticError, match="acceptance"):
            run_chains(logpost, [x_star.copy(), x_star.copy()], cfg)

    def test_hmc_mode_standard_normal(self):
        cfg = SamplerConfig(
            num_chains=2, warmup_steps=500, draw_steps=1000, seed=6, algorithm="hmc"
        )
        samples = run_chains(gaussian_logpost(0.0, 1.0), [np.zeros(1), np.ones(1)], cfg)
        draws = samples.column("x0")
        assert abs(draws.mean()) < 0.1
        assert draws.std() == pytest.approx(1.0, abs=0.1)

    def test_overlapping_blocks_rejected(self):
        cfg = SamplerConfig(num_chains=2, warmup_steps=10, draw_steps=10, blocks=[np.array([0]), np.array([0])])
        with pytest.raises(ValueError, match="overlap"):
            run_chains(gaussian_logpost(0.0, 1.0), [np.zeros(1), np.zeros(1)], cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(num_chains=1)
        with pytest.raises(ValueError):
            SamplerConfig(warmup_steps=0)
        with pytest.raises(ValueError):
            SamplerConfig(algorithm="nuts")


def make_samples(draws):
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 2:
        draws = draws[:, :, None]
    return PosteriorSamples(names=[f"p{i}" for i in range(draws.shape[2])], draws=draws)


class TestRhat:
    def test_constant_chains_flagged_degenerate(self):
        samples = make_samples(np.ones((2, 200)))
        assert np.isnan(rhat(samples)["p0"])

    def test_iid_chains_near_one(self):
        rng = np.random.default_rng(0)
        samples = make_samples(rng.normal(size=(4, 2000)))
        assert rhat(samples)["p0"] < 1.01

    def test_separated_chains_flagged(self):
        rng = np.random.default_rng(1)
        draws = rng.normal(size=(2, 500))
        draws[1] += 3.0
        samples = make_samples(draws)
        assert rhat(samples)["p0"] > 1.5

    def test_needs_two_chains(self):
        samples = make_samples(np.random.default_rng(0).normal(size=(2, 100)))
        samples.draws = samples.draws[:1]
        with pytest.raises(ValueError):
            rhat(samples)


class TestEss:
    def test_iid_high_ess(self):
        rng = np.random.default_rng(2)
        samples = make_samples(rng.normal(size=(4, 2500)))
        total = 4 * 2500
        assert ess(samples)["p0"] >= 0.8 * total

    def test_constant_flagged(self):
        samples = make_samples(np.zeros((2, 300)))
        assert np.isnan(ess(samples)["p0"])

    def test_ar1_matches_analytic(self):
        rho = 0.9
        rng = np.random.default_rng(3)
        n, m = 20000, 4
        draws = np.empty((m, n))
        for c in range(m):
            e = rng.normal(size=n)
            x = np.empty(n)
            x[0] = e[0]
            for i in range(1, n):
                x[i] = rho * x[i - 1] + np.sqrt(1 - rho**2) * e[i]
            draws[c] = x
        samples = make_samples(draws)
        expected = m * n * (1 - rho) / (1 + rho)
        assert ess(samples)["p0"] == pytest.approx(expected, rel=0.3)


class TestSummarize:
    def test_constant_column(self):
        samples = make_samples(np.full((2, 100), 3.5))
        table = summarize(samples).table
        assert table.loc[0, "mean"] == 3.5
        assert table.loc[0, "sd"] == 0.0

    def test_known_gaussian_correlation_signs(self):
        rng = np.random.default_rng(4)
        corr = np.array(
            [
                [1.0, -0.5, 0.0, 0.0, 0.0],
                [-0.5, 1.0, -0.4, 0.0, 0.0],
                [0.0, -0.4, 1.0, 0.45, 0.35],
                [0.0, 0.0, 0.45, 1.0, 0.5],
                [0.0, 0.0, 0.35, 0.5, 1.0],
            ]
        )
        draws = rng.multivariate_normal(np.zeros(5), corr, size=(2, 4000))
        samples = PosteriorSamples(names=["v0", "s0", "T", "alpha", "beta"], draws=draws)
        got = summarize(samples).theta_corr[""]
        for i in range(5):
            for j in range(5):
                if abs(corr[i, j]) >= 0.3 and i != j:
                    assert np.sign(got[i, j]) == np.sign(corr[i, j])

    def test_quantiles(self):
        rng = np.random.default_rng(5)
        samples = make_samples(rng.normal(size=(2, 50000)))
        row = summarize(samples).table.iloc[0]
        assert row["q05"] == pytest.approx(-1.645, abs=0.05)
        assert row["q95"] == pytest.approx(1.645, abs=0.05)


class TestPersistence:
    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        draws = rng.normal(size=(2, 50, 3))
        samples = PosteriorSamples(names=["a", "corr[v0,s0]", "c"], draws=draws)
        path = tmp_path / "draws.csv"
        samples.to_csv(path)
        back = PosteriorSamples.from_csv(path)
        assert back.names == samples.names
        assert np.array_equal(back.draws, samples.draws)

    def test_diagnostics_json(self, tmp_path):
        rng = np.random.default_rng(7)
        samples = make_samples(rng.normal(size=(4, 500)))
        diag = Diagnostics.from_samples(samples)
        path = tmp_path / "diag.json"
        diag.to_json(path)
        import json

        payload = json.loads(path.read_text())
        assert "rhat" in payload and "ess" in payload
        assert payload["max_rhat"] < 1.05
