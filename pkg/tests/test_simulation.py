import dataclasses
import math

import numpy as np
import numpy.testing as npt
import pytest

import ncve.simulation as sim
from ncve import ConfigError, ConvergenceError
from ncve.simulation import (
    BinaryDgpParams,
    ContinuousDgpParams,
    McSummary,
    ScenarioConfig,
    binary_counterfactual_prevalence,
    binary_infection_prevalence,
    binary_selection_rate,
    continuous_counterfactual_prevalence,
    continuous_infection_prevalence,
    continuous_selection_rate,
    default_params,
    generate_binary_sample,
    generate_continuous_sample,
    run_monte_carlo,
)

BINARY = default_params("binary")
CONTINUOUS = default_params("continuous")


class TestDefaultParams:
    def test_known_settings(self):
        assert isinstance(BINARY, BinaryDgpParams)
        assert isinstance(CONTINUOUS, ContinuousDgpParams)
        assert isinstance(default_params("binary-nonrare"), BinaryDgpParams)
        assert isinstance(default_params("continuous-nonrare"), ContinuousDgpParams)

    def test_nonrare_lifts_baseline_risk(self):
        rare = binary_counterfactual_prevalence(BINARY, 0)
        lifted = binary_counterfactual_prevalence(default_params("binary-nonrare"), 0)
        assert lifted > 10 * rare

    def test_unknown_setting(self):
        with pytest.raises(ConfigError, match="setting"):
            default_params("poisson")


class TestParamValidation:
    def test_binary_defaults_are_valid(self):
        BinaryDgpParams()

    def test_induced_propensity_above_one(self):
        with pytest.raises(ConfigError):
            BinaryDgpParams(p_0a=0.9, p_ua=0.4)

    def test_induced_selection_above_one(self):
        with pytest.raises(ConfigError):
            BinaryDgpParams(p_ys=0.7, p_uys=0.4)

    def test_risk_above_one(self):
        with pytest.raises(ConfigError):
            BinaryDgpParams(eta_0y=0.1)

    def test_negative_cell(self):
        with pytest.raises(ConfigError):
            BinaryDgpParams(p_0d=0.01, p_ud=-0.02)

    @pytest.mark.parametrize("field,value", [("sigma_z", 0.0), ("sigma_w", -1.0)])
    def test_nonpositive_noise_scale(self, field, value):
        with pytest.raises(ConfigError):
            ContinuousDgpParams(**{field: value})

    def test_unknown_y_link(self):
        with pytest.raises(ConfigError, match="y_link"):
            ContinuousDgpParams(y_link="probit")

    def test_exp_link_corner_risk_above_one(self):
        with pytest.raises(ConfigError):
            ContinuousDgpParams(mu_0y=0.5)

    def test_expit_link_tolerates_positive_intercept(self):
        p = ContinuousDgpParams(mu_0y=0.5, y_link="expit")
        assert 0.0 < p.infection_risk(0.0, 0.0, 0.0) < 1.0


class TestGenerators:
    def test_same_seed_same_sample(self):
        s1 = generate_binary_sample(BINARY, 50_000, 3)
        s2 = generate_binary_sample(BINARY, 50_000, 3)
        assert s1.n == s2.n
        npt.assert_array_equal(s1.a, s2.a)
        npt.assert_array_equal(s1.y, s2.y)
        npt.assert_array_equal(s1.z, s2.z)
        npt.assert_array_equal(s1.w, s2.w)

    def test_different_seed_differs(self):
        s1 = generate_binary_sample(BINARY, 50_000, 3)
        s2 = generate_binary_sample(BINARY, 50_000, 4)
        assert s1.n != s2.n or not np.array_equal(s1.a, s2.a)

    def test_tuple_seed_accepted(self):
        s1 = generate_continuous_sample(CONTINUOUS, 20_000, (1729, 1, 0, 5))
        s2 = generate_continuous_sample(CONTINUOUS, 20_000, (1729, 1, 0, 5))
        npt.assert_array_equal(s1.x, s2.x)

    @pytest.mark.parametrize("bad", [-1, 2.5, "abc", (1, -2)])
    def test_bad_seed_rejected(self, bad):
        with pytest.raises(ConfigError):
            generate_binary_sample(BINARY, 1000, bad)

    def test_population_size_must_be_positive(self):
        with pytest.raises(ConfigError):
            generate_binary_sample(BINARY, 0, 1)

    def test_binary_sample_is_binary_and_rolled(self, binary_sample):
        for col in (binary_sample.a, binary_sample.y,
                    binary_sample.z[:, 0], binary_sample.w[:, 0]):
            assert set(np.unique(col)) <= {0.0, 1.0}
        assert binary_sample.roles.nce == ("Z",)
        assert binary_sample.roles.nco == ("W",)
        assert binary_sample.x.shape[1] == 0

    def test_continuous_sample_columns(self, continuous_sample):
        assert continuous_sample.roles.covariates == ("X",)
        assert set(np.unique(continuous_sample.a)) <= {0.0, 1.0}
        assert np.all((continuous_sample.x >= 0.0) & (continuous_sample.x <= 1.0))
        # Z and W are continuous: far more distinct values than records / 10
        assert np.unique(continuous_sample.z).size > continuous_sample.n // 10


class TestAnalyticHelpers:
    def test_binary_selection_rate_matches_empirical(self):
        n = 200_000
        p = binary_selection_rate(BINARY)
        draws = generate_binary_sample(BINARY, n, 21)
        se = math.sqrt(p * (1 - p) / n)
        assert abs(draws.n / n - p) < 4 * se

    def test_continuous_selection_rate_matches_empirical(self):
        n = 200_000
        p = continuous_selection_rate(CONTINUOUS)
        draws = generate_continuous_sample(CONTINUOUS, n, 21)
        se = math.sqrt(p * (1 - p) / n)
        assert abs(draws.n / n - p) < 4 * se

    def test_binary_unvaccinated_counterfactual_value(self):
        # exp(eta_0y) * (P(U=0) + P(U=1) exp(eta_uy)) = 0.01 * 0.75
        assert binary_counterfactual_prevalence(BINARY, 0) == pytest.approx(0.0075)

    def test_null_effect_equalizes_arms(self):
        null = dataclasses.replace(BINARY, beta0=0.0)
        assert binary_counterfactual_prevalence(null, 0) == pytest.approx(
            binary_counterfactual_prevalence(null, 1))
        nullc = dataclasses.replace(CONTINUOUS, beta0=0.0)
        assert continuous_counterfactual_prevalence(nullc, 0) == pytest.approx(
            continuous_counterfactual_prevalence(nullc, 1))

    def test_marginal_prevalence_between_arm_prevalences(self):
        for params, fn in ((BINARY, binary_infection_prevalence),
                           (CONTINUOUS, continuous_infection_prevalence)):
            p0, p1, pm = fn(params, 0), fn(params, 1), fn(params)
            assert min(p0, p1) < pm < max(p0, p1)

    def test_confounding_direction(self):
        # U raises vaccination and lowers risk, so the naive vaccinated
        # prevalence sits below the counterfactual one
        assert binary_infection_prevalence(BINARY, 1) < binary_counterfactual_prevalence(BINARY, 1)

    def test_continuous_quadrature_matches_monte_carlo(self):
        rng = np.random.default_rng(5)
        n = 2_000_000
        u = rng.uniform(size=n)
        x = rng.uniform(size=n)
        pa1 = CONTINUOUS.propensity(u, x)
        risk = ((1 - pa1) * CONTINUOUS.infection_risk(0.0, u, x)
                + pa1 * CONTINUOUS.infection_risk(1.0, u, x))
        est = float(np.mean(risk))
        exact = (continuous_infection_prevalence(CONTINUOUS, 0)
                 * float(np.mean(1 - pa1))
                 + continuous_infection_prevalence(CONTINUOUS, 1) * float(np.mean(pa1)))
        assert est == pytest.approx(exact, rel=5e-3)


class TestScenarioConfig:
    def test_defaults(self):
        c = ScenarioConfig("binary", BINARY)
        assert c.n_population == 500_000
        assert c.replications == 200
        assert c.estimators == ("nc", "nc-oracle", "logistic")
        assert len(c.beta0_grid) == 4

    @pytest.mark.parametrize("kwargs", [
        {"estimators": ("nc", "mcmc")},
        {"threads": 0},
        {"seed": -4},
        {"seed": 1.5},
        {"beta0_grid": ()},
        {"replications": 0},
        {"n_population": 0},
    ])
    def test_rejects_bad_plan(self, kwargs):
        with pytest.raises(ConfigError):
            ScenarioConfig("binary", BINARY, **kwargs)


# small enough to run in seconds, large enough that the moment fit stays
# solvable in every replication at this seed
TINY = ScenarioConfig(
    "binary", BINARY, n_population=100_000, replications=3, seed=7,
    beta0_grid=(math.log(0.5), 0.0), estimators=("nc", "nc-oracle"))


@pytest.fixture(scope="module")
def tiny_summary():
    return run_monte_carlo(TINY)


class TestRunMonteCarlo:
    def test_row_order_is_estimator_major(self, tiny_summary):
        keys = [(r.estimator, r.beta0_true) for r in tiny_summary.rows]
        assert keys == [("nc", math.log(0.5)), ("nc", 0.0),
                        ("nc-oracle", math.log(0.5)), ("nc-oracle", 0.0)]

    def test_csv_header_and_shape(self, tiny_summary):
        text = tiny_summary.to_csv_text()
        lines = text.strip().split("\n")
        assert lines[0] == "estimator,beta0_true,mean_bias,sd,mean_se,coverage,n_mean,failures"
        assert len(lines) == 5

    def test_csv_floats_round_trip(self, tiny_summary):
        line = tiny_summary.to_csv_text().strip().split("\n")[1].split(",")
        row = tiny_summary.rows[0]
        assert float(line[1]) == row.beta0_true
        assert float(line[2]) == row.mean_bias
        assert float(line[4]) == row.mean_se

    def test_selected_size_tracks_selection_rate(self, tiny_summary):
        expect = TINY.n_population * binary_selection_rate(BINARY)
        for r in tiny_summary.rows:
            assert 0.5 * expect < r.n_mean < 2.0 * expect

    def test_row_lookup(self, tiny_summary):
        r = tiny_summary.row("nc-oracle", 0.0)
        assert r.estimator == "nc-oracle"
        with pytest.raises(KeyError):
            tiny_summary.row("nc", 0.123)

    def test_rerun_is_byte_identical(self, tiny_summary):
        again = run_monte_carlo(TINY)
        assert again.to_csv_text() == tiny_summary.to_csv_text()

    def test_worker_count_does_not_change_output(self, tiny_summary):
        pooled = run_monte_carlo(dataclasses.replace(TINY, threads=2))
        assert pooled.to_csv_text() == tiny_summary.to_csv_text()

    def test_detail_absent_by_default(self, tiny_summary):
        assert tiny_summary.detail == {}

    def test_keep_replications_records_every_run(self):
        cfg = dataclasses.replace(TINY, beta0_grid=(0.0,), keep_replications=True)
        out = run_monte_carlo(cfg)
        per = out.detail["estimates"]["nc"][repr(0.0)]
        assert len(per["beta_hat"]) == 3
        assert len(out.detail["n_selected"][repr(0.0)]) == 3
        assert not any(per["failed"])

    def test_json_dict_shape(self, tiny_summary):
        d = tiny_summary.to_json_dict()
        assert d["scenario"] == "binary"
        assert d["replications"] == 3
        assert len(d["rows"]) == 4
        assert d["rows"][0]["estimator"] == "nc"

    def test_widespread_failure_aborts(self, monkeypatch):
        def broken(sample, params, alpha_level):
            raise ConvergenceError("stub refused to fit")

        monkeypatch.setitem(sim._RUNNERS, "nc", broken)
        cfg = dataclasses.replace(TINY, beta0_grid=(0.0,), estimators=("nc",))
        with pytest.raises(ConvergenceError, match="failed in 3/3"):
            run_monte_carlo(cfg)

    def test_oracle_recovers_truth_at_scale(self, tiny_summary):
        # 3 reps of n~430: loose sanity band only
        r = tiny_summary.row("nc-oracle", math.log(0.5))
        assert abs(r.mean_bias) < 0.5
        assert r.failures == 0
