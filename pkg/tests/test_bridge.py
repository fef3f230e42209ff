import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ncve
from ncve import (
    BridgeSpec,
    CategoricalBridgeTable,
    ContinuousBridgeParams,
    bridge_from_json,
    bridge_to_json,
    default_moment_spec,
    eval_bridge,
    fit_bridge_moment,
    moment_residuals,
    oracle_bridge_binary,
    oracle_bridge_continuous,
    solve_bridge_categorical,
)
from ncve.errors import DegenerateDataError, IdentifiabilityError, SchemaError
from ncve.simulation import BinaryDgpParams, ContinuousDgpParams


class TestSolveBridgeCategorical:
    def test_two_by_two_hand_check(self):
        # P[u, z] = P(Z=z, A=1 | U=u) for the default generative table
        p = np.array([[0.8 * 0.2, 0.2 * 0.2],
                      [0.4 * 0.6, 0.6 * 0.6]])
        q = solve_bridge_categorical(p)
        npt.assert_allclose(q, [20.0 / 3.0, -5.0 / 3.0], rtol=1e-12)

    def test_singular_matrix_raises_identifiability(self):
        p = np.array([[0.2, 0.2], [0.1, 0.1]])
        with pytest.raises(IdentifiabilityError, match="no unique solution"):
            solve_bridge_categorical(p)

    def test_rejects_non_square_and_non_probability(self):
        with pytest.raises(ValueError):
            solve_bridge_categorical(np.ones((2, 3)) * 0.1)
        with pytest.raises(ValueError):
            solve_bridge_categorical(np.array([[0.5, 1.5], [0.25, 0.1]]))


class TestOracleBinary:
    def test_default_table_values(self):
        table = oracle_bridge_binary(BinaryDgpParams())
        assert table.eval(1, 0.0) == pytest.approx(20.0 / 3.0, rel=1e-12)
        assert table.eval(1, 1.0) == pytest.approx(-5.0 / 3.0, rel=1e-12)
        assert table.eval(0, 0.0) == pytest.approx(0.625, rel=1e-12)
        assert table.eval(0, 1.0) == pytest.approx(3.75, rel=1e-12)

    def test_unconfounded_treatment_reduces_to_inverse_marginal(self):
        # A independent of U (Z still loaded on U): weights collapse to 1/P(A=a)
        params = BinaryDgpParams(p_ua=0.0)
        table = oracle_bridge_binary(params)
        for z in (0.0, 1.0):
            assert table.eval(1, z) == pytest.approx(1.0 / 0.2, rel=1e-10)
            assert table.eval(0, z) == pytest.approx(1.0 / 0.8, rel=1e-10)

    @given(
        p_0z=st.floats(0.05, 0.5), d_z=st.floats(0.05, 0.45),
        p_0a=st.floats(0.05, 0.5), d_a=st.floats(0.05, 0.45),
        p_u=st.floats(0.1, 0.9),
    )
    @settings(max_examples=60, deadline=None)
    def test_inverse_propensity_identity_holds_generically(self, p_0z, d_z, p_0a, d_a, p_u):
        params = BinaryDgpParams(p_u=p_u, p_0z=p_0z, p_uz=d_z, p_0a=p_0a, p_ua=d_a)
        table = oracle_bridge_binary(params)
        for u in (0.0, 1.0):
            pz1 = p_0z + d_z * u
            pa1 = p_0a + d_a * u
            for a, pa in ((0, 1.0 - pa1), (1, pa1)):
                got = (1.0 - pz1) * table.eval(a, 0.0) + pz1 * table.eval(a, 1.0)
                assert got == pytest.approx(1.0 / pa, rel=1e-9)

    def test_confounder_free_nce_is_unidentifiable(self):
        with pytest.raises(IdentifiabilityError):
            oracle_bridge_binary(BinaryDgpParams(p_uz=0.0))


class TestOracleContinuous:
    def test_default_parameter_vector_is_exact(self):
        params = oracle_bridge_continuous(ContinuousDgpParams())
        assert np.array_equal(
            params.as_vector,
            np.array([-1.001953125, 0.06640625, -0.25, 0.3125]),
        )

    def test_zero_confounder_loading_raises(self):
        with pytest.raises(IdentifiabilityError):
            oracle_bridge_continuous(ContinuousDgpParams(mu_uz=0.0))

    def test_eval_is_strictly_positive(self):
        params = oracle_bridge_continuous(ContinuousDgpParams())
        rng = np.random.default_rng(0)
        a = (rng.random(200) < 0.5).astype(float)
        z = rng.normal(2.0, 1.0, 200)
        x = rng.random((200, 1))
        assert np.all(params.eval(a, z, x) > 0.0)


class TestMomentSpec:
    def test_default_feature_layout_binary(self):
        spec = default_moment_spec(n_nco=1, n_covariates=0)
        assert spec.dim == 4  # 1, W, A, A*W
        vals = spec.values(np.array([[1.0]]), np.array([1.0]), np.empty((1, 0)))
        npt.assert_allclose(vals, [[1.0, 1.0, 1.0, 1.0]])

    def test_default_feature_layout_with_covariate(self):
        spec = default_moment_spec(n_nco=1, n_covariates=1)
        assert spec.dim == 6  # 1, W, A, X, A*W, A*X
        vals = spec.values(np.array([[2.0]]), np.array([1.0]), np.array([[3.0]]))
        npt.assert_allclose(vals, [[1.0, 2.0, 1.0, 3.0, 2.0, 3.0]])


class TestFitBridgeBinary:
    def test_exactly_identified_fit_drives_residual_to_zero(self, binary_sample, binary_bridge):
        assert binary_bridge.residual_norm <= 1e-10
        resid = moment_residuals(binary_bridge, binary_sample)
        npt.assert_allclose(resid, np.zeros(4), atol=1e-10)

    def test_fit_approaches_oracle_on_large_sample(self):
        params = BinaryDgpParams()
        sample = ncve.generate_binary_sample(params, 3_000_000, 99)
        fit = fit_bridge_moment(sample, BridgeSpec.saturated())
        oracle = oracle_bridge_binary(params)
        for a in (0, 1):
            for z in (0.0, 1.0):
                got = fit.eval(float(a), np.array([[z]]))
                assert got == pytest.approx(oracle.eval(a, z), abs=0.6)

    def test_controls_required_in_both_arms(self):
        a = np.array([0.0, 0.0, 1.0, 1.0])
        y = np.array([0.0, 0.0, 1.0, 1.0])  # no vaccinated controls
        z = np.array([[0.0], [1.0], [0.0], [1.0]])
        w = np.array([[0.0], [1.0], [1.0], [0.0]])
        s = ncve.TndSample(a, y, z, w, np.empty((4, 0)),
                           ncve.VariableRoles("A", "Y", ("Z",), ("W",)))
        with pytest.raises(DegenerateDataError):
            fit_bridge_moment(s, BridgeSpec.saturated())

    def test_underidentified_moment_spec_rejected(self, binary_sample):
        thin = ncve.MomentSpec(fn=lambda w, a, x: np.ones((a.shape[0], 2)),
                               dim=2, names=("m1", "m2"), tag="too-thin")
        with pytest.raises(IdentifiabilityError):
            fit_bridge_moment(binary_sample, BridgeSpec.saturated(), m_spec=thin)


class TestFitBridgeContinuous:
    def test_overidentified_fit_converges(self, continuous_sample, continuous_bridge):
        assert continuous_bridge.m_spec.dim == 6
        assert continuous_bridge.spec.param_dim == 4
        assert np.all(np.isfinite(continuous_bridge.tau_hat))
        # over-identified: residual is small but genuinely nonzero
        assert 0.0 < continuous_bridge.residual_norm < 0.1

    def test_fitted_weights_are_positive(self, continuous_sample, continuous_bridge):
        q = continuous_bridge.eval(continuous_sample.a, continuous_sample.z,
                                   continuous_sample.x)
        assert np.all(q > 0.0)


class TestEvalBridge:
    def test_scalar_in_scalar_out(self):
        table = oracle_bridge_binary(BinaryDgpParams())
        out = eval_bridge(table, 1, 0.0)
        assert isinstance(out, float)

    def test_vector_in_vector_out(self):
        table = oracle_bridge_binary(BinaryDgpParams())
        out = eval_bridge(table, np.array([0.0, 1.0]), np.array([1.0, 1.0]))
        npt.assert_allclose(out, [3.75, -5.0 / 3.0])

    def test_unknown_level_raises(self):
        table = oracle_bridge_binary(BinaryDgpParams())
        with pytest.raises(DegenerateDataError):
            table.eval(1, 0.5)


class TestBridgeJson:
    def test_categorical_round_trip(self):
        table = oracle_bridge_binary(BinaryDgpParams())
        doc = bridge_to_json(table)
        back = bridge_from_json(json.loads(json.dumps(doc)) if isinstance(doc, dict) else json.loads(doc))
        for a in (0, 1):
            for z in (0.0, 1.0):
                assert back.eval(a, z) == table.eval(a, z)

    def test_continuous_round_trip(self):
        params = oracle_bridge_continuous(ContinuousDgpParams())
        doc = bridge_to_json(params)
        back = bridge_from_json(json.loads(json.dumps(doc)) if isinstance(doc, dict) else json.loads(doc))
        npt.assert_array_equal(back.as_vector, params.as_vector)

    def test_fit_round_trip_evaluates_identically(self, continuous_sample, continuous_bridge):
        doc = bridge_to_json(continuous_bridge)
        back = bridge_from_json(json.loads(json.dumps(doc)) if isinstance(doc, dict) else json.loads(doc))
        a, z, x = continuous_sample.a[:50], continuous_sample.z[:50], continuous_sample.x[:50]
        npt.assert_array_equal(back.eval(a, z, x), continuous_bridge.eval(a, z, x))

    def test_custom_feature_bridge_does_not_serialize(self, binary_sample):
        spec = BridgeSpec.linear_in_features(
            lambda a, z, x: np.column_stack([np.ones_like(a), a, z[:, 0], a * z[:, 0]]),
            ("c0", "c1", "c2", "c3"))
        fit = fit_bridge_moment(binary_sample, spec)
        with pytest.raises(ValueError):
            bridge_to_json(fit)
