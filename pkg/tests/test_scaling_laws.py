import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinlab.curves import ScalingCurve
from twinlab.lnp_sim import CoreMixSpec, PoissonNeuronSpec, run_scaling_sweep
from twinlab.scaling_laws import (
    LawForm,
    SigmoidLawFit,
    UnreachableTarget,
    analytic_feve,
    analytic_feve_sigmoid,
    asymptote,
    compare_theory_simulation,
    fit_law,
    logit,
    predict_law,
    sigmoid,
    simulate_gaussian_feve,
    time_to_target,
)

T = np.geomspace(10, 1e5, 9)


def law(form, **params):
    return SigmoidLawFit(LawForm(form), params)


def curve_from(form, params, t=T, cov=None):
    y = predict_law(law(form, **params), t, cov)
    return ScalingCurve(t, y)


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_saturation(self):
        assert 1.0 - sigmoid(40.0) < 1e-17

    def test_ln4(self):
        assert abs(sigmoid(math.log(4)) - 0.8) < 1e-15

    def test_extreme_inputs_finite(self):
        assert sigmoid(-700.0) >= 0.0 and sigmoid(700.0) == 1.0

    def test_logit_inverse(self):
        assert abs(logit(sigmoid(1.7)) - 1.7) < 1e-12


class TestPredict:
    def test_basic_at_one(self):
        assert predict_law(law("basic", a=1.0, c=0.0), 1.0) == 0.5

    def test_wrong_core_unit_equals_basic(self):
        b = predict_law(law("basic", a=1.2, c=-4.0), T)
        w = predict_law(law("wrong_core", a=1.2, b=3.0, c=-4.0), T, {"r2_core": 1.0})
        assert np.allclose(b, w, atol=1e-15)

    def test_learned_core_limit(self):
        b = predict_law(law("basic", a=1.2, c=-4.0), T)
        lc = predict_law(law("learned_core", a=1.2, b=0.7, c=-4.0, a_core=1e6, c_core=0.0), T, {"neurons": 100})
        assert np.allclose(b, lc, atol=1e-9)

    def test_missing_covariate_named(self):
        with pytest.raises(KeyError, match="readout_params"):
            predict_law(law("readout", a=1.0, b=0.0, c=0.0), 10.0)
        with pytest.raises(KeyError, match="neurons"):
            predict_law(law("learned_core", a=1, b=0, c=0, a_core=1, c_core=0), 10.0, {})

    @settings(max_examples=60, deadline=None)
    @given(st.sampled_from(["basic", "readout", "wrong_core", "learned_core"]),
           st.floats(0.05, 3.0), st.floats(-2.0, 2.0), st.floats(-8.0, 2.0))
    def test_increasing_in_t(self, form, a, b, c):
        params = {"a": a, "c": c}
        cov = {}
        if form != "basic":
            params["b"] = b
        if form == "readout":
            cov = {"readout_params": 50.0}
        if form == "wrong_core":
            cov = {"r2_core": 0.6}
        if form == "learned_core":
            params.update(a_core=0.2, c_core=-1.0)
            cov = {"neurons": 100.0}
        y = predict_law(law(form, **params), np.geomspace(1, 1e4, 40), cov)
        d = np.diff(y)
        assert np.all(d >= 0) and np.any(d > 0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.05, 0.99), st.floats(0.2, 2.0), st.floats(-5, 2), st.floats(-1, 1))
    def test_wrong_core_asymptote(self, r, a, c, b):
        fit = law("wrong_core", a=a, b=b, c=c)
        assert asymptote(fit, {"r2_core": r}) == r
        assert abs(predict_law(fit, 1e300, {"r2_core": r}) - r) < 1e-9
        assert predict_law(fit, 1e12, {"r2_core": r}) <= r


class TestInversion:
    def test_basic_closed_form(self):
        t = time_to_target(law("basic", a=1.0, c=-5.0), 0.8)
        assert abs(t - math.exp(math.log(4) + 5)) < 1e-9
        assert abs(t - 593.65) < 0.01

    def test_wrong_core_unreachable(self):
        with pytest.raises(UnreachableTarget, match="unreachable target"):
            time_to_target(law("wrong_core", a=1.0, b=0.0, c=-5.0), 0.8, {"r2_core": 0.7})

    @pytest.mark.parametrize("form,params,cov", [
        ("basic", {"a": 1.3, "c": -5.0}, None),
        ("readout", {"a": 1.3, "b": -0.4, "c": -3.0}, {"readout_params": 40.0}),
        ("wrong_core", {"a": 1.1, "b": 0.8, "c": -4.0}, {"r2_core": 0.7}),
        ("learned_core", {"a": 1.13, "b": 0.5, "c": -5.0, "a_core": 0.15, "c_core": -1.0}, {"neurons": 1000.0}),
        ("analytic", {"noise_variance": 2.0}, {"readout_dim": 10.0}),
    ])
    @pytest.mark.parametrize("target", [0.1, 0.5, 0.65])
    def test_round_trip(self, form, params, cov, target):
        fit = law(form, **params)
        t = time_to_target(fit, target, cov)
        assert abs(predict_law(fit, t, cov) - target) < 1e-9

    def test_non_increasing_unreachable(self):
        with pytest.raises(UnreachableTarget):
            time_to_target(law("basic", a=-1.0, c=0.0), 0.5)

    def test_target_range(self):
        with pytest.raises(ValueError):
            time_to_target(law("basic", a=1.0, c=0.0), 1.0)


class TestFit:
    def test_basic_round_trip(self):
        fit = fit_law(curve_from("basic", {"a": 1.2, "c": -4.0}), "basic")
        assert fit.converged
        assert abs(fit.params["a"] - 1.2) < 1e-6 and abs(fit.params["c"] + 4.0) < 1e-6
        assert fit.goodness_r2 > 1 - 1e-12

    def test_scale_covariance(self):
        rng = np.random.default_rng(0)
        y = sigmoid(1.1 * np.log(T) - 4.5) + 0.01 * rng.standard_normal(T.size)
        f1 = fit_law(ScalingCurve(T, y), "basic")
        k = 7.0
        f2 = fit_law(ScalingCurve(T * k, y), "basic")
        assert abs(f1.params["a"] - f2.params["a"]) < 1e-6
        assert abs(f2.params["c"] - (f1.params["c"] - f1.params["a"] * math.log(k))) < 1e-6
        assert abs(f1.goodness_r2 - f2.goodness_r2) < 1e-6

    def test_constant_is_degenerate(self):
        fit = fit_law(ScalingCurve(T, np.full(T.size, 0.4)), "basic")
        assert fit.degenerate or not fit.converged or abs(fit.params["a"]) < 1e-3

    def test_readout_round_trip(self):
        curves, covs = [], []
        for m in (10, 30, 100):
            cov = {"readout_params": float(m)}
            curves.append(curve_from("readout", {"a": 1.1, "b": -0.9, "c": -1.5}, cov=cov))
            covs.append(cov)
        fit = fit_law(curves, "readout", covs)
        for k, v in {"a": 1.1, "b": -0.9, "c": -1.5}.items():
            assert abs(fit.params[k] - v) < 1e-6

    def test_wrong_core_joint_with_free_ceiling(self):
        p = {"a": 1.2, "b": 1.5, "c": -6.0}
        c1 = curve_from("wrong_core", p, cov={"r2_core": 1.0})
        c2 = curve_from("wrong_core", p, np.geomspace(10, 1e7, 12), cov={"r2_core": 0.3})
        fit = fit_law([c1, c2], "wrong_core", [{"r2_core": 1.0}, {"r2_core": None}])
        assert fit.converged
        assert abs(list(fit.ceilings.values())[0] - 0.3) < 1e-5
        for k, v in p.items():
            assert abs(fit.params[k] - v) < 1e-4

    def test_learned_core_recovery(self):
        p = {"a": 1.13, "b": 0.5, "c": -5.0, "a_core": 0.15, "c_core": -1.0}
        t = np.geomspace(10, 1e6, 12)
        curves = [curve_from("learned_core", p, t, {"neurons": n}) for n in (100, 1000, 10000)]
        fit = fit_law(curves, "learned_core", [{"neurons": n} for n in (100, 1000, 10000)])
        for k in ("a", "a_core"):
            assert abs(fit.params[k] / p[k] - 1) < 0.05
        assert fit.goodness_r2 > 0.99

    def test_analytic_fit(self):
        t = np.geomspace(3, 3000, 8)
        fit = fit_law(curve_from("analytic", {"noise_variance": 1.7}, t, {"readout_dim": 10}), "analytic",
                      {"readout_dim": 10})
        assert abs(fit.params["noise_variance"] - 1.7) < 1e-6

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit_law(ScalingCurve([1.0, 2.0], [0.1, 0.2]), "basic")

    def test_correct_core_sweep_fits(self):
        spec = PoissonNeuronSpec.draw(10, rng_seed=0)
        curve = run_scaling_sweep(spec, t_grid=[100, 300, 1000, 3000, 10000, 30000], replicates=20, rng_seed=0)
        fit = fit_law(curve, "basic")
        assert fit.converged and fit.goodness_r2 > 0.99

    def test_se_weighting_accepted(self):
        y = sigmoid(1.2 * np.log(T) - 4.0)
        fit = fit_law(ScalingCurve(T, y, np.full(T.size, 0.01)), "basic", weighting="se")
        assert abs(fit.params["a"] - 1.2) < 1e-6

    def test_report_dict(self):
        d = fit_law(curve_from("basic", {"a": 1.0, "c": -3.0}), "basic").to_dict()
        assert d["form"] == "basic" and set(d["params"]) == {"a", "c"}


class TestAnalytic:
    def test_half(self):
        assert analytic_feve(100, 10, 10) == 0.5

    def test_limit(self):
        assert 1 - analytic_feve(1e9, 10, 1) < 1e-6

    @settings(max_examples=100)
    @given(st.floats(1e-3, 1e6), st.floats(1e-3, 1e4), st.floats(1e-4, 1e3))
    def test_sigmoid_identity(self, n, m, s2):
        assert abs(n / (n + m * s2) - analytic_feve_sigmoid(n, m, s2)) < 1e-12

    def test_monte_carlo_cell(self):
        feve, se = simulate_gaussian_feve(300, 10, 1.0, 200, np.random.default_rng(0))
        assert abs(feve - analytic_feve(300, 10, 1.0)) <= 0.02

    def test_bad_args(self):
        with pytest.raises(ValueError):
            analytic_feve(0, 1, 1)

    def test_report_flags_and_notes(self):
        rep = compare_theory_simulation([(10, 30, 1.0), (1000, 3, 0.3)], replicates=50, rng_seed=1)
        assert rep.rows[0].note == "outside classic regime" and not rep.rows[0].classic_regime
        assert rep.rows[1].classic_regime and not rep.rows[1].breach
        assert rep.to_csv().count("\n") == 3

    def test_zero_replicates(self):
        with pytest.raises(ValueError):
            compare_theory_simulation([(10, 3, 1.0)], replicates=0)

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            compare_theory_simulation([], replicates=5)


class TestCurveIO:
    def test_csv_round_trip(self):
        c = ScalingCurve([10.0, 100.0, 1000.0], [0.1, float("nan"), 0.9], [0.01, float("nan"), 0.02], [20, 0, 20])
        back = ScalingCurve.from_csv(c.to_csv())
        assert back.to_csv() == c.to_csv()
        assert c.to_csv().splitlines()[0] == "t,feve_mean,feve_se,n_replicates"

    def test_json_has_config(self):
        spec = PoissonNeuronSpec.draw(3)
        c = run_scaling_sweep(spec, CoreMixSpec(0.5), [50, 100], 2, 0)
        assert '"alpha": 0.5' in c.to_json()

    def test_non_increasing_rejected(self):
        with pytest.raises(ValueError):
            ScalingCurve([10.0, 10.0, 20.0], [0.1, 0.2, 0.3])
