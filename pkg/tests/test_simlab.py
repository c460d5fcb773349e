import math

import numpy as np
import pytest

from smcimpute.dataset import VariableRole
from smcimpute.rng import stream
from smcimpute.simlab import (
    ScenarioConfig,
    apply_mar,
    apply_mcar,
    builtin_scenarios,
    calibrate_mar_intercept,
    exp_hazard_times,
    gen_cox,
    gen_interaction,
    gen_quadratic,
    mar_intercept,
    residual_variance,
    run_scenario,
    scenario_truth,
)

BIG = 1_000_000

# frozen before the build from a 10^6-draw oracle (analytic cross-check 0.67227)
COX_EVENT_FRACTION = 0.6723


# ---------------------------------------------------------------------------
# data-generating processes

@pytest.mark.parametrize("variant", ["normal", "lognormal", "normal_mixture"])
def test_quadratic_x_moments(variant):
    d = gen_quadratic(variant, BIG, stream(1, "x", variant))
    x = d.column("x").values
    assert abs(x.mean() - 2.0) < 0.01
    assert abs(x.var() - 1.0) < 0.02


@pytest.mark.parametrize("variant", ["normal", "lognormal", "normal_mixture"])
def test_quadratic_r_squared_is_half(variant):
    d = gen_quadratic(variant, BIG, stream(2, "r2", variant))
    x, y = d.column("x").values, d.column("y").values
    g = 4.0 - 4.0 * x + x * x
    r2 = np.var(g) / np.var(y)
    assert abs(r2 - 0.5) < 0.01


def test_quadratic_normal_residual_variance_is_analytic():
    # Var(-4X + X^2) = Var(Z^2 - 4) = 2 for X = 2 + Z, Z ~ N(0,1)
    assert residual_variance("quadratic", "normal") == pytest.approx(2.0, abs=0.03)


def test_interaction_bvnormal_correlation():
    d = gen_interaction("bvnormal", BIG, stream(3, "corr"))
    x1, x2 = d.column("x1").values, d.column("x2").values
    assert abs(np.corrcoef(x1, x2)[0, 1] - 0.5) < 0.01
    assert abs(x1.mean() - 2.0) < 0.01
    assert abs(x2.var() - 1.0) < 0.02


def test_interaction_bern_normal_conditional_mean():
    d = gen_interaction("bern_normal", BIG, stream(4, "bern"))
    x1, x2 = d.column("x1").values, d.column("x2").values
    assert set(np.unique(x1)) == {0.0, 1.0}
    assert abs(x2[x1 == 1.0].mean() - 1.0) < 0.01
    assert abs(x2[x1 == 0.0].mean()) < 0.01


def test_interaction_quad_conditional_mean_zero_at_two():
    d = gen_interaction("quad_conditional", BIG, stream(5, "quadcond"))
    x1, x2 = d.column("x1").values, d.column("x2").values
    window = np.abs(x1 - 2.0) < 0.05
    assert abs(x2[window].mean()) < 0.02


def test_interaction_r_squared_is_half():
    d = gen_interaction("bvlognormal", BIG, stream(6, "r2i"))
    x1, x2, y = (d.column(c).values for c in ("x1", "x2", "y"))
    g = x1 + x2 + x1 * x2
    assert abs(np.var(g) / np.var(y) - 0.5) < 0.01


def test_exp_hazard_times_mean():
    t = exp_hazard_times(np.zeros(BIG), 0.002, stream(7, "exp"))
    assert abs(t.mean() - 500.0) < 5.0


def test_cox_event_fraction_matches_pinned_oracle():
    d = gen_cox(BIG, stream(8, "cox"))
    assert abs(d.column("d").values.mean() - COX_EVENT_FRACTION) < 0.005


def test_cox_columns_valid():
    d = gen_cox(10_000, stream(9, "coxcols"))
    assert np.all(d.column("w").values > 0.0)
    assert set(np.unique(d.column("d").values)) <= {0.0, 1.0}
    assert d.column("w").role is VariableRole.TIME


def test_generation_is_seed_deterministic():
    a = gen_cox(500, stream(10, "det"))
    b = gen_cox(500, stream(10, "det"))
    for name in ("x1", "x2", "w", "d"):
        np.testing.assert_array_equal(a.column(name).values, b.column(name).values)


# ---------------------------------------------------------------------------
# missingness mechanisms

def test_mcar_keeps_everything_at_one():
    d = gen_quadratic("normal", 2000, stream(11, "mcar1"))
    masked = apply_mcar(d, 1.0, stream(11, "mask1"))
    assert masked.column("x").observed.all()


def test_mcar_fraction():
    d = gen_quadratic("normal", 100_000, stream(12, "mcar2"))
    masked = apply_mcar(d, 0.7, stream(12, "mask2"))
    assert abs(masked.column("x").observed.mean() - 0.7) < 0.005


def test_mcar_masks_independent_across_covariates():
    d = gen_interaction("bvnormal", 100_000, stream(13, "mcar3"))
    masked = apply_mcar(d, 0.7, stream(13, "mask3"))
    m1 = masked.column("x1").observed.astype(float)
    m2 = masked.column("x2").observed.astype(float)
    assert abs(np.corrcoef(m1, m2)[0, 1]) < 0.01


def test_calibrate_mar_intercept_closed_forms():
    y = np.zeros(10)
    assert calibrate_mar_intercept(y, 0.0, 0.7) == pytest.approx(math.log(7.0 / 3.0), abs=1e-9)
    assert calibrate_mar_intercept(y, 0.0, 0.5) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        calibrate_mar_intercept(y, 0.0, 1.5)


def test_mar_calibration_hits_marginal_rate():
    alpha0, alpha1 = mar_intercept("quadratic", "normal", 0.7)
    assert alpha1 < 0
    d = gen_quadratic("normal", BIG, stream(14, "marfresh"))
    masked = apply_mar(d, alpha0, alpha1, stream(14, "marmask"))
    assert abs(masked.column("x").observed.mean() - 0.7) < 0.005


def test_mar_observation_rate_decreases_in_y():
    alpha0, alpha1 = mar_intercept("quadratic", "normal", 0.7)
    d = gen_quadratic("normal", 200_000, stream(15, "marmono"))
    masked = apply_mar(d, alpha0, alpha1, stream(15, "marmonomask"))
    y = masked.column("y").values
    obs = masked.column("x").observed
    deciles = np.quantile(y, np.linspace(0.0, 1.0, 11))
    rates = [
        obs[(y >= deciles[i]) & (y < deciles[i + 1])].mean() for i in range(10)
    ]
    assert all(a > b for a, b in zip(rates[:-1], rates[1:]))


def test_mar_huge_intercept_removes_missingness():
    d = gen_quadratic("normal", 5000, stream(16, "marall"))
    masked = apply_mar(d, 60.0, -0.1, stream(16, "marallmask"))
    assert masked.column("x").observed.all()


# ---------------------------------------------------------------------------
# scenario runner

def test_scenario_summary_structure_and_determinism():
    cfg = ScenarioConfig(
        dgp="quadratic", variant="normal", mechanism="mcar",
        n=250, reps=4, m=3, methods=("fcs_linear", "smcfcs"), seed=77,
    )
    s1 = run_scenario(cfg, threads=1)
    s2 = run_scenario(cfg, threads=2)
    assert s1 == s2
    assert s1.n_used == 4
    row = s1.row("smcfcs", "x^2")
    assert 0.0 <= row.coverage <= 100.0
    assert row.n_failed == 0
    assert row.mc_error_mean == pytest.approx(row.sd / 2.0)


def test_complete_case_unbiased_under_mcar():
    cfg = ScenarioConfig(
        dgp="interaction", variant="bvnormal", mechanism="mcar",
        n=400, reps=60, m=2, methods=("cc",), seed=101,
    )
    s = run_scenario(cfg, threads=2)
    _, _, truth, labels = scenario_truth(cfg)
    for i, label in enumerate(labels):
        row = s.row("cc", label)
        assert abs(row.mean - truth[i]) < 3.0 * row.mc_error_mean + 1e-9


def test_study_scale_smcfcs_runs_need_no_fallback():
    # at the study designs' scales the rejection sampler never exhausts the
    # default attempt cap
    from smcimpute.engines import EngineConfig, default_covariate_specs, run_smcfcs
    from smcimpute.rng import subsequence

    for dgp, variant in (("quadratic", "normal"), ("interaction", "bvnormal"), ("cox", None)):
        cfg = ScenarioConfig(dgp=dgp, variant=variant, mechanism="mcar",
                             n=1000, reps=1, m=2, methods=("smcfcs",), seed=55)
        family, formula, _, _ = scenario_truth(cfg)
        if dgp == "quadratic":
            d = gen_quadratic(variant, cfg.n, stream(55, dgp, "data"))
        elif dgp == "interaction":
            d = gen_interaction(variant, cfg.n, stream(55, dgp, "data"))
        else:
            d = gen_cox(cfg.n, stream(55, dgp, "data"))
        d = apply_mcar(d, 0.7, stream(55, dgp, "mask"))
        engine_cfg = EngineConfig(
            method="smcfcs", m=2, substantive=(family, formula),
            covariate_specs=default_covariate_specs(d, "smcfcs"),
        )
        result = run_smcfcs(d, engine_cfg, rng=subsequence(55, dgp, "engine"))
        assert result.diagnostics.total_fallbacks() == 0
        for target in result.diagnostics.proposals:
            assert result.diagnostics.mean_acceptance(target) > 0.0


def test_builtin_scenarios_cover_all_studies():
    catalog = builtin_scenarios()
    assert "quad-normal-mcar" in catalog
    assert "quad-lognormal-mar" in catalog
    assert "interact-bvnormal-mar" in catalog
    assert "cox-n1000" in catalog and "cox-n100" in catalog
    assert len([k for k in catalog if k.startswith("quad-")]) == 6
    assert len([k for k in catalog if k.startswith("interact-")]) == 10
    cox = catalog["cox-n1000"]
    assert cox.methods == ("cc", "fcs_linear", "smcfcs")


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(dgp="quadratic", variant="weird", mechanism="mcar")
    with pytest.raises(ValueError):
        ScenarioConfig(dgp="cox", variant=None, mechanism="mar")
    with pytest.raises(ValueError):
        ScenarioConfig(dgp="cox", variant=None, mechanism="mcar", methods=("jav",))
