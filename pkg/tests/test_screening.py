import math
import time

import numpy as np
import pytest

from src.core.designs import Design
from src.core.errors import ConfigError, ValidationError
from src.core.screening import (
    HEADLINE_METHODS,
    LAMBDA_THRESHOLD_KINDS,
    AnalysisConfig,
    HitList,
    analyze,
    dual_assay_hits,
    elastic_net_permutation,
    gauss_lasso,
    lambda_relative_threshold,
    lambda_specific_gauss_lasso,
    nonneg_gauss_lasso,
    orthogonal_pooling_detect,
    prepare_analysis,
    run_analysis,
    screen_estimates,
    comparison_methods,
    wrong_sign_threshold,
)
from src.core.simulation import classification_metrics, generate_scenario


# ============================================================
# Configuration
# ============================================================

def test_config_normalizes_cli_aliases():
    config = AnalysisConfig(method="lambda-gl", threshold_value=0.9)
    assert config.method == "lambda_gl"
    assert config.tag == "lambda_gl(r=0.9)"


@pytest.mark.parametrize(
    "settings",
    [
        {"method": "bogus"},
        {"threshold_value": 0.0},
        {"method": "lambda_gl", "threshold_value": 1.5},
        {"method": "gauss_lasso", "threshold_kind": "sigma_fraction", "threshold_value": 0.25},
        {"method": "gauss_lasso", "threshold_kind": "lambda_relative"},
        {"method": "gauss_lasso", "threshold_kind": "wrong_sign_relative"},
        {"method": "lambda_gl", "threshold_kind": "max_beta0_fraction"},
        {"method": "nonneg_gauss_lasso", "threshold_kind": "max_beta0_fraction", "effect_sign": "negative"},
        {"effect_sign": "sideways"},
        {"method": "elastic_net_perm", "p_cutoff": 1.0},
        {"unknown_key": 1},
    ],
)
def test_config_rejects_invalid_settings(settings):
    with pytest.raises(ConfigError):
        AnalysisConfig.from_dict(settings)


def test_comparison_presets():
    methods = comparison_methods(sigma=1.0)
    assert len(methods) == 13
    assert methods["GL tau=sigma/8"].threshold_value == pytest.approx(0.125)
    assert methods["LSGL r=0.7"].method == "lambda_gl"
    assert set(HEADLINE_METHODS) <= set(methods)
    # the non-negative family only exists for positive effects
    assert len(comparison_methods(effect_sign="negative")) == 9


# ============================================================
# Threshold helpers
# ============================================================

def test_screen_estimates_drops_wrong_sign_and_small_values():
    estimates = np.array([0.5, -0.9, 0.2, 0.0, 0.3])
    assert screen_estimates(estimates, 1, 0.3).tolist() == [0, 4]
    assert screen_estimates(estimates, -1, 0.3).tolist() == [1]


def test_lambda_relative_threshold_keeps_ties_with_the_maximum():
    estimates = np.array([0.4, 0.4, 0.1, -2.0])
    tau = lambda_relative_threshold(estimates, 1, 1.0)
    assert tau == pytest.approx(0.4)
    assert screen_estimates(estimates, 1, tau).tolist() == [0, 1]
    assert lambda_relative_threshold(np.array([-1.0, 0.0]), 1, 0.5) == math.inf


def test_wrong_sign_threshold_uses_the_largest_opposite_estimate():
    estimates = np.array([0.9, 0.3, -0.2, -0.5, 0.0])
    assert wrong_sign_threshold(estimates, 1, 0.5) == pytest.approx(0.25)
    assert screen_estimates(estimates, 1, wrong_sign_threshold(estimates, 1, 1.0)).tolist() == [0]
    # no opposite-sign noise: every right-sign estimate survives
    clean = np.array([0.4, 0.0, 0.1])
    assert wrong_sign_threshold(clean, 1, 1.0) == 0.0
    assert screen_estimates(clean, 1, 0.0).tolist() == [0, 2]
    assert wrong_sign_threshold(estimates, -1, 1.0) == pytest.approx(0.9)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("sign", [1, -1])
def test_raising_the_threshold_never_enlarges_the_support(seed, sign):
    estimates = np.random.default_rng(seed).normal(size=40)
    estimates[np.abs(estimates) < 0.3] = 0.0

    def support(tau):
        return set(screen_estimates(estimates, sign, tau).tolist())

    taus = [0.0, 0.1, 0.5, 1.0, 2.0]
    for low, high in zip(taus, taus[1:]):
        assert support(high) <= support(low)
    ratios = [0.1, 0.5, 0.7, 0.9, 1.0]
    for reference in (lambda_relative_threshold, wrong_sign_threshold):
        for low, high in zip(ratios, ratios[1:]):
            assert support(reference(estimates, sign, high)) <= support(reference(estimates, sign, low))


# ============================================================
# Gauss-Lasso family
# ============================================================

def test_lambda_specific_gauss_lasso_finds_planted_compounds(planted_design, planted_response, planted_ids):
    config = AnalysisConfig("lambda_gl", "lambda_relative", 0.5)
    hits = lambda_specific_gauss_lasso(planted_design, planted_response, config)
    assert hits.hits == planted_ids
    assert set(hits.per_compound) == set(planted_ids)
    assert all(v["estimate"] > 0 for v in hits.per_compound.values())
    assert hits.details["lambda"] > 0


def test_lambda_specific_with_ratio_one_keeps_a_planted_compound(planted_design, planted_response, planted_ids):
    config = AnalysisConfig("lambda_gl", "lambda_relative", 1.0)
    hits = lambda_specific_gauss_lasso(planted_design, planted_response, config)
    assert hits.hits
    assert set(hits.hits) <= set(planted_ids)


def test_wrong_sign_reference_keeps_both_planted_compounds(planted_design, planted_response, planted_ids):
    config = AnalysisConfig("lambda_gl", "wrong_sign_relative", 1.0)
    hits = lambda_specific_gauss_lasso(planted_design, planted_response, config)
    assert config.tag == "lambda_gl(r=1*max wrong-sign)"
    assert set(planted_ids) <= set(hits.hits)


def test_vanishing_thresholds_coincide(planted_design, planted_response):
    prepared = prepare_analysis(planted_design, planted_response)
    tiny = 1e-9
    fixed = run_analysis(prepared, AnalysisConfig("gauss_lasso", "sigma_fraction", tiny, sigma=1.0))
    for kind in LAMBDA_THRESHOLD_KINDS:
        relative = run_analysis(prepared, AnalysisConfig("lambda_gl", kind, tiny))
        assert relative.hits == fixed.hits
        assert relative.details["bic"] == pytest.approx(fixed.details["bic"])


@pytest.mark.parametrize("effect_sign", ["positive", "negative"])
def test_every_hit_carries_the_configured_sign(planted_design, planted_response, effect_sign):
    sign = 1 if effect_sign == "positive" else -1
    prepared = prepare_analysis(planted_design, sign * planted_response)
    for name, config in comparison_methods(sigma=0.3, effect_sign=effect_sign).items():
        hits = run_analysis(prepared, config)
        assert hits.hits, name
        for compound in hits.hits:
            assert sign * hits.per_compound[compound]["estimate"] > 0, (name, compound)


@pytest.mark.slow
def test_lambda_relative_rules_at_desk_scale(reference_design_640):
    scenario = generate_scenario(reference_design_640, beta=4.0, sigma=1.0, seed=2024)
    prepared = prepare_analysis(scenario.design, scenario.y)
    right_sign = run_analysis(prepared, AnalysisConfig("lambda_gl", "lambda_relative", 1.0))
    wrong_sign = run_analysis(prepared, AnalysisConfig("lambda_gl", "wrong_sign_relative", 1.0))

    # r = 1 against the right-sign maximum keeps one compound per lambda
    assert len(right_sign.hits) <= 1
    assert scenario.sparsity == 7
    assert classification_metrics(right_sign.indices(), scenario.active_set, 640).tpr <= 1 / 7
    assert classification_metrics(wrong_sign.indices(), scenario.active_set, 640).tpr >= 0.5


def test_gauss_lasso_with_max_fraction_threshold(planted_design, planted_response, planted_ids):
    config = AnalysisConfig("gauss_lasso", "max_beta0_fraction", 0.5)
    hits = gauss_lasso(planted_design, planted_response, config)
    assert hits.hits == planted_ids
    assert hits.details["tau"] > 0.5


def test_gauss_lasso_with_sigma_threshold_keeps_planted(planted_design, planted_response, planted_ids):
    config = AnalysisConfig("gauss_lasso", "sigma_fraction", 0.25, sigma=0.3)
    hits = gauss_lasso(planted_design, planted_response, config)
    assert hits.details["tau"] == pytest.approx(0.075)
    assert set(planted_ids) <= set(hits.hits)


def test_nonneg_gauss_lasso(planted_design, planted_response, planted_ids):
    config = AnalysisConfig("nonneg_gauss_lasso", "max_beta0_fraction", 0.5)
    hits = nonneg_gauss_lasso(planted_design, planted_response, config)
    assert hits.hits == planted_ids


def test_negative_effects_are_detected_with_negative_sign(planted_design, planted_response, planted_ids):
    config = AnalysisConfig("lambda_gl", "lambda_relative", 0.5, effect_sign="negative")
    assert lambda_specific_gauss_lasso(planted_design, -planted_response, config).hits == planted_ids
    # same data, wrong direction: the planted compounds never qualify
    wrong = lambda_specific_gauss_lasso(planted_design, planted_response, config)
    assert not set(wrong.hits) & set(planted_ids)


def test_flat_response_gives_no_hits(planted_design):
    y = np.full(planted_design.n, 2.0)
    hits = analyze(planted_design, y, AnalysisConfig("lambda_gl", "lambda_relative", 1.0))
    assert hits.hits == []


def test_variants_share_prepared_paths(planted_design, planted_response):
    prepared = prepare_analysis(planted_design, planted_response)
    first = run_analysis(prepared, AnalysisConfig("lambda_gl", "lambda_relative", 0.9))
    path = prepared.path()
    second = run_analysis(prepared, AnalysisConfig("gauss_lasso", "max_beta0_fraction", 0.1))
    assert prepared.path() is path
    assert first.compound_ids == second.compound_ids


def test_method_called_with_wrong_config_raises(planted_design, planted_response):
    with pytest.raises(ConfigError):
        gauss_lasso(planted_design, planted_response, AnalysisConfig("lambda_gl"))


def test_response_length_must_match_design(planted_design):
    with pytest.raises(ValidationError):
        prepare_analysis(planted_design, np.zeros(planted_design.n - 1))


# ============================================================
# Elastic net with permutations
# ============================================================

def test_elastic_net_permutation_calls_planted_hits(planted_design, planted_response, planted_ids):
    config = AnalysisConfig("elastic_net_perm", n_permutations=200, seed=9)
    hits = elastic_net_permutation(planted_design, planted_response, config)
    assert set(planted_ids) <= set(hits.hits)
    for compound in planted_ids:
        assert hits.per_compound[compound]["p_value"] == 0.0
    assert hits.details["alpha"] in config.alpha_grid
    assert not hits.diagnostics

    again = elastic_net_permutation(planted_design, planted_response, config)
    assert again.hits == hits.hits


def test_elastic_net_permutation_under_pure_noise(planted_design):
    rng = np.random.default_rng(31)
    replicates = 10
    flagged = 0
    for rep in range(replicates):
        y = rng.standard_normal(planted_design.n)
        config = AnalysisConfig("elastic_net_perm", n_permutations=200, seed=rep)
        flagged += len(elastic_net_permutation(planted_design, y, config).hits)
    assert flagged / (replicates * planted_design.k) <= 2 * config.p_cutoff


@pytest.mark.slow
def test_elastic_net_permutation_desk_scale_runtime(reference_design_640):
    scenario = generate_scenario(reference_design_640, beta=4.0, sigma=1.0, seed=11)
    config = AnalysisConfig("elastic_net_perm", n_permutations=200, seed=3)
    start = time.perf_counter()
    hits = elastic_net_permutation(scenario.design, scenario.y, config)
    assert time.perf_counter() - start < 30
    assert hits.details["n_permutations"] == 200


def test_few_permutations_are_flagged(planted_design, planted_response):
    config = AnalysisConfig("elastic_net_perm", n_permutations=20, seed=1)
    hits = elastic_net_permutation(planted_design, planted_response, config)
    assert any("permutations" in d for d in hits.diagnostics)


# ============================================================
# Orthogonal pooling and assay reconciliation
# ============================================================

def _two_replicate_design():
    U = np.zeros((20, 10), dtype=np.uint8)
    for j in range(10):
        U[j, j] = U[j + 10, j] = 1
    return Design.from_membership(U)


def test_orthogonal_pooling_needs_both_wells_beyond_cutoff():
    design = _two_replicate_design()
    y = np.arange(20) * 0.01
    y[2], y[12] = 6.0, 5.5
    y[4] = 7.0
    hits = orthogonal_pooling_detect(design, y, percentile=0.85)
    assert hits.hits == ["C0003"]


def test_orthogonal_pooling_negative_direction():
    design = _two_replicate_design()
    y = np.arange(20) * 0.01
    y[5], y[15] = -6.0, -5.5
    hits = orthogonal_pooling_detect(design, y, percentile=0.85, effect_sign="negative")
    assert hits.hits == ["C0006"]


def test_orthogonal_pooling_rejects_other_replication(small_design):
    with pytest.raises(ValidationError, match="exactly 2 wells"):
        orthogonal_pooling_detect(small_design, np.zeros(small_design.n))


def test_dual_assay_hits_splits_candidates_and_pseudo_hits():
    ids = ["A", "B", "C", "D"]
    wt = HitList(["C", "A", "B"], {"A": {"estimate": -1.0}}, "m", ids)
    mut = HitList(["B", "D"], {}, "m", ids)
    dual = dual_assay_hits(wt, mut)
    assert dual.hits == ["A", "C"]
    assert dual.pseudo_hits == ["B"]
    assert dual.details["mut_hits"] == ["B", "D"]


def test_dual_assay_hits_needs_same_universe():
    with pytest.raises(ValidationError):
        dual_assay_hits(HitList([], {}, "m", ["A"]), HitList([], {}, "m", ["B"]))


def test_hit_list_rejects_foreign_compounds():
    with pytest.raises(ValidationError):
        HitList(["Z"], {}, "m", ["A", "B"])
