#!/usr/bin/env python3
"""
Tests for the decomposition estimators: weighting, differential, regression and interposed.
"""

import os
import sys

# Add the project root to Python path before other imports
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.append(project_root)

import json
import logging

import numpy as np
import pandas as pd
import pytest

from utils.data_table import ColumnSpec, ObservationTable
from utils.errors import ConfigurationError
from utils.estimators import (EstimatorTag, compute_balancing_weights, decompose, decompose_interposed,
                              decompose_regression, fit_group_model, percent_reduction, run_estimator)
from utils.glm_core import DesignSpec, fit_multinomial_logit
from utils.structural_model import generate, load_structural_model, make_structural_model

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

CONFIG_DIR = os.path.join(project_root, "config")

LINEAR_MODEL = {
    "name": "linear homogeneous effects",
    "variables": [
        {"name": "c", "role": "covariate", "values": ["0", "1"], "table": [{"probs": [0.5, 0.5]}]},
        {"name": "r", "role": "group", "values": ["0", "1"],
         "logit": [{"value": "1", "intercept": -0.1, "effects": {"c": {"1": 0.4}}}]},
        {"name": "x", "role": "confounder_pre",
         "equation": {"effects": {"r": {"1": 0.5}, "c": 0.3}, "noise_sd": 1.0}},
        {"name": "d", "role": "mediator",
         "equation": {"effects": {"r": {"1": 0.4}, "x": 0.5, "c": 0.2}, "noise_sd": 1.0}},
        {"name": "y", "role": "outcome",
         "equation": {"intercept": 1.0, "effects": {"r": {"1": -0.3}, "x": 0.6, "d": 0.5, "c": 0.2},
                      "noise_sd": 1.0}},
    ],
}


def _joint_data(n: int = 4000, seed: int = 11):
    model = load_structural_model(os.path.join(CONFIG_DIR, "model_joint.json"))
    return model, generate(model, n, seed=seed)


def _check_identity(estimates):
    for estimate in estimates:
        assert abs(estimate.tau - (estimate.delta + estimate.zeta)) <= 1e-12


def test_percent_reduction():
    logger.info("=== Testing Percent Reduction ===")
    assert round(percent_reduction(-0.599, -0.976), 1) == 61.4
    assert round(percent_reduction(-0.531, -0.927), 1) == 57.3
    assert np.isnan(percent_reduction(0.1, 0.0))
    logger.info("✅ Percent reduction arithmetic")


def test_decomposition_identity_all_estimators():
    logger.info("=== Testing tau = delta + zeta ===")
    model, table = _joint_data()
    config = model.analysis_config(regression_x_rule="mean_difference")
    for name in ("weighting", "differential", "regression"):
        estimates = run_estimator(name, config, table, seed=3)
        assert [e.group for e in estimates] == ["1", "2", "3"]
        _check_identity(estimates)
        for estimate in estimates:
            if estimate.tau != 0:
                assert abs(estimate.pct_reduction - 100 * estimate.delta / estimate.tau) < 1e-9
        logger.info(f"✅ {name}: identity holds for {len(estimates)} groups")

    tags = {e.estimator for e in run_estimator("differential", config, table)}
    assert tags == {EstimatorTag.WEIGHTING_DIFFERENTIAL}

    interposed_model = load_structural_model(os.path.join(CONFIG_DIR, "model_interposed.json"))
    interposed_table = generate(interposed_model, 4000, seed=5)
    estimates = run_estimator("interposed", interposed_model.analysis_config(), interposed_table)
    _check_identity(estimates)
    assert all(e.estimator == EstimatorTag.WEIGHTING_INTERPOSED for e in estimates)
    logger.info("✅ interposed: identity holds")


def test_reference_self_comparison_is_zero():
    logger.info("=== Testing Reference Self-Comparison ===")
    model, table = _joint_data()
    config = model.analysis_config(comparison_groups=["0", "2"])
    estimates = decompose(config, table)
    reference = estimates[0]
    assert reference.group == "0"
    assert (reference.tau, reference.delta, reference.zeta) == (0.0, 0.0, 0.0)
    assert np.isnan(reference.pct_reduction)
    assert estimates[1].tau != 0
    logger.info("✅ Reference group returns zeros")


def test_saturated_weights_have_unit_mean():
    logger.info("=== Testing Balancing Weights ===")
    model, table = _joint_data()
    config = model.analysis_config()
    gm = fit_group_model(config, table)
    for level in config.group.levels:
        weights = compute_balancing_weights(gm, table, level)
        assert abs(np.mean(weights.weights) - 1.0) < 1e-10
        assert np.all(weights.weights > 0)
        assert weights.n_trimmed == 0

    trimmed = compute_balancing_weights(gm, table, "1", trim_pct=10)
    assert trimmed.n_trimmed > 0
    assert trimmed.weights.max() <= trimmed.cap
    logger.info("✅ Mean weight is one per group under the saturated model")


def test_cell_count_weights():
    logger.info("=== Testing Weights From Cell Counts ===")
    # group A: 80 rows c=0, 20 rows c=1; group B: 20 rows c=0, 80 rows c=1
    frame = pd.DataFrame({
        "r": ["A"] * 100 + ["B"] * 100,
        "c": ["0"] * 80 + ["1"] * 20 + ["0"] * 20 + ["1"] * 80,
    })
    schema = {"r": ColumnSpec(type="categorical", levels=["A", "B"]),
              "c": ColumnSpec(type="categorical", levels=["0", "1"])}
    table = ObservationTable.from_frame(frame, schema)
    gm = fit_multinomial_logit(table, "r", DesignSpec.build(cells=[["c"]]), reference="B")
    weights = compute_balancing_weights(gm, table, "A")
    c = table.column("c")[weights.rows]
    np.testing.assert_allclose(weights.weights[c == "0"], 0.625, rtol=1e-8)
    np.testing.assert_allclose(weights.weights[c == "1"], 2.5, rtol=1e-8)
    assert abs(np.mean(weights.weights) - 1.0) < 1e-8
    logger.info("✅ Weights 0.625 and 2.5 from the cell counts")


def test_outcome_shift_leaves_decomposition_unchanged():
    logger.info("=== Testing Outcome Location Equivariance ===")
    model, table = _joint_data(3000, seed=6)
    config = model.analysis_config()
    shifted = table.with_column("y", table.column("y") + 7.5)
    for name in ("weighting", "differential"):
        before = run_estimator(name, config, table, seed=2)
        after = run_estimator(name, config, shifted, seed=2)
        for a, b in zip(before, after):
            np.testing.assert_allclose([b.tau, b.delta, b.zeta], [a.tau, a.delta, a.zeta], rtol=0, atol=1e-9)
            assert abs(b.counterfactual_mean - (a.counterfactual_mean + 7.5)) < 1e-9
            assert abs(b.reference_mean - (a.reference_mean + 7.5)) < 1e-9
    logger.info("✅ delta and zeta unchanged, counterfactual mean shifted by k")


def test_estimates_report_group_sizes():
    logger.info("=== Testing Group Row Counts ===")
    model, table = _joint_data(2000, seed=13)
    config = model.analysis_config(regression_x_rule="mean_difference",
                                   comparison_groups=["0", "1", "2", "3"])
    r = table.column("r")
    for name in ("weighting", "regression"):
        for estimate in run_estimator(name, config, table):
            assert estimate.n_rows == int(np.sum(r == estimate.group))
            assert estimate.n_rows_reference == int(np.sum(r == "0"))
    logger.info("✅ n_rows and n_rows_reference match the group counts")


def test_interposed_equals_joint_when_x2_ignores_d():
    logger.info("=== Testing Interposed Without A D -> X2 Edge ===")
    with open(os.path.join(CONFIG_DIR, "model_interposed.json"), "r", encoding="utf-8") as f:
        spec = json.load(f)
    x2 = next(variable for variable in spec["variables"] if variable["name"] == "x2")
    del x2["logit"][0]["effects"]["d"]
    model = make_structural_model(spec)
    table = generate(model, 50_000, seed=12)

    interposed_config = model.analysis_config()
    joint_config = interposed_config.updated(scenario="JOINT_MEDIATORS", confounders_pre=["x1", "x2"],
                                             confounders_post=[], interposed_after=None)
    interposed = decompose_interposed(interposed_config, table, seed=1)
    joint = decompose(joint_config, table, seed=1)
    for a, b in zip(interposed, joint):
        assert a.group == b.group
        assert abs(a.tau - b.tau) < 1e-12
        assert abs(a.delta - b.delta) < 0.02
        assert abs(a.zeta - b.zeta) < 0.02
        logger.info(f"group {a.group}: interposed delta={a.delta:.4f}, joint delta={b.delta:.4f}")
    logger.info("✅ Both orderings agree when X2 does not depend on D")


def test_identical_groups_give_zero_disparity():
    logger.info("=== Testing Identical Outcome Distributions ===")
    model, table = _joint_data(2000)
    y = table.column("y")
    r = table.column("r")
    # every group gets the same multiset of outcome values
    shared = np.sort(y[r == "0"])[:100]
    rows = np.concatenate([np.flatnonzero(r == level)[:100] for level in ["0", "1", "2", "3"]])
    subset = table.take(rows).with_column("y", np.tile(shared, 4))
    config = model.analysis_config(covariates=[], confounders_pre=[], confounders_post=[])
    for estimate in decompose(config, subset):
        assert abs(estimate.tau) < 1e-12
    logger.info("✅ tau is exactly zero")


def test_no_confounders_joint_equals_interposed():
    logger.info("=== Testing Empty X ===")
    model, table = _joint_data()
    config = model.analysis_config(confounders_pre=[], confounders_post=[])
    joint = decompose(config, table, seed=1)
    interposed = decompose_interposed(config, table, seed=1)
    for a, b in zip(joint, interposed):
        assert a.group == b.group
        np.testing.assert_allclose([a.tau, a.delta, a.zeta], [b.tau, b.delta, b.zeta], rtol=0, atol=1e-12)
    logger.info("✅ Both orderings coincide without confounders")


def test_estimator_scenario_checks():
    logger.info("=== Testing Estimator Preconditions ===")
    model, table = _joint_data(1000)
    config = model.analysis_config()
    with pytest.raises(ConfigurationError):
        decompose_interposed(config, table)
    with pytest.raises(ConfigurationError):
        decompose_regression(config, table)
    with pytest.raises(ConfigurationError):
        decompose_regression(config.with_differential().updated(regression_x_rule="mean_difference"), table)
    with pytest.raises(ConfigurationError):
        run_estimator("matching", config, table)

    interposed_model = load_structural_model(os.path.join(CONFIG_DIR, "model_interposed.json"))
    with pytest.raises(ConfigurationError):
        decompose(interposed_model.analysis_config(), generate(interposed_model, 1000, seed=1))
    logger.info("✅ Estimators reject unsupported configurations")


def test_weighting_and_regression_agree():
    logger.info("=== Testing Weighting vs Regression ===")
    model = make_structural_model(LINEAR_MODEL)
    table = generate(model, 50_000, seed=21)
    config = model.analysis_config(mc_draws=100)
    weighting = decompose(config, table, seed=2)[0]
    regression = decompose_regression(config, table)[0]
    logger.info(f"weighting delta={weighting.delta:.4f}, regression delta={regression.delta:.4f}")
    assert abs(weighting.delta - regression.delta) < 0.02
    assert abs(weighting.zeta - regression.zeta) < 0.02
    assert regression.counterfactual_mean is None
    logger.info("✅ Estimators agree within 0.02")


def test_continuous_confounder_draws_are_seeded():
    logger.info("=== Testing Seeded Confounder Draws ===")
    model = make_structural_model(LINEAR_MODEL)
    table = generate(model, 2000, seed=4)
    config = model.analysis_config(mc_draws=20)
    first = decompose(config, table, seed=9)[0]
    second = decompose(config, table, seed=9)[0]
    other = decompose(config, table, seed=10)[0]
    assert first.delta == second.delta
    assert first.delta != other.delta
    assert first.tau == other.tau
    logger.info("✅ Same seed, same estimate")


def main():
    """Run all estimator tests"""
    logger.info("🚀 Starting Estimator Tests")
    tests = [
        test_percent_reduction,
        test_decomposition_identity_all_estimators,
        test_reference_self_comparison_is_zero,
        test_saturated_weights_have_unit_mean,
        test_cell_count_weights,
        test_outcome_shift_leaves_decomposition_unchanged,
        test_estimates_report_group_sizes,
        test_interposed_equals_joint_when_x2_ignores_d,
        test_identical_groups_give_zero_disparity,
        test_no_confounders_joint_equals_interposed,
        test_estimator_scenario_checks,
        test_weighting_and_regression_agree,
        test_continuous_confounder_draws_are_seeded,
    ]
    for test in tests:
        test()
    logger.info("=== Test Summary ===")
    logger.info(f"✅ {len(tests)} tests passed")
    logger.info("🎉 All tests completed successfully!")


if __name__ == "__main__":
    main()
