#!/usr/bin/env python3
"""
Tests for design expansion, least squares and the multinomial logit fitter.
"""

import os
import sys

# Add the project root to Python path before other imports
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.append(project_root)

import logging

import numpy as np
import pandas as pd
import pytest

from utils.data_table import ColumnSpec, ObservationTable
from utils.errors import EstimationError, PredictionError, RankDeficiencyError
from utils.estimators import fit_group_model, run_estimator
from utils.glm_core import DesignSpec, Term, fit_linear_model, fit_multinomial_logit, predict
from utils.structural_model import generate, load_structural_model

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

CONFIG_DIR = os.path.join(project_root, "config")

SCHEMA = {
    "g": ColumnSpec(type="categorical", levels=["a", "b", "c"]),
    "c": ColumnSpec(type="categorical", levels=["0", "1"]),
    "x": ColumnSpec(type="numeric"),
    "y": ColumnSpec(type="numeric"),
}


def _sample_table(n: int = 2000, seed: int = 7) -> ObservationTable:
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 2, size=n)
    x = rng.normal(size=n) + 0.5 * c
    eta_b = -0.2 + 0.6 * c + 0.4 * x
    eta_c = 0.3 - 0.5 * c + 0.2 * x
    weights = np.exp(np.column_stack([np.zeros(n), eta_b, eta_c]))
    probs = weights / weights.sum(axis=1, keepdims=True)
    g = (probs.cumsum(axis=1) < rng.random(n)[:, None]).sum(axis=1)
    y = 1.0 + 0.5 * x + 0.3 * c - 0.4 * (g == 1) + rng.normal(size=n)
    frame = pd.DataFrame({
        "g": np.array(["a", "b", "c"])[g],
        "c": c.astype(str),
        "x": x,
        "y": y,
    })
    return ObservationTable.from_frame(frame, SCHEMA)


def test_design_expansion():
    logger.info("=== Testing Design Expansion ===")
    table = _sample_table(50)
    spec = DesignSpec.build(main=["g", "x"], interactions=[Term.interaction("g", "x", ["c"])],
                            reference_levels={"g": "a"})
    bound = spec.bind(table)
    assert bound.column_names == ["(intercept)", "g[b]", "g[c]", "x", "g[c]:x"]
    assert bound.columns_for("g") == ["g[b]", "g[c]"]
    assert bound.columns_for("x") == ["x"]

    X = bound.matrix(table.to_frame())
    g = table.column("g")
    np.testing.assert_array_equal(X[:, 1], (g == "b").astype(float))
    np.testing.assert_allclose(X[:, 4], (g == "c") * table.column("x"))

    unseen = pd.DataFrame({"g": ["z"], "x": [0.0]})
    with pytest.raises(PredictionError):
        bound.matrix(unseen)
    logger.info("✅ Reference-coded indicators and restricted interactions")


def test_least_squares_matches_normal_equations():
    logger.info("=== Testing Least Squares ===")
    table = _sample_table()
    spec = DesignSpec.build(main=["g", "x", "c"])
    model = fit_linear_model(table, "y", spec)

    X = model.design.matrix(table.to_frame())
    y = table.column("y")
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(model.coefficients, beta, rtol=0, atol=1e-8)

    residuals = y - X @ beta
    sigma2 = residuals @ residuals / (len(y) - X.shape[1])
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(X.T @ X)))
    np.testing.assert_allclose(model.standard_errors, se, rtol=1e-8)
    assert model.df_resid == len(y) - X.shape[1]

    t = model.t_value("x")
    assert abs(model.partial_r2("x") - t * t / (t * t + model.df_resid)) < 1e-12
    np.testing.assert_allclose(predict(model, table), X @ beta, atol=1e-8)
    logger.info("✅ Coefficients and standard errors match the normal equations")


def test_rank_deficiency_names_columns():
    logger.info("=== Testing Rank Deficiency ===")
    table = _sample_table(200)
    table = table.with_column("x_copy", 2.0 * table.column("x"))
    with pytest.raises(RankDeficiencyError) as excinfo:
        fit_linear_model(table, "y", DesignSpec.build(main=["x", "x_copy"]))
    assert excinfo.value.dependent_columns
    assert set(excinfo.value.dependent_columns) <= {"x", "x_copy"}
    assert excinfo.value.exit_code == 3
    logger.info(f"✅ Dependent columns reported: {excinfo.value.dependent_columns}")


def test_multinomial_score_is_zero_at_optimum():
    logger.info("=== Testing Multinomial Logit Convergence ===")
    table = _sample_table()
    model = fit_multinomial_logit(table, "g", DesignSpec.build(main=["c", "x"]))
    assert model.report.converged
    assert model.levels == ["a", "b", "c"]
    assert model.reference == "a"

    X = model.design.matrix(table.to_frame())
    P = model.predict_proba(table)
    codes = table.codes("g")
    Y = np.column_stack([codes == 1, codes == 2]).astype(float)
    score = X.T @ (Y - P[:, 1:])
    assert np.abs(score).max() < 1e-5

    # central differences of the log-likelihood agree with the analytic score
    step = 1e-5
    for i in range(model.coefficients.shape[0]):
        for j in range(model.coefficients.shape[1]):
            bump = np.zeros_like(model.coefficients)
            bump[i, j] = step
            slope = (model.log_likelihood(table, model.coefficients + bump)
                     - model.log_likelihood(table, model.coefficients - bump)) / (2 * step)
            assert abs(slope) < 1e-3
    logger.info(f"✅ Converged in {model.report.iterations} iterations, max|score| = {np.abs(score).max():.2e}")


def test_probabilities_sum_to_one():
    logger.info("=== Testing Predicted Probabilities ===")
    table = _sample_table()
    model = fit_multinomial_logit(table, "g", DesignSpec.build(main=["c", "x"]))
    extreme = pd.DataFrame({"c": ["0", "1", "1"], "x": [-40.0, 0.0, 40.0]})
    for rows in (table, extreme):
        P = model.predict_proba(rows)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(P > 0) and np.all(P < 1)
    np.testing.assert_array_equal(model.probability(table, "b"), model.predict_proba(table)[:, 1])
    logger.info("✅ Rows sum to one")


def test_saturated_model_reproduces_cell_proportions():
    logger.info("=== Testing Saturated Group Model ===")
    table = _sample_table()
    model = fit_multinomial_logit(table, "g", DesignSpec.build(cells=[["c"]]))
    P = model.predict_proba(table)
    g = table.column("g")
    c = table.column("c")
    for cell in ("0", "1"):
        rows = c == cell
        for k, level in enumerate(["a", "b", "c"]):
            observed = np.mean(g[rows] == level)
            np.testing.assert_allclose(P[rows, k], observed, atol=1e-8)
    logger.info("✅ Fitted probabilities equal cell proportions")


def test_log_likelihood_never_decreases():
    logger.info("=== Testing Newton Trace ===")
    table = _sample_table(5000, seed=3)
    for design in (DesignSpec.build(main=["c", "x"]), DesignSpec.build(cells=[["c"]], main=["x"])):
        model = fit_multinomial_logit(table, "g", design)
        loglik = [entry["log_likelihood"] for entry in model.report.trace]
        assert len(loglik) >= 2
        assert all(later >= earlier for earlier, later in zip(loglik, loglik[1:]))
        assert model.report.log_likelihood == loglik[-1]
    logger.info("✅ Log-likelihood is non-decreasing across iterations")


def test_logit_converges_at_large_n():
    logger.info("=== Testing Logit Convergence At n = 50,000 ===")
    cases = [("model_interposed.json", "interposed", 4), ("model_interposed.json", "interposed", 7),
             ("model_interposed.json", "interposed", 9), ("model_joint.json", "weighting", 4)]
    for file_name, estimator, seed in cases:
        structural = load_structural_model(os.path.join(CONFIG_DIR, file_name))
        table = generate(structural, 50_000, seed=seed)
        config = structural.analysis_config()

        gm = fit_group_model(config, table)
        assert gm.report.converged
        loglik = [entry["log_likelihood"] for entry in gm.report.trace]
        assert all(later >= earlier for earlier, later in zip(loglik, loglik[1:]))
        assert gm.report.gradient_norm < 1e-8 * table.n_rows

        estimates = run_estimator(estimator, config, table, seed=seed)
        assert [e.group for e in estimates] == ["1", "2", "3"]
        for estimate in estimates:
            assert abs(estimate.tau - (estimate.delta + estimate.zeta)) <= 1e-12
        logger.info(f"✅ {file_name} seed {seed}: {gm.report.iterations} iterations "
                    f"{gm.report.note or '(score below tolerance)'}")


def test_rss_does_not_increase_with_interaction():
    logger.info("=== Testing Nested Least Squares ===")
    table = _sample_table()
    base = fit_linear_model(table, "y", DesignSpec.build(main=["g", "c", "x"]))
    for extra in (Term.interaction("g", "x"), Term.interaction("c", "x"), Term.interaction("g", "c")):
        larger = fit_linear_model(table, "y", DesignSpec.build(main=["g", "c", "x"], interactions=[extra]))
        assert larger.rss <= base.rss * (1 + 1e-12)
    logger.info("✅ Adding an interaction never raises the residual sum of squares")


def test_separation_detected():
    logger.info("=== Testing Separation ===")
    x = np.linspace(-3, 3, 200)
    frame = pd.DataFrame({"g": np.where(x > 0, "b", "a"), "c": "0", "x": x, "y": 0.0})
    schema = dict(SCHEMA, g=ColumnSpec(type="categorical", levels=["a", "b"]))
    table = ObservationTable.from_frame(frame, schema)
    with pytest.raises(EstimationError):
        fit_multinomial_logit(table, "g", DesignSpec.build(main=["x"]))
    logger.info("✅ Perfectly separated data fails to fit")


def main():
    """Run all GLM core tests"""
    logger.info("🚀 Starting GLM Core Tests")
    tests = [
        test_design_expansion,
        test_least_squares_matches_normal_equations,
        test_rank_deficiency_names_columns,
        test_multinomial_score_is_zero_at_optimum,
        test_probabilities_sum_to_one,
        test_saturated_model_reproduces_cell_proportions,
        test_log_likelihood_never_decreases,
        test_logit_converges_at_large_n,
        test_rss_does_not_increase_with_interaction,
        test_separation_detected,
    ]
    for test in tests:
        test()
    logger.info("=== Test Summary ===")
    logger.info(f"✅ {len(tests)} tests passed")
    logger.info("🎉 All tests completed successfully!")


if __name__ == "__main__":
    main()
