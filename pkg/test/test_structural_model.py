#!/usr/bin/env python3
"""
Tests for the structural model simulator: model validation, sampling and interventions.
"""

import copy
import os
import sys

# Add the project root to Python path before other imports
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.append(project_root)

import logging
import math

import numpy as np
import pytest

from utils.analysis_config import Scenario
from utils.errors import ConfigurationError
from utils.structural_model import generate, load_structural_model, make_structural_model

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

CONFIG_DIR = os.path.join(project_root, "config")

SMALL_MODEL = {
    "name": "small discrete model",
    "variables": [
        {"name": "c", "role": "covariate", "values": ["0", "1"], "table": [{"probs": [0.3, 0.7]}]},
        {"name": "r", "role": "group", "values": ["a", "b"],
         "table": [{"given": {"c": "0"}, "probs": [0.6, 0.4]},
                   {"given": {"c": "1"}, "probs": [0.2, 0.8]}]},
        {"name": "d", "role": "mediator", "values": ["0", "1", "2"],
         "logit": [{"value": "1", "intercept": 0.2, "effects": {"r": {"b": 0.5}}},
                   {"value": "2", "intercept": -0.4, "effects": {"c": 0.8}}]},
        {"name": "y", "role": "outcome",
         "equation": {"intercept": 1.0, "effects": {"d": 0.5, "r": {"b": -0.2}},
                      "interactions": [{"terms": ["d", "r=b"], "coef": 0.3}], "noise_sd": 0.5}},
    ],
}


def _variant(change):
    spec = copy.deepcopy(SMALL_MODEL)
    change(spec)
    return spec


def test_model_files_compile():
    logger.info("=== Testing Model Files ===")
    for name in ("model_joint.json", "model_interposed.json", "model_unobserved.json"):
        model = load_structural_model(os.path.join(CONFIG_DIR, name))
        assert model.order[-1] == model.outcome
        logger.info(f"✅ {name}: order {model.order}")
    interposed = load_structural_model(os.path.join(CONFIG_DIR, "model_interposed.json"))
    assert interposed.scenario == Scenario.INTERPOSED_CONFOUNDER
    assert "d" in interposed.parents("x2")


def test_roles_and_parents():
    logger.info("=== Testing Roles ===")
    model = make_structural_model(SMALL_MODEL)
    assert model.group == "r" and model.outcome == "y"
    assert model.reference == "a"
    assert model.mediators == ["d"]
    assert model.parents("y") == ["r", "d"]
    assert model.is_fully_discrete
    config = model.analysis_config()
    assert config.group.levels == ["a", "b"]
    assert config.covariates == ["c"]
    logger.info("✅ Roles read from the model file")


def test_invalid_models_rejected():
    logger.info("=== Testing Model Validation ===")

    def cycle(spec):
        spec["variables"][0]["table"] = [{"given": {"y": "0"}, "probs": [0.5, 0.5]}]

    def mediator_feeds_group(spec):
        spec["variables"][1]["table"] = [{"given": {"d": level}, "probs": [0.5, 0.5]} for level in "012"]

    def unknown_parent(spec):
        spec["variables"][3]["equation"]["effects"]["z"] = 1.0

    def bad_probabilities(spec):
        spec["variables"][0]["table"] = [{"probs": [0.3, 0.6]}]

    def missing_cell(spec):
        spec["variables"][1]["table"] = [{"given": {"c": "0"}, "probs": [0.6, 0.4]}]

    def two_outcomes(spec):
        spec["variables"].append({"name": "y2", "role": "outcome", "equation": {"intercept": 0.0}})

    def unknown_level(spec):
        spec["variables"][2]["logit"][0]["effects"] = {"r": {"z": 0.5}}

    def interposed_without_post(spec):
        spec["scenario"] = "INTERPOSED_CONFOUNDER"

    for change in (cycle, mediator_feeds_group, unknown_parent, bad_probabilities, missing_cell,
                   two_outcomes, unknown_level, interposed_without_post):
        with pytest.raises(ConfigurationError):
            make_structural_model(_variant(change))
        logger.info(f"✅ {change.__name__} rejected")

    def post_confounder_after_mediator(spec):
        spec["variables"].insert(3, {"name": "x2", "role": "confounder_post", "values": ["0", "1"],
                                     "table": [{"given": {"d": level}, "probs": [0.5, 0.5]} for level in "012"]})

    with pytest.raises(ConfigurationError):
        make_structural_model(_variant(post_confounder_after_mediator))
    spec = _variant(post_confounder_after_mediator)
    spec["scenario"] = "INTERPOSED_CONFOUNDER"
    assert make_structural_model(spec).confounders_post == ["x2"]
    logger.info("✅ Scenario checks follow the mediator ordering")


def test_generate_empty_and_seeded():
    logger.info("=== Testing Generation ===")
    model = make_structural_model(SMALL_MODEL)
    empty = generate(model, 0, seed=1)
    assert empty.n_rows == 0
    assert empty.column_names == ["c", "r", "d", "y"]

    first = generate(model, 500, seed=7).to_frame()
    second = generate(model, 500, seed=7).to_frame()
    other = generate(model, 500, seed=8).to_frame()
    assert first.equals(second)
    assert not first.equals(other)
    with pytest.raises(ConfigurationError):
        generate(model, -1)
    logger.info("✅ Same seed, same rows")


def test_cell_frequencies_match_probabilities():
    logger.info("=== Testing Sampling Frequencies ===")
    model = make_structural_model(SMALL_MODEL)
    n = 200_000
    table = generate(model, n, seed=3)
    tolerance = 4 / math.sqrt(n)
    c = table.column("c")
    r = table.column("r")
    d = table.column("d")
    assert abs(np.mean(c == "1") - 0.7) < tolerance
    assert abs(np.mean(r[c == "0"] == "b") - 0.4) < 4 / math.sqrt(np.sum(c == "0"))
    assert abs(np.mean(r[c == "1"] == "b") - 0.8) < 4 / math.sqrt(np.sum(c == "1"))

    # d | r=b, c=1: logits (0, 0.7, 0.4)
    rows = (r == "b") & (c == "1")
    weights = np.exp([0.0, 0.7, 0.4])
    expected = weights / weights.sum()
    for k, level in enumerate(["0", "1", "2"]):
        assert abs(np.mean(d[rows] == level) - expected[k]) < 4 / math.sqrt(rows.sum())

    y = table.column("y")
    code = table.codes("d")
    mean = 1.0 + 0.5 * code + (r == "b") * (-0.2 + 0.3 * code)
    residual = y - mean
    assert abs(np.mean(residual)) < 4 * 0.5 / math.sqrt(n)
    assert abs(np.std(residual) - 0.5) < 0.01
    logger.info("✅ Frequencies within 4/sqrt(n) of the specified probabilities")


def test_interventions_share_noise():
    logger.info("=== Testing do() and Common Random Numbers ===")
    model = make_structural_model(SMALL_MODEL)
    natural = model.simulate(1000, np.random.default_rng(5))
    forced = model.simulate(1000, np.random.default_rng(5), do={"r": "b"})
    assert np.all(forced["r"] == 1)
    np.testing.assert_array_equal(natural["c"], forced["c"])

    # units already in group b are untouched by do(r=b)
    already = natural["r"] == 1
    np.testing.assert_array_equal(natural["d"][already], forced["d"][already])
    np.testing.assert_allclose(natural["y"][already], forced["y"][already])

    fixed = model.simulate(1000, np.random.default_rng(5), fixed={"d": np.zeros(1000, dtype=np.int64)})
    np.testing.assert_array_equal(fixed["r"], natural["r"])
    noise_free = 1.0 + (fixed["r"] == 1) * -0.2
    assert abs(np.mean(fixed["y"] - noise_free)) < 0.1
    logger.info("✅ Interventions keep the noise of the other variables")


def main():
    """Run all structural model tests"""
    logger.info("🚀 Starting Structural Model Tests")
    tests = [
        test_model_files_compile,
        test_roles_and_parents,
        test_invalid_models_rejected,
        test_generate_empty_and_seeded,
        test_cell_frequencies_match_probabilities,
        test_interventions_share_noise,
    ]
    for test in tests:
        test()
    logger.info("=== Test Summary ===")
    logger.info(f"✅ {len(tests)} tests passed")
    logger.info("🎉 All tests completed successfully!")


if __name__ == "__main__":
    main()
