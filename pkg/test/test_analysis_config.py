#!/usr/bin/env python3
"""
Tests for the analysis configuration: role checks, config files and the positivity screen.
"""

import json
import os
import sys
import tempfile

# Add the project root to Python path before other imports
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.append(project_root)

import logging

import pandas as pd
import pytest

from utils.analysis_config import Scenario, load_analysis_config, make_config, validate_config
from utils.data_table import ObservationTable
from utils.errors import ConfigurationError, PositivityError

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

CONFIG_DIR = os.path.join(project_root, "config")


def _base_config(**changes):
    data = {
        "columns": {"c": {"type": "categorical", "levels": ["0", "1"]},
                    "d": {"type": "categorical", "levels": ["0", "1"]}},
        "group": {"column": "r", "levels": ["0", "1"], "reference_index": 0},
        "outcome": "y",
        "mediators": ["d"],
        "confounders_pre": ["x"],
        "covariates": ["c"],
    }
    data.update(changes)
    return make_config(data)


def _table(rows):
    frame = pd.DataFrame(rows, columns=["r", "y", "d", "x", "c"])
    config = _base_config()
    return ObservationTable.from_frame(frame, config.table_schema())


def test_config_files_load():
    logger.info("=== Testing Shipped Config Files ===")
    joint = load_analysis_config(os.path.join(CONFIG_DIR, "analysis_joint.json"))
    assert joint.scenario == Scenario.JOINT_MEDIATORS
    assert joint.reference_level == "0"
    assert joint.comparisons == ["1", "2", "3"]
    assert joint.confounders == ["x1", "x2"]

    interposed = load_analysis_config(os.path.join(CONFIG_DIR, "analysis_interposed.json"))
    assert interposed.scenario == Scenario.INTERPOSED_CONFOUNDER
    assert interposed.mediators_before_post_confounders == ["d"]
    logger.info("✅ Config files validated")


def test_role_conflicts_rejected():
    logger.info("=== Testing Role Checks ===")
    with pytest.raises(ConfigurationError):
        _base_config(covariates=["c", "x"])
    with pytest.raises(ConfigurationError):
        _base_config(mediators=["y"])
    with pytest.raises(ConfigurationError):
        _base_config(scenario="INTERPOSED_CONFOUNDER")
    with pytest.raises(ConfigurationError):
        _base_config(differential_effect_terms=[{"mediator": "x"}])
    with pytest.raises(ConfigurationError):
        _base_config(outcome_interactions=[["d", "unknown"]])
    with pytest.raises(ConfigurationError):
        _base_config(group={"column": "r", "levels": ["0", "1"], "reference_index": 2})
    with pytest.raises(ConfigurationError):
        _base_config(unexpected_key=1)
    logger.info("✅ Conflicting roles are configuration errors")


def test_invalid_json_file():
    logger.info("=== Testing Unreadable Config ===")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "config.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write("{not json")
        with pytest.raises(ConfigurationError):
            load_analysis_config(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"outcome": "y"}, f)
        with pytest.raises(ConfigurationError) as excinfo:
            load_analysis_config(path)
    assert excinfo.value.exit_code == 2
    logger.info("✅ Unreadable configs rejected")


def test_updated_and_differential():
    logger.info("=== Testing Config Copies ===")
    config = _base_config()
    trimmed = config.updated(weight_trim=99)
    assert trimmed.weight_trim == 99
    assert config.weight_trim is None

    differential = config.with_differential()
    assert [term.mediator for term in differential.differential_effect_terms] == ["d"]
    assert differential.without_differential().differential_effect_terms == []
    logger.info("✅ Copies are validated and independent")


def test_positivity_screen():
    logger.info("=== Testing Positivity Screen ===")
    rows = [["0", 1.0, "0", 0.1, "0"]] * 12 + [["1", 2.0, "1", 0.2, "0"]] * 12 \
        + [["0", 1.5, "1", 0.3, "1"]] * 12
    table = _table(rows)
    config = _base_config()

    binding = validate_config(config, table)
    assert not binding.is_valid
    assert binding.group_counts == {"0": 24, "1": 12}
    empty_cells = [d for d in binding.diagnostics if d.count == 0]
    assert len(empty_cells) == 1
    assert empty_cells[0].group == "1"
    assert empty_cells[0].cell == {"c": "1"}

    with pytest.raises(PositivityError) as excinfo:
        validate_config(config, table, strict=True)
    assert excinfo.value.exit_code == 4
    assert excinfo.value.cells
    logger.info("✅ Empty cells reported, strict mode raises")


def test_empty_group_always_error():
    logger.info("=== Testing Empty Group Level ===")
    table = _table([["0", 1.0, "0", 0.1, "0"]] * 20)
    with pytest.raises(PositivityError):
        validate_config(_base_config(), table)
    logger.info("✅ Empty group level rejected")


def test_small_group_warned():
    logger.info("=== Testing min_cell Diagnostic ===")
    rows = [["0", 1.0, "0", 0.1, "0"]] * 20 + [["1", 2.0, "1", 0.2, "0"]] * 3
    binding = validate_config(_base_config(covariates=[]), _table(rows))
    assert [d.group for d in binding.diagnostics] == ["1"]
    assert binding.diagnostics[0].count == 3
    logger.info("✅ Small groups reported")


def main():
    """Run all analysis config tests"""
    logger.info("🚀 Starting Analysis Config Tests")
    tests = [
        test_config_files_load,
        test_role_conflicts_rejected,
        test_invalid_json_file,
        test_updated_and_differential,
        test_positivity_screen,
        test_empty_group_always_error,
        test_small_group_warned,
    ]
    for test in tests:
        test()
    logger.info("=== Test Summary ===")
    logger.info(f"✅ {len(tests)} tests passed")
    logger.info("🎉 All tests completed successfully!")


if __name__ == "__main__":
    main()
