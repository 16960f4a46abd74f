#!/usr/bin/env python3
"""
Analysis configuration: binds table columns to causal roles.

The configuration is a JSON document (see config/README.md) validated by pydantic.
Role sets are checked for disjointness when the config is built, and
validate_config() runs the empirical positivity screen against a loaded table.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from utils.data_table import CATEGORICAL, ColumnSpec, ObservationTable, TableSchema
from utils.errors import ConfigurationError, PositivityError

logger = logging.getLogger(__name__)


class Scenario(str, Enum):
    JOINT_MEDIATORS = "JOINT_MEDIATORS"
    INTERPOSED_CONFOUNDER = "INTERPOSED_CONFOUNDER"


ModelChoice = Literal["auto", "saturated", "additive"]


class GroupBinding(BaseModel):
    """Group column, its ordered levels and the position of the reference level"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    column: str
    levels: List[str] = Field(min_length=2)
    reference_index: int = 0

    @model_validator(mode="after")
    def _check_levels(self):
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"group levels must be unique: {self.levels}")
        if not 0 <= self.reference_index < len(self.levels):
            raise ValueError(
                f"reference_index {self.reference_index} outside 0..{len(self.levels) - 1}")
        return self

    @property
    def reference(self) -> str:
        return self.levels[self.reference_index]

    @property
    def non_reference(self) -> List[str]:
        return [level for level in self.levels if level != self.reference]


class DifferentialTerm(BaseModel):
    """Group x mediator interaction; ``levels`` restricts it to some comparison groups"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    mediator: str
    levels: Optional[List[str]] = None


class AnalysisConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    columns: Dict[str, ColumnSpec] = Field(default_factory=dict)
    group: GroupBinding
    outcome: str
    mediators: List[str] = Field(min_length=1)
    confounders_pre: List[str] = Field(default_factory=list)
    confounders_post: List[str] = Field(default_factory=list)
    covariates: List[str] = Field(default_factory=list)
    scenario: Scenario = Scenario.JOINT_MEDIATORS
    differential_effect_terms: List[DifferentialTerm] = Field(default_factory=list)
    outcome_interactions: List[Tuple[str, str]] = Field(default_factory=list)
    interposed_after: Optional[List[str]] = None
    weight_trim: Optional[float] = Field(default=None, gt=0, le=100)
    min_cell: int = Field(default=10, ge=1)
    mc_draws: int = Field(default=200, ge=1)
    regression_x_rule: Optional[Literal["mean_difference"]] = None
    group_model: ModelChoice = "auto"
    confounder_model: ModelChoice = "auto"
    comparison_groups: Optional[List[str]] = None

    @model_validator(mode="after")
    def _check_roles(self):
        roles = {
            "group": [self.group.column],
            "outcome": [self.outcome],
            "mediators": self.mediators,
            "confounders": self.confounders_pre + self.confounders_post,
            "covariates": self.covariates,
        }
        seen: Dict[str, str] = {}
        for role, columns in roles.items():
            for column in columns:
                if column in seen:
                    raise ValueError(
                        f"column '{column}' is assigned to both {seen[column]} and {role}")
                seen[column] = role

        if self.scenario == Scenario.INTERPOSED_CONFOUNDER and not self.confounders_post:
            raise ValueError("scenario INTERPOSED_CONFOUNDER requires nonempty confounders_post")

        for term in self.differential_effect_terms:
            if term.mediator not in self.mediators:
                raise ValueError(f"differential term mediator '{term.mediator}' is not a mediator")
            for level in term.levels or []:
                if level not in self.group.non_reference:
                    raise ValueError(f"differential term level '{level}' is not a comparison level")

        for first, second in self.outcome_interactions:
            for column in (first, second):
                if column not in seen:
                    raise ValueError(f"interaction column '{column}' has no role")

        for mediator in self.interposed_after or []:
            if mediator not in self.mediators:
                raise ValueError(f"interposed_after entry '{mediator}' is not a mediator")

        for level in self.comparison_groups or []:
            if level not in self.group.levels:
                raise ValueError(f"comparison group '{level}' is not a group level")

        if self.group.column in self.columns and self.columns[self.group.column].type != CATEGORICAL:
            raise ValueError(f"group column '{self.group.column}' must be categorical")
        return self

    @property
    def reference_level(self) -> str:
        return self.group.reference

    @property
    def confounders(self) -> List[str]:
        return list(self.confounders_pre) + list(self.confounders_post)

    @property
    def comparisons(self) -> List[str]:
        if self.comparison_groups is not None:
            return list(self.comparison_groups)
        return self.group.non_reference

    @property
    def mediators_before_post_confounders(self) -> List[str]:
        if self.interposed_after is not None:
            return list(self.interposed_after)
        return self.mediators[:1]

    @property
    def bound_columns(self) -> List[str]:
        return ([self.group.column, self.outcome] + list(self.mediators)
                + self.confounders + list(self.covariates))

    def table_schema(self) -> TableSchema:
        """Schema for load_table(): group is categorical, undeclared columns are numeric"""
        schema: TableSchema = {}
        for column in self.bound_columns:
            if column == self.group.column:
                schema[column] = ColumnSpec(type=CATEGORICAL, levels=list(self.group.levels))
            else:
                schema[column] = self.columns.get(column, ColumnSpec())
        return schema

    def updated(self, **changes: Any) -> "AnalysisConfig":
        """Validated copy with some keys replaced"""
        data = self.model_dump()
        data.update(changes)
        return make_config(data)

    def with_differential(self) -> "AnalysisConfig":
        """Config with group x first-mediator interactions when none are declared"""
        if self.differential_effect_terms:
            return self
        return self.updated(differential_effect_terms=[{"mediator": self.mediators[0]}])

    def without_differential(self) -> "AnalysisConfig":
        if not self.differential_effect_terms:
            return self
        return self.updated(differential_effect_terms=[])


def make_config(data: Dict[str, Any]) -> AnalysisConfig:
    """Build an AnalysisConfig, reporting validation problems as ConfigurationError"""
    try:
        return AnalysisConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid analysis config: {e}") from e


def load_analysis_config(path: Union[str, Path]) -> AnalysisConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
    config = make_config(data)
    logger.info(f"✅ Loaded analysis config from {path} (scenario {config.scenario.value})")
    return config


class PositivityDiagnostic(BaseModel):
    group: str
    cell: Dict[str, str] = Field(default_factory=dict)
    count: int
    reason: str


@dataclass
class ValidatedBinding:
    config: AnalysisConfig
    table: ObservationTable
    group_counts: Dict[str, int]
    diagnostics: List[PositivityDiagnostic] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.diagnostics


def validate_config(config: AnalysisConfig, table: ObservationTable,
                    strict: bool = False) -> ValidatedBinding:
    """
    Check the config against a table and run the positivity screen.

    Every group level needs at least ``min_cell`` rows and, over the categorical covariates,
    every observed covariate cell must contain every group level. Violations are logged
    and returned as diagnostics, or raised as PositivityError when ``strict`` is set.
    An empty group level is always an error.
    """
    missing = [column for column in config.bound_columns if not table.has_column(column)]
    if missing:
        raise ConfigurationError(f"Config references columns missing from the table: {missing}")

    group_column = config.group.column
    if not table.is_categorical(group_column):
        raise ConfigurationError(f"Group column '{group_column}' must be categorical")
    if table.levels(group_column) != list(config.group.levels):
        raise ConfigurationError(
            f"Group levels in data {table.levels(group_column)} differ from config {config.group.levels}")
    if table.is_categorical(config.outcome):
        raise ConfigurationError(f"Outcome '{config.outcome}' must be numeric")

    groups = table.column(group_column)
    counts = {level: int(np.sum(groups == level)) for level in config.group.levels}
    empty = [level for level, count in counts.items() if count == 0]
    if empty:
        raise PositivityError(f"Group levels with no observations: {empty}",
                              cells=[{"group": level} for level in empty])

    diagnostics: List[PositivityDiagnostic] = []
    for level, count in counts.items():
        if count < config.min_cell:
            diagnostics.append(PositivityDiagnostic(
                group=level, count=count, reason=f"fewer than min_cell={config.min_cell} rows"))

    categorical_covariates = [column for column in config.covariates if table.is_categorical(column)]
    if categorical_covariates:
        frame = table.to_frame([group_column] + categorical_covariates).astype(str)
        crossed = pd.crosstab(
            [frame[column] for column in categorical_covariates], frame[group_column])
        crossed = crossed.reindex(columns=config.group.levels, fill_value=0)
        for cell_key, row in crossed.iterrows():
            values = cell_key if isinstance(cell_key, tuple) else (cell_key,)
            cell = dict(zip(categorical_covariates, [str(value) for value in values]))
            for level in config.group.levels:
                if row[level] == 0:
                    diagnostics.append(PositivityDiagnostic(
                        group=level, cell=cell, count=0, reason="empty group x covariate cell"))

    if diagnostics:
        cells = [diagnostic.model_dump() for diagnostic in diagnostics]
        if strict:
            raise PositivityError(f"Positivity screen failed for {len(diagnostics)} cells", cells=cells)
        for diagnostic in diagnostics:
            logger.warning(f"⚠️ Positivity: group {diagnostic.group} {diagnostic.cell} "
                           f"count={diagnostic.count} ({diagnostic.reason})")
    else:
        logger.info("✅ Positivity screen passed")

    return ValidatedBinding(config=config, table=table, group_counts=counts, diagnostics=diagnostics)
