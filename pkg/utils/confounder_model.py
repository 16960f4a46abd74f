#!/usr/bin/env python3
"""
Confounder models

P(x | r, c) (or P(x2 | r, x1, d, c) for the interposed ordering) represented as an ordered
chain of conditional models. Categorical confounders are modeled jointly as one cell factor
by a multinomial logit and integrated by exact summation over their support; continuous
confounders are linear-Gaussian and integrated with seeded draws.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.data_table import ObservationTable
from utils.errors import ConfigurationError
from utils.glm_core import (CELL_SEPARATOR, DesignSpec, GroupMembershipModel, LinearModel, Term,
                            fit_linear_model, fit_multinomial_logit)

logger = logging.getLogger(__name__)

ModelChoice = Literal["auto", "saturated", "additive"]


@dataclass(frozen=True)
class ConditionalNode:
    columns: Tuple[str, ...]
    kind: Literal["categorical", "continuous"]
    conditioning: Tuple[str, ...]
    model: Union[GroupMembershipModel, LinearModel]
    # categorical nodes: one tuple of column values per response level, in model level order
    support: Tuple[Tuple[str, ...], ...] = ()
    column_levels: Optional[Dict[str, List[str]]] = None


def conditional_design(table: ObservationTable, conditioning: Sequence[str], group: str,
                       reference: str, choice: ModelChoice = "auto") -> DesignSpec:
    """
    Design for a conditional model.

    "saturated" (or "auto" with all-categorical conditioning) uses one cell factor over the
    conditioning columns; "additive" uses main effects plus group x column interactions.
    """
    conditioning = list(conditioning)
    references = {group: reference}
    if not conditioning:
        return DesignSpec.build(reference_levels=references)
    all_categorical = all(table.is_categorical(column) for column in conditioning)
    if choice == "saturated" and not all_categorical:
        raise ConfigurationError(
            f"Saturated design needs categorical conditioning columns, got {conditioning}")
    if choice == "saturated" or (choice == "auto" and all_categorical):
        return DesignSpec.build(cells=[conditioning], reference_levels=references)
    interactions = [Term.interaction(group, column) for column in conditioning
                    if column != group and group in conditioning]
    return DesignSpec.build(main=conditioning, interactions=interactions, reference_levels=references)


class ConfounderModel:
    """Chain of fitted conditional models; ``draws`` applies only to continuous nodes"""

    def __init__(self, nodes: Sequence[ConditionalNode], draws: int = 200):
        if draws < 1:
            raise ConfigurationError(f"Number of confounder draws must be at least 1, got {draws}")
        self.nodes = list(nodes)
        self.draws = draws

    @property
    def columns(self) -> List[str]:
        return [column for node in self.nodes for column in node.columns]

    @property
    def is_empty(self) -> bool:
        return not self.nodes

    @property
    def is_exact(self) -> bool:
        return all(node.kind == "categorical" for node in self.nodes)

    def probabilities(self, node: ConditionalNode, frame: pd.DataFrame) -> np.ndarray:
        """P(node value | conditioning) for every row, one column per support entry"""
        if node.kind != "categorical":
            raise ConfigurationError(f"Node {node.columns} is continuous")
        return node.model.predict_proba(frame)

    def integrate(self, frame: pd.DataFrame, evaluate: Callable[[pd.DataFrame], np.ndarray],
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """
        Per-row expectation of ``evaluate`` over the confounders, given the other columns of ``frame``.

        Categorical chains are summed exactly; any continuous node switches to averaging
        over ``draws`` seeded draws of the whole chain.
        """
        if self.is_empty:
            return evaluate(frame)
        if self.is_exact:
            return self._sum_exact(frame, self.nodes, np.ones(len(frame)), evaluate)
        if rng is None:
            raise ConfigurationError("Continuous confounders need a random generator for draws")
        total = np.zeros(len(frame))
        for _ in range(self.draws):
            drawn = frame.copy()
            for node in self.nodes:
                self._draw(node, drawn, rng)
            total += evaluate(drawn)
        return total / self.draws

    def _sum_exact(self, frame: pd.DataFrame, nodes: List[ConditionalNode], weight: np.ndarray,
                   evaluate: Callable[[pd.DataFrame], np.ndarray]) -> np.ndarray:
        if not nodes:
            return weight * evaluate(frame)
        node = nodes[0]
        probabilities = self.probabilities(node, frame)
        total = np.zeros(len(frame))
        for s, values in enumerate(node.support):
            assigned = frame.copy()
            for column, value in zip(node.columns, values):
                assigned[column] = pd.Categorical([value] * len(frame),
                                                  categories=node.column_levels[column])
            total += self._sum_exact(assigned, nodes[1:], weight * probabilities[:, s], evaluate)
        return total

    def _draw(self, node: ConditionalNode, frame: pd.DataFrame, rng: np.random.Generator):
        n = len(frame)
        if node.kind == "continuous":
            mean = node.model.predict(frame)
            frame[node.columns[0]] = mean + node.model.residual_sd * rng.standard_normal(n)
            return
        cumulative = np.cumsum(self.probabilities(node, frame), axis=1)
        chosen = (cumulative < rng.random(n)[:, None]).sum(axis=1)
        chosen = np.minimum(chosen, len(node.support) - 1)
        for j, column in enumerate(node.columns):
            labels = np.array([values[j] for values in node.support], dtype=object)[chosen]
            frame[column] = pd.Categorical(labels, categories=node.column_levels[column])


def fit_confounder_model(table: ObservationTable,
                         blocks: Sequence[Tuple[Sequence[str], Sequence[str]]],
                         group: str, reference: str, choice: ModelChoice = "auto",
                         draws: int = 200) -> ConfounderModel:
    """
    Fit the chain for a list of (confounder columns, conditioning columns) blocks.

    Within a block the categorical columns form one joint node, fitted first; each continuous
    column follows, conditioning also on the columns modeled before it in the block.
    """
    nodes: List[ConditionalNode] = []
    for columns, conditioning in blocks:
        columns = list(columns)
        if not columns:
            continue
        categorical = [column for column in columns if table.is_categorical(column)]
        continuous = [column for column in columns if not table.is_categorical(column)]
        given = list(conditioning)

        if categorical:
            nodes.append(_fit_categorical_node(table, categorical, given, group, reference, choice))
            given += categorical
        for column in continuous:
            design = conditional_design(table, given, group, reference, choice)
            model = fit_linear_model(table, column, design)
            nodes.append(ConditionalNode(columns=(column,), kind="continuous",
                                         conditioning=tuple(given), model=model))
            given.append(column)

    logger.info(f"✅ Confounder model fitted: {len(nodes)} node(s), "
                f"{'exact summation' if all(n.kind == 'categorical' for n in nodes) else 'seeded draws'}")
    return ConfounderModel(nodes, draws=draws)


def _fit_categorical_node(table: ObservationTable, columns: List[str], conditioning: List[str],
                          group: str, reference: str, choice: ModelChoice) -> ConditionalNode:
    frame = table.to_frame(columns).astype(str)
    observed = frame.drop_duplicates().sort_values(columns)
    support = [tuple(row) for row in observed.itertuples(index=False, name=None)]
    keys = [CELL_SEPARATOR.join(values) for values in support]

    response = "__cell__(" + ",".join(columns) + ")"
    row_keys = frame[columns[0]].to_numpy(dtype=object)
    for column in columns[1:]:
        row_keys = row_keys + CELL_SEPARATOR + frame[column].to_numpy(dtype=object)
    extended = table.with_column(response, row_keys, levels=keys)

    design = conditional_design(table, conditioning, group, reference, choice)
    if len(keys) == 1:
        raise ConfigurationError(f"Confounder(s) {columns} take a single value; nothing to model")
    model = fit_multinomial_logit(extended, response, design)
    ordered = tuple(support[keys.index(level)] for level in model.levels)
    return ConditionalNode(
        columns=tuple(columns), kind="categorical", conditioning=tuple(conditioning), model=model,
        support=ordered, column_levels={column: table.levels(column) for column in columns})
