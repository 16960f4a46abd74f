#!/usr/bin/env python3
"""
Disparity decomposition estimators

## Overview
Splits the observed (covariate-standardized) disparity tau between a comparison group r and
the reference group into
- delta (disparity reduction): the part removed when the mediators of group r are drawn
  jointly from the reference group's distribution at the same covariates, and
- zeta (disparity remaining): what is left, so that tau = delta + zeta.

### Estimators:
- **Weighting** (``decompose``): balancing weights P(R=r)/P(R=r|c) from a multinomial logit,
  an outcome regression evaluated over the confounder distribution of group r, averaged over
  the reference group's rows with the reference weights
- **Weighting with differential effects**: same, with group x mediator interactions in the outcome model
- **Regression** (``decompose_regression``): three linear regressions combined through the
  confounder coefficient ratio
- **Interposed confounder** (``decompose_interposed``): weighting estimator for the ordering
  D -> X2 -> M, integrating X1 | r, c and then X2 | r, x1, d, c sequentially
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.analysis_config import AnalysisConfig, Scenario
from utils.confounder_model import ConfounderModel, fit_confounder_model
from utils.data_table import ObservationTable
from utils.errors import ConfigurationError, EstimationError, PositivityError
from utils.glm_core import (DesignSpec, GroupMembershipModel, LinearModel, Term, fit_linear_model,
                            fit_multinomial_logit)

logger = logging.getLogger(__name__)

MIN_PROPENSITY = 1e-12


class EstimatorTag(str, Enum):
    WEIGHTING = "WEIGHTING"
    WEIGHTING_DIFFERENTIAL = "WEIGHTING_DIFFERENTIAL"
    REGRESSION = "REGRESSION"
    WEIGHTING_INTERPOSED = "WEIGHTING_INTERPOSED"


@dataclass(frozen=True)
class WeightVector:
    """Balancing weights for the rows of one group level"""
    level: str
    rows: np.ndarray
    weights: np.ndarray
    n_trimmed: int = 0
    cap: Optional[float] = None

    def diagnostics(self) -> Dict[str, float]:
        weights = self.weights
        return {
            "mean_weight": float(np.mean(weights)),
            "min_weight": float(np.min(weights)),
            "max_weight": float(np.max(weights)),
            "effective_sample_size": float(np.sum(weights) ** 2 / np.sum(weights ** 2)),
            "n_trimmed": self.n_trimmed,
        }


@dataclass(frozen=True)
class DecompositionEstimate:
    group: str
    estimator: EstimatorTag
    tau: float
    delta: float
    zeta: float
    pct_reduction: float
    counterfactual_mean: Optional[float] = None
    comparison_mean: Optional[float] = None
    reference_mean: Optional[float] = None
    n_trimmed: int = 0
    # rows of group r and of the reference group
    n_rows: int = 0
    n_rows_reference: int = 0

    def quantities(self) -> Dict[str, float]:
        return {"tau": self.tau, "delta": self.delta, "zeta": self.zeta}


def percent_reduction(delta: float, tau: float) -> float:
    """100 * delta / tau; NaN when tau is zero"""
    if tau == 0:
        return float("nan")
    return 100.0 * delta / tau


def weighted_mean(values: np.ndarray, weights: np.ndarray) -> float:
    """Self-normalized weighted mean"""
    total = float(np.sum(weights))
    if len(values) == 0 or total <= 0:
        raise EstimationError("Weighted mean over an empty group")
    return float(np.sum(weights * values) / total)


# Designs

def group_model_design(config: AnalysisConfig, table: ObservationTable) -> DesignSpec:
    """P(R | c): saturated over categorical covariates by default, additive otherwise"""
    covariates = list(config.covariates)
    if not covariates:
        return DesignSpec.build()
    all_categorical = all(table.is_categorical(column) for column in covariates)
    if config.group_model == "saturated" and not all_categorical:
        raise ConfigurationError("group_model 'saturated' needs categorical covariates")
    if config.group_model == "saturated" or (config.group_model == "auto" and all_categorical):
        return DesignSpec.build(cells=[covariates])
    return DesignSpec.build(main=covariates)


def outcome_model_design(config: AnalysisConfig) -> DesignSpec:
    """Y ~ group + X + mediators + C, plus differential and declared interactions"""
    group = config.group.column
    main = [group] + config.confounders + list(config.mediators) + list(config.covariates)
    interactions = [Term.interaction(group, term.mediator, term.levels)
                    for term in config.differential_effect_terms]
    interactions += [Term.interaction(first, second) for first, second in config.outcome_interactions]
    return DesignSpec.build(main=main, interactions=interactions,
                            reference_levels={group: config.reference_level})


def fit_group_model(config: AnalysisConfig, table: ObservationTable) -> GroupMembershipModel:
    return fit_multinomial_logit(table, config.group, group_model_design(config, table))


def fit_outcome_model(config: AnalysisConfig, table: ObservationTable) -> LinearModel:
    return fit_linear_model(table, config.outcome, outcome_model_design(config))


def confounder_blocks(config: AnalysisConfig) -> List[Tuple[List[str], List[str]]]:
    """(confounders, conditioning) blocks in modeling order for the configured scenario"""
    group = config.group.column
    base = [group] + list(config.covariates)
    if config.scenario == Scenario.INTERPOSED_CONFOUNDER:
        post_conditioning = (base + list(config.confounders_pre)
                             + config.mediators_before_post_confounders)
        return [(list(config.confounders_pre), base),
                (list(config.confounders_post), post_conditioning)]
    return [(config.confounders, base)]


# Components

def compute_balancing_weights(gm: GroupMembershipModel, table: ObservationTable, r: str,
                              trim_pct: Optional[float] = None) -> WeightVector:
    """
    W_r = P(R=r) / P(R=r | c) for the rows with R = r.

    P(R=r) is the sample proportion. With ``trim_pct`` the weights are capped at that
    percentile of the group's weights and the capped count is reported.
    """
    groups = table.column(gm.response)
    rows = np.flatnonzero(groups == r)
    if rows.size == 0:
        raise EstimationError(f"Group '{r}' has no rows")

    frame = table.to_frame(gm.design.spec.columns_used).iloc[rows]
    propensity = gm.probability(frame, r)
    too_small = propensity < MIN_PROPENSITY
    if too_small.any():
        row = int(rows[np.flatnonzero(too_small)[0]])
        raise PositivityError(
            f"Fitted P(R={r}|c) = {propensity[too_small][0]:.3e} below {MIN_PROPENSITY} at row {row}",
            cells=[{"group": r, "row": row}])

    weights = (rows.size / table.n_rows) / propensity
    n_trimmed = 0
    cap = None
    if trim_pct is not None:
        cap = float(np.percentile(weights, trim_pct))
        n_trimmed = int(np.sum(weights > cap))
        weights = np.minimum(weights, cap)
        if n_trimmed:
            logger.warning(f"⚠️ Trimmed {n_trimmed} weights of group {r} at the "
                           f"{trim_pct:g}th percentile ({cap:.4g})")
    if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
        raise EstimationError(f"Non-finite or non-positive balancing weights for group '{r}'")
    return WeightVector(level=r, rows=rows, weights=weights, n_trimmed=n_trimmed, cap=cap)


def estimate_observed_disparity(weights: Dict[str, WeightVector], table: ObservationTable, r: str,
                                reference: str, outcome: str) -> float:
    """tau = E[W_r y | R=r] - E[W_0 y | R=0] with self-normalized weighted means"""
    y = table.column(outcome)
    comparison = weights[r]
    baseline = weights[reference]
    return (weighted_mean(y[comparison.rows], comparison.weights)
            - weighted_mean(y[baseline.rows], baseline.weights))


def estimate_counterfactual_mean(om: LinearModel, cm: ConfounderModel, w0: WeightVector,
                                 table: ObservationTable, r: str, group_column: str,
                                 rng: Optional[np.random.Generator] = None) -> float:
    """
    E[W_0 sum_x mu(r, x, d_i, m_i, c_i) psi(x | r, c_i) | R = 0].

    Every reference-group row keeps its own mediators and covariates, is moved to group r,
    and the outcome model is integrated over the confounder model of group r.
    """
    frame = table.to_frame().iloc[w0.rows].reset_index(drop=True)
    frame[group_column] = pd.Categorical([r] * len(frame), categories=table.levels(group_column))
    expectation = cm.integrate(frame, om.predict, rng)
    return weighted_mean(expectation, w0.weights)


# Decompositions

def decompose(config: AnalysisConfig, table: ObservationTable, seed: int = 0) -> List[DecompositionEstimate]:
    """Weighting decomposition for every comparison group (JOINT_MEDIATORS ordering)"""
    if config.scenario != Scenario.JOINT_MEDIATORS:
        raise ConfigurationError("decompose() handles JOINT_MEDIATORS; use decompose_interposed()")
    tag = (EstimatorTag.WEIGHTING_DIFFERENTIAL if config.differential_effect_terms
           else EstimatorTag.WEIGHTING)
    return _weighting_decomposition(config, table, seed, tag)


def decompose_interposed(config: AnalysisConfig, table: ObservationTable,
                         seed: int = 0) -> List[DecompositionEstimate]:
    """Weighting decomposition for the D -> X2 -> M ordering"""
    if config.scenario != Scenario.INTERPOSED_CONFOUNDER and config.confounders:
        raise ConfigurationError(
            "decompose_interposed() needs scenario INTERPOSED_CONFOUNDER with an X2 model")
    return _weighting_decomposition(config, table, seed, EstimatorTag.WEIGHTING_INTERPOSED)


def _weighting_decomposition(config: AnalysisConfig, table: ObservationTable, seed: int,
                             tag: EstimatorTag) -> List[DecompositionEstimate]:
    group = config.group.column
    reference = config.reference_level
    comparisons = config.comparisons

    gm = fit_group_model(config, table)
    needed = [reference] + [level for level in comparisons if level != reference]
    weights = {level: compute_balancing_weights(gm, table, level, config.weight_trim) for level in needed}
    om = fit_outcome_model(config, table)
    cm = fit_confounder_model(table, confounder_blocks(config), group, reference,
                              config.confounder_model, config.mc_draws)

    y = table.column(config.outcome)
    w0 = weights[reference]
    reference_mean = weighted_mean(y[w0.rows], w0.weights)
    streams = np.random.SeedSequence(seed).spawn(len(comparisons))

    estimates = []
    for r, stream in zip(comparisons, streams):
        if r == reference:
            estimates.append(DecompositionEstimate(
                group=r, estimator=tag, tau=0.0, delta=0.0, zeta=0.0, pct_reduction=float("nan"),
                counterfactual_mean=reference_mean, comparison_mean=reference_mean,
                reference_mean=reference_mean, n_trimmed=w0.n_trimmed,
                n_rows=int(w0.rows.size), n_rows_reference=int(w0.rows.size)))
            continue
        wr = weights[r]
        comparison_mean = weighted_mean(y[wr.rows], wr.weights)
        counterfactual = estimate_counterfactual_mean(om, cm, w0, table, r, group,
                                                      np.random.default_rng(stream))
        tau = comparison_mean - reference_mean
        delta = comparison_mean - counterfactual
        zeta = counterfactual - reference_mean
        estimates.append(DecompositionEstimate(
            group=r, estimator=tag, tau=tau, delta=delta, zeta=zeta,
            pct_reduction=percent_reduction(delta, tau), counterfactual_mean=counterfactual,
            comparison_mean=comparison_mean, reference_mean=reference_mean,
            n_trimmed=wr.n_trimmed + w0.n_trimmed,
            n_rows=int(wr.rows.size), n_rows_reference=int(w0.rows.size)))
        logger.debug(f"{tag.value} group {r}: tau={tau:.6g} delta={delta:.6g} zeta={zeta:.6g}")
    return estimates


def decompose_regression(config: AnalysisConfig, table: ObservationTable) -> List[DecompositionEstimate]:
    """
    Regression estimator from three linear models:
    phi (group + C), gamma (group + X + C) and alpha (group + X + mediators + C).

    delta = gamma_r - alpha_r + (1 - alpha_x / gamma_x)(phi_r - gamma_r)
    zeta  = alpha_r + (alpha_x / gamma_x)(phi_r - gamma_r)
    tau   = phi_r
    """
    if config.scenario != Scenario.JOINT_MEDIATORS:
        raise ConfigurationError("Regression estimator supports JOINT_MEDIATORS only")
    if config.differential_effect_terms:
        raise ConfigurationError("Regression estimator does not take differential effect terms")

    group = config.group.column
    reference = config.reference_level
    references = {group: reference}
    covariates = list(config.covariates)
    confounders = config.confounders

    phi = fit_linear_model(table, config.outcome,
                           DesignSpec.build(main=[group] + covariates, reference_levels=references))
    gamma = fit_linear_model(table, config.outcome,
                             DesignSpec.build(main=[group] + confounders + covariates,
                                              reference_levels=references))
    alpha = fit_linear_model(table, config.outcome,
                             DesignSpec.build(main=[group] + confounders + list(config.mediators) + covariates,
                                              reference_levels=references))

    x_columns = [name for column in confounders for name in gamma.design.columns_for(column)]
    if len(x_columns) > 1 and config.regression_x_rule is None:
        raise ConfigurationError(
            f"Regression estimator needs a scalar confounder; {x_columns} given without regression_x_rule")

    groups = table.column(group)
    n_reference = int(np.sum(groups == reference))
    estimates = []
    for r in config.comparisons:
        if r == reference:
            estimates.append(DecompositionEstimate(group=r, estimator=EstimatorTag.REGRESSION,
                                                   tau=0.0, delta=0.0, zeta=0.0,
                                                   pct_reduction=float("nan"), n_rows=n_reference,
                                                   n_rows_reference=n_reference))
            continue
        name = f"{group}[{r}]"
        phi_r, gamma_r, alpha_r = phi.coef(name), gamma.coef(name), alpha.coef(name)
        ratio = _confounder_ratio(gamma, alpha, x_columns, table, groups, r, reference)
        delta = gamma_r - alpha_r + (1.0 - ratio) * (phi_r - gamma_r)
        zeta = alpha_r + ratio * (phi_r - gamma_r)
        tau = phi_r
        estimates.append(DecompositionEstimate(
            group=r, estimator=EstimatorTag.REGRESSION, tau=tau, delta=delta, zeta=zeta,
            pct_reduction=percent_reduction(delta, tau), n_rows=int(np.sum(groups == r)),
            n_rows_reference=n_reference))
    return estimates


def _confounder_ratio(gamma: LinearModel, alpha: LinearModel, x_columns: List[str],
                      table: ObservationTable, groups: np.ndarray, r: str, reference: str) -> float:
    """alpha_x / gamma_x; for vector X the ratio of both X contributions at the group mean difference"""
    if not x_columns:
        return 0.0
    gamma_x = np.array([gamma.coef(name) for name in x_columns])
    alpha_x = np.array([alpha.coef(name) for name in x_columns])
    if len(x_columns) == 1:
        numerator, denominator = alpha_x[0], gamma_x[0]
    else:
        X = gamma.design.matrix(table.to_frame(gamma.design.spec.columns_used))
        positions = [gamma.design.index_of(name) for name in x_columns]
        difference = (X[groups == r][:, positions].mean(axis=0)
                      - X[groups == reference][:, positions].mean(axis=0))
        numerator, denominator = float(alpha_x @ difference), float(gamma_x @ difference)
    if denominator == 0:
        raise EstimationError("Confounder coefficient in the X-adjusted regression is zero")
    return float(numerator / denominator)


def run_estimator(name: str, config: AnalysisConfig, table: ObservationTable,
                  seed: int = 0) -> List[DecompositionEstimate]:
    """Dispatch by estimator name: weighting, differential, regression or interposed"""
    if name == "weighting":
        return decompose(config.without_differential(), table, seed)
    if name == "differential":
        return decompose(config.with_differential(), table, seed)
    if name == "regression":
        return decompose_regression(config.without_differential(), table)
    if name == "interposed":
        return decompose_interposed(config, table, seed)
    raise ConfigurationError(f"Unknown estimator '{name}'")
