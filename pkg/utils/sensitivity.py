#!/usr/bin/env python3
"""
Sensitivity analysis for unobserved mediator-outcome confounding

Bias of delta (and, with the opposite sign, of zeta) expressed through two partial R^2
parameters:
- r2_yu: how much of the outcome variance the unobserved confounder U explains given
  group, confounders, mediators and covariates
- r2_udm: how much of the variance of U the mediators explain given group, confounders and covariates

|bias| = se(gamma_dm) * sqrt(r2_yu * r2_udm / (1 - r2_udm) * df) * mediator_gap

Grids over both parameters, zero / CI crossing contours, and benchmarks from observed
covariates are built on top of that formula.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from utils.analysis_config import AnalysisConfig
from utils.data_table import ObservationTable
from utils.errors import DegenerateScoreError, RankDeficiencyError, SensitivityDomainError
from utils.estimators import DecompositionEstimate, fit_outcome_model
from utils.glm_core import DesignSpec, LinearModel, fit_linear_model

logger = logging.getLogger(__name__)

CI_MULTIPLIER = 1.96
DEFAULT_RESOLUTION = 201
DEFAULT_R2_MAX = 0.5
DEFAULT_VALUE_CONTOURS = (-0.2, -0.1, 0.1, 0.2)
SCORE_COLUMN = "mediator_score"
NO_CROSSING = "no crossing in range"

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class SensitivityInputs:
    se_gamma_dm: float
    df: int
    mediator_gap: float
    delta: float
    zeta: float
    delta_se: Optional[float] = None
    zeta_se: Optional[float] = None
    group: Optional[str] = None
    mediator_weights: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.se_gamma_dm > 0:
            raise SensitivityDomainError(f"se_gamma_dm must be positive, got {self.se_gamma_dm}")
        if self.df < 1:
            raise SensitivityDomainError(f"df must be at least 1, got {self.df}")
        if not self.mediator_gap >= 0:
            raise SensitivityDomainError(f"mediator_gap must be non-negative, got {self.mediator_gap}")

    @property
    def tau(self) -> float:
        return self.delta + self.zeta


@dataclass(frozen=True)
class BenchmarkPoint:
    covariate: str
    r2_y: float
    r2_dm: float
    multiplier: int = 1


@dataclass(frozen=True)
class AdjustedEstimate:
    delta_adj: ArrayLike
    zeta_adj: ArrayLike
    direction: str


def compute_bias(r2_yu: ArrayLike, r2_udm: ArrayLike, inputs: SensitivityInputs) -> ArrayLike:
    """|bias| for scalar or array-valued partial R^2 parameters"""
    yu = np.asarray(r2_yu, dtype=float)
    udm = np.asarray(r2_udm, dtype=float)
    if np.any(udm == 1.0):
        raise SensitivityDomainError("r2_udm = 1 makes the bias unbounded")
    if np.any((yu < 0) | (yu >= 1) | (udm < 0) | (udm >= 1)):
        raise SensitivityDomainError("partial R^2 parameters must lie in [0, 1)")
    bias = inputs.se_gamma_dm * np.sqrt(yu * udm / (1.0 - udm) * inputs.df) * inputs.mediator_gap
    if bias.ndim == 0:
        return float(bias)
    return bias


def constant_effect_bias(gamma_u: float, beta_dm: float, mediator_gap: float) -> float:
    """bias(delta) when U's effect on Y and the mediators' effect on U are constant"""
    return gamma_u * beta_dm * mediator_gap


def compute_modified_bias(gamma_u_by_z: Sequence[float], beta_dm: float, strata_probs: np.ndarray,
                          mediator_gap: ArrayLike, c_probs: Optional[Sequence[float]] = None) -> float:
    """
    bias(delta) when the effect of U on Y varies over confounder strata z.

    Args:
        gamma_u_by_z: effect of U on Y in each stratum z
        beta_dm: joint effect of the mediators on U (constant)
        strata_probs: P(z | R=0, c), one row per covariate cell c (a 1-D array is one cell)
        mediator_gap: mediator gap per covariate cell (or one value for all cells)
        c_probs: P(c) per covariate cell (defaults to a single cell)
    """
    gamma = np.asarray(gamma_u_by_z, dtype=float)
    probs = np.atleast_2d(np.asarray(strata_probs, dtype=float))
    if probs.shape[1] != gamma.size:
        raise SensitivityDomainError(
            f"strata_probs has {probs.shape[1]} strata, gamma_u_by_z has {gamma.size}")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-8) or np.any(probs < 0):
        raise SensitivityDomainError("strata probabilities must sum to 1 within each covariate cell")
    n_cells = probs.shape[0]
    if c_probs is None:
        if n_cells != 1:
            raise SensitivityDomainError("c_probs is required with more than one covariate cell")
        c_probs = [1.0]
    weights_c = np.asarray(c_probs, dtype=float)
    if weights_c.size != n_cells or abs(weights_c.sum() - 1.0) > 1e-8:
        raise SensitivityDomainError("c_probs must give one probability per cell, summing to 1")
    gaps = np.broadcast_to(np.asarray(mediator_gap, dtype=float), (n_cells,))
    gamma_by_c = probs @ gamma
    return float(np.sum(gamma_by_c * beta_dm * gaps * weights_c))


def adjusted_estimates(estimate: Union[DecompositionEstimate, SensitivityInputs], bias: ArrayLike,
                       direction: str = "adversarial") -> Union[AdjustedEstimate, List[AdjustedEstimate]]:
    """
    Apply |bias| to delta and zeta with opposite signs (their sum stays tau).

    "adversarial" moves delta toward zero, "favorable" away from it, "both" returns both.
    """
    toward_zero = 1.0 if estimate.delta >= 0 else -1.0
    if direction == "both":
        return [adjusted_estimates(estimate, bias, "adversarial"),
                adjusted_estimates(estimate, bias, "favorable")]
    if direction == "adversarial":
        sign = toward_zero
    elif direction == "favorable":
        sign = -toward_zero
    else:
        raise SensitivityDomainError(f"Unknown adjustment direction '{direction}'")
    return AdjustedEstimate(delta_adj=estimate.delta - sign * bias,
                            zeta_adj=estimate.zeta + sign * bias, direction=direction)


def _crossing_targets(estimate: float, se: Optional[float]) -> Tuple[float, Optional[float]]:
    """Bias needed for the estimate, and for its CI, to reach zero"""
    zero = abs(estimate)
    if se is None:
        return zero, None
    return zero, max(zero - CI_MULTIPLIER * se, 0.0)


def diagonal_crossing(inputs: SensitivityInputs, target: float, r2_max: float) -> Optional[float]:
    """t with compute_bias(t, t) == target on [0, r2_max], or None when out of range"""
    if target <= 0:
        return 0.0

    def excess(t: float) -> float:
        return compute_bias(t, t, inputs) - target

    if excess(r2_max) < 0:
        return None
    return float(brentq(excess, 0.0, r2_max, xtol=1e-14, rtol=1e-12))


def _first_crossings(axis: np.ndarray, flags: np.ndarray) -> List[Tuple[float, float]]:
    points = []
    for i, row in enumerate(flags):
        hits = np.flatnonzero(row)
        if hits.size:
            points.append((float(axis[i]), float(axis[hits[0]])))
    return points


@dataclass
class SensitivityGrid:
    inputs: SensitivityInputs
    axis: np.ndarray
    bias: np.ndarray
    delta_adj: np.ndarray
    zeta_adj: np.ndarray
    # zeta moved toward zero by the bias; the zeta crossing flags refer to this column
    zeta_adj_to_zero: np.ndarray
    zero_cross: np.ndarray
    ci_cross: Optional[np.ndarray]
    zeta_zero_cross: np.ndarray
    zeta_ci_cross: Optional[np.ndarray]
    contours: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    benchmarks: List[BenchmarkPoint] = field(default_factory=list)

    @property
    def r2_max(self) -> float:
        return float(self.axis[-1])

    def to_frame(self) -> pd.DataFrame:
        """Long format, r2_yu-major: one row per grid point"""
        yu, udm = np.meshgrid(self.axis, self.axis, indexing="ij")
        frame = pd.DataFrame({
            "r2_yu": yu.ravel(),
            "r2_udm": udm.ravel(),
            "bias": self.bias.ravel(),
            "delta_adj": self.delta_adj.ravel(),
            "zeta_adj": self.zeta_adj.ravel(),
            "zeta_adj_to_zero": self.zeta_adj_to_zero.ravel(),
            "zero_cross": self.zero_cross.ravel(),
            "ci_cross": self.ci_cross.ravel() if self.ci_cross is not None else False,
            "zeta_zero_cross": self.zeta_zero_cross.ravel(),
            "zeta_ci_cross": self.zeta_ci_cross.ravel() if self.zeta_ci_cross is not None else False,
        })
        return frame

    def summary(self) -> Dict[str, object]:
        """Diagonal (r2_yu = r2_udm = t) crossing points for delta and zeta"""
        inputs = self.inputs
        delta_zero, delta_ci = _crossing_targets(inputs.delta, inputs.delta_se)
        zeta_zero, zeta_ci = _crossing_targets(inputs.zeta, inputs.zeta_se)
        crossings = {
            "delta_zero": delta_zero,
            "delta_ci": delta_ci,
            "zeta_zero": zeta_zero,
            "zeta_ci": zeta_ci,
        }
        summary: Dict[str, object] = {
            "group": inputs.group,
            "r2_max": self.r2_max,
            "resolution": int(self.axis.size),
            "delta": inputs.delta,
            "zeta": inputs.zeta,
            "se_gamma_dm": inputs.se_gamma_dm,
            "df": inputs.df,
            "mediator_gap": inputs.mediator_gap,
        }
        for name, target in crossings.items():
            if target is None:
                summary[name] = None
                continue
            t = diagonal_crossing(inputs, target, self.r2_max)
            summary[name] = NO_CROSSING if t is None else t
        return summary


def sensitivity_grid(inputs: SensitivityInputs, resolution: int = DEFAULT_RESOLUTION,
                     r2_max: float = DEFAULT_R2_MAX,
                     value_contours: Sequence[float] = DEFAULT_VALUE_CONTOURS) -> SensitivityGrid:
    """Evaluate the bias over [0, r2_max]^2 with ``resolution`` points per axis"""
    if resolution < 2:
        raise SensitivityDomainError(f"Grid resolution must be at least 2, got {resolution}")
    if not 0.0 < r2_max < 1.0:
        raise SensitivityDomainError(f"r2_max must be in (0, 1), got {r2_max}")

    axis = np.linspace(0.0, r2_max, resolution)
    yu, udm = np.meshgrid(axis, axis, indexing="ij")
    bias = compute_bias(yu, udm, inputs)
    adjusted = adjusted_estimates(inputs, bias, "adversarial")

    delta_zero, delta_ci = _crossing_targets(inputs.delta, inputs.delta_se)
    zeta_zero, zeta_ci = _crossing_targets(inputs.zeta, inputs.zeta_se)
    grid = SensitivityGrid(
        inputs=inputs,
        axis=axis,
        bias=bias,
        delta_adj=adjusted.delta_adj,
        zeta_adj=adjusted.zeta_adj,
        zeta_adj_to_zero=inputs.zeta - (1.0 if inputs.zeta >= 0 else -1.0) * bias,
        zero_cross=bias >= delta_zero,
        ci_cross=bias >= delta_ci if delta_ci is not None else None,
        zeta_zero_cross=bias >= zeta_zero,
        zeta_ci_cross=bias >= zeta_ci if zeta_ci is not None else None,
    )

    grid.contours["delta_zero"] = _first_crossings(axis, grid.zero_cross)
    grid.contours["zeta_zero"] = _first_crossings(axis, grid.zeta_zero_cross)
    if grid.ci_cross is not None:
        grid.contours["delta_ci"] = _first_crossings(axis, grid.ci_cross)
    if grid.zeta_ci_cross is not None:
        grid.contours["zeta_ci"] = _first_crossings(axis, grid.zeta_ci_cross)

    toward_zero = 1.0 if inputs.delta >= 0 else -1.0
    for value in value_contours:
        needed = toward_zero * (inputs.delta - value)
        if needed > 0:
            grid.contours[f"delta={value:g}"] = _first_crossings(axis, bias >= needed)
    return grid


# Inputs from data

def partial_r2(table: ObservationTable, response: str, column: str, controls: Sequence[str] = (),
               reference_levels: Optional[Dict[str, str]] = None) -> float:
    """Partial R^2 of a numeric ``column`` in a regression of ``response`` on it and ``controls``"""
    model = fit_linear_model(table, response, DesignSpec.build(
        main=[column] + list(controls), reference_levels=reference_levels))
    return model.partial_r2(column)


def mediator_score(table: ObservationTable, config: AnalysisConfig,
                   weights: Optional[Dict[str, float]] = None) -> Tuple[np.ndarray, Dict[str, float]]:
    """
    Composite mediator score S = sum_j w_j * mediator_j, rescaled to unit sample variance.

    Weights default to the outcome model's main-effect mediator coefficients and are keyed
    by design-matrix column (a numeric mediator's own name, or "d[level]" for categorical ones).
    """
    outcome_model = fit_outcome_model(config, table)
    design = outcome_model.design
    columns = [name for mediator in config.mediators for name in design.columns_for(mediator)]
    if weights is None:
        weights = {name: outcome_model.coef(name) for name in columns}
    omega = np.array([float(weights.get(name, 0.0)) for name in columns])
    if not np.any(omega != 0):
        raise DegenerateScoreError("All mediator coefficients are zero; the mediator score is degenerate")

    X = design.matrix(table.to_frame(design.spec.columns_used))
    positions = [design.index_of(name) for name in columns]
    score = X[:, positions] @ omega
    spread = float(np.std(score, ddof=1)) if score.size > 1 else 0.0
    if spread == 0:
        raise DegenerateScoreError("The mediator score is constant")
    return score / spread, dict(zip(columns, omega.tolist()))


def prepare_sensitivity_inputs(table: ObservationTable, config: AnalysisConfig,
                               decomposition: Union[DecompositionEstimate, Sequence[DecompositionEstimate]],
                               group: Optional[str] = None,
                               delta_se: Optional[float] = None, zeta_se: Optional[float] = None,
                               mediator_weights: Optional[Dict[str, float]] = None) -> SensitivityInputs:
    """
    se(gamma_dm) and df from Y ~ S + group + X + C; the mediator gap is |coefficient of I(R=r)|
    in S ~ group + C.
    """
    if isinstance(decomposition, DecompositionEstimate):
        estimate = decomposition
    else:
        candidates = [e for e in decomposition if group is None or e.group == group]
        candidates = [e for e in candidates if e.group != config.reference_level]
        if not candidates:
            raise SensitivityDomainError(f"No decomposition estimate for group {group}")
        estimate = candidates[0]

    score, omega = mediator_score(table, config, mediator_weights)
    scored = table.with_column(SCORE_COLUMN, score)
    group_column = config.group.column
    references = {group_column: config.reference_level}

    outcome_fit = fit_linear_model(scored, config.outcome, DesignSpec.build(
        main=[SCORE_COLUMN, group_column] + config.confounders + list(config.covariates),
        reference_levels=references))
    gap_fit = fit_linear_model(scored, SCORE_COLUMN, DesignSpec.build(
        main=[group_column] + list(config.covariates), reference_levels=references))

    return SensitivityInputs(
        se_gamma_dm=outcome_fit.se(SCORE_COLUMN),
        df=outcome_fit.df_resid,
        mediator_gap=abs(gap_fit.coef(f"{group_column}[{estimate.group}]")),
        delta=estimate.delta,
        zeta=estimate.zeta,
        delta_se=delta_se,
        zeta_se=zeta_se,
        group=estimate.group,
        mediator_weights=omega,
    )


@dataclass
class BenchmarkReport:
    points: List[BenchmarkPoint]
    notes: List[str] = field(default_factory=list)

    @property
    def strongest(self) -> Optional[BenchmarkPoint]:
        base = [point for point in self.points if point.multiplier == 1]
        if not base:
            return None
        return max(base, key=lambda point: point.r2_y)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"covariate": p.covariate, "r2_y": p.r2_y, "r2_dm": p.r2_dm,
                              "multiplier": p.multiplier} for p in self.points],
                            columns=["covariate", "r2_y", "r2_dm", "multiplier"])


def _fit_dropping_collinear(table: ObservationTable, response: str, fixed: List[str],
                            covariates: List[str], references: Dict[str, str],
                            notes: List[str]) -> Tuple[LinearModel, List[str]]:
    kept = list(covariates)
    while True:
        try:
            return fit_linear_model(table, response, DesignSpec.build(
                main=fixed + kept, reference_levels=references)), kept
        except RankDeficiencyError as e:
            culprit = None
            for candidate in kept:
                trial = DesignSpec.build(main=fixed + [c for c in kept if c != candidate],
                                         reference_levels=references)
                try:
                    fit_linear_model(table, response, trial)
                except RankDeficiencyError:
                    continue
                culprit = candidate
                break
            if culprit is None:
                raise
            kept.remove(culprit)
            note = f"benchmark for '{culprit}' skipped: collinear with other regressors ({e.dependent_columns})"
            notes.append(note)
            logger.warning(f"⚠️ {note}")


def benchmark_covariates(table: ObservationTable, config: AnalysisConfig,
                         mediator_weights: Optional[Dict[str, float]] = None,
                         multipliers: Sequence[int] = (1, 2)) -> BenchmarkReport:
    """
    Partial R^2 benchmarks from the observed covariates.

    r2_y: covariate in Y ~ group + X + D + M + C. r2_dm: covariate in S ~ group + X + C,
    with S the mediator score. Both computed as t^2 / (t^2 + df). Multiplier k > 1 scales r2_dm.
    """
    group_column = config.group.column
    references = {group_column: config.reference_level}
    notes: List[str] = []

    outcome_fit, kept = _fit_dropping_collinear(
        table, config.outcome, [group_column] + config.confounders + list(config.mediators),
        list(config.covariates), references, notes)
    score, _ = mediator_score(table, config, mediator_weights)
    scored = table.with_column(SCORE_COLUMN, score)
    score_fit = fit_linear_model(scored, SCORE_COLUMN, DesignSpec.build(
        main=[group_column] + config.confounders + kept, reference_levels=references))

    points: List[BenchmarkPoint] = []
    for covariate in kept:
        for name in outcome_fit.design.columns_for(covariate):
            r2_y = outcome_fit.partial_r2(name)
            r2_dm = score_fit.partial_r2(name)
            for multiplier in multipliers:
                scaled = r2_dm * multiplier
                if scaled >= 1.0:
                    notes.append(f"{multiplier}x benchmark for '{name}' skipped: r2_dm reaches 1")
                    continue
                points.append(BenchmarkPoint(covariate=name, r2_y=r2_y, r2_dm=scaled,
                                             multiplier=multiplier))
    return BenchmarkReport(points=points, notes=notes)


def benchmark_summary(report: BenchmarkReport, inputs: SensitivityInputs) -> Dict[str, object]:
    """Bias at the strongest covariate's equal-R^2 point and at the point with doubled r2_dm"""
    strongest = report.strongest
    if strongest is None:
        return {"strongest_covariate": None}
    r2 = strongest.r2_y
    summary: Dict[str, object] = {"strongest_covariate": strongest.covariate, "r2_y": r2}
    delta_zero, delta_ci = _crossing_targets(inputs.delta, inputs.delta_se)
    zeta_zero, zeta_ci = _crossing_targets(inputs.zeta, inputs.zeta_se)
    for label, r2_udm in (("equal", r2), ("doubled", 2.0 * r2)):
        if r2_udm >= 1.0:
            summary[label] = None
            continue
        bias = compute_bias(r2, r2_udm, inputs)
        summary[label] = {
            "r2_yu": r2,
            "r2_udm": r2_udm,
            "bias": bias,
            "delta_crosses_zero": bias >= delta_zero,
            "delta_ci_crosses_zero": None if delta_ci is None else bias >= delta_ci,
            "zeta_crosses_zero": bias >= zeta_zero,
            "zeta_ci_crosses_zero": None if zeta_ci is None else bias >= zeta_ci,
        }
    return summary
