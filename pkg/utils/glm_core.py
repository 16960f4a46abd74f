#!/usr/bin/env python3
"""
GLM core

Design expansion plus the two nuisance model families used by the estimators:
- multinomial logistic regression fitted by Newton iterations with step-halving
- ordinary least squares through a pivoted QR decomposition

Non-intercept design columns are centered (when an intercept is present) and scaled
before fitting; coefficients and standard errors are reported on the original scale.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy import linalg
from scipy.special import logsumexp

from utils.data_table import ObservationTable
from utils.errors import (ConfigurationError, ConvergenceError, EstimationError, PredictionError,
                          RankDeficiencyError, SeparationError)

logger = logging.getLogger(__name__)

SCORE_TOLERANCE = 1e-8
# Log-likelihood changes below this fraction of |loglik| are rounding noise
LOGLIK_RELATIVE_TOLERANCE = 1e-12
MAX_ITERATIONS = 100
MAX_HALVINGS = 30
SEPARATION_PROBABILITY = 1e-10
RANK_TOLERANCE = 1e-9
CELL_SEPARATOR = "|"


class Term(BaseModel):
    """One design term: intercept, main effect, two-column interaction or joint cell factor"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["intercept", "main", "interaction", "cell"]
    columns: Tuple[str, ...] = ()
    # interaction only: keep these non-reference levels of the first (categorical) column
    levels: Optional[Tuple[str, ...]] = None

    @classmethod
    def intercept(cls) -> "Term":
        return cls(kind="intercept")

    @classmethod
    def main(cls, column: str) -> "Term":
        return cls(kind="main", columns=(column,))

    @classmethod
    def interaction(cls, first: str, second: str, levels: Optional[Sequence[str]] = None) -> "Term":
        return cls(kind="interaction", columns=(first, second),
                   levels=tuple(levels) if levels is not None else None)

    @classmethod
    def cell(cls, columns: Sequence[str]) -> "Term":
        return cls(kind="cell", columns=tuple(columns))


class DesignSpec:
    """Ordered list of terms; categorical columns expand to reference-coded indicators"""

    def __init__(self, terms: Sequence[Term], reference_levels: Optional[Dict[str, str]] = None):
        self.terms = list(terms)
        self.reference_levels = dict(reference_levels or {})

    @classmethod
    def build(cls, main: Sequence[str] = (), interactions: Sequence[Term] = (),
              cells: Sequence[Sequence[str]] = (), intercept: bool = True,
              reference_levels: Optional[Dict[str, str]] = None) -> "DesignSpec":
        terms = [Term.intercept()] if intercept else []
        terms += [Term.cell(columns) for columns in cells if columns]
        terms += [Term.main(column) for column in main]
        terms += list(interactions)
        return cls(terms, reference_levels)

    @property
    def columns_used(self) -> List[str]:
        used: List[str] = []
        for term in self.terms:
            for column in term.columns:
                if column not in used:
                    used.append(column)
        return used

    @property
    def has_intercept(self) -> bool:
        return any(term.kind == "intercept" for term in self.terms)

    def with_terms(self, extra: Sequence[Term]) -> "DesignSpec":
        return DesignSpec(self.terms + list(extra), self.reference_levels)

    def bind(self, table: ObservationTable) -> "BoundDesign":
        """Capture the levels and observed cells of ``table`` so new rows expand identically"""
        levels: Dict[str, List[str]] = {}
        references: Dict[str, str] = {}
        for column in self.columns_used:
            if table.is_categorical(column):
                levels[column] = table.levels(column)
                reference = self.reference_levels.get(column, levels[column][0])
                if reference not in levels[column]:
                    raise ConfigurationError(
                        f"Reference level '{reference}' is not a level of '{column}'")
                references[column] = reference

        frame = table.to_frame(self.columns_used) if self.columns_used else table.to_frame([])
        supports: Dict[Tuple[str, ...], List[str]] = {}
        for term in self.terms:
            if term.kind == "cell":
                keys = _cell_keys(frame, term.columns)
                supports[term.columns] = sorted(set(keys.tolist()))

        bound = BoundDesign(spec=self, levels=levels, references=references, cell_supports=supports)
        bound.column_names = bound.expand(frame.iloc[:0])[1]
        return bound


@dataclass
class BoundDesign:
    spec: DesignSpec
    levels: Dict[str, List[str]]
    references: Dict[str, str]
    cell_supports: Dict[Tuple[str, ...], List[str]]
    column_names: List[str] = field(default_factory=list)

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    @property
    def intercept_index(self) -> Optional[int]:
        if "(intercept)" in self.column_names:
            return self.column_names.index("(intercept)")
        return None

    def index_of(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise ConfigurationError(f"Design has no column '{name}'; columns are {self.column_names}")

    def columns_for(self, column: str) -> List[str]:
        """Design columns produced by the main effect of ``column``"""
        if column in self.levels:
            return [f"{column}[{level}]" for level in self.levels[column]
                    if level != self.references[column]]
        return [column]

    def matrix(self, frame: pd.DataFrame) -> np.ndarray:
        return self.expand(frame)[0]

    def expand(self, frame: pd.DataFrame) -> Tuple[np.ndarray, List[str]]:
        n = len(frame)
        blocks: List[np.ndarray] = []
        names: List[str] = []
        for term in self.spec.terms:
            if term.kind == "intercept":
                blocks.append(np.ones((n, 1)))
                names.append("(intercept)")
            elif term.kind == "main":
                block, block_names = self._main_block(frame, term.columns[0])
                blocks.append(block)
                names += block_names
            elif term.kind == "interaction":
                first, first_names = self._main_block(frame, term.columns[0], term.levels)
                second, second_names = self._main_block(frame, term.columns[1])
                for i, first_name in enumerate(first_names):
                    for j, second_name in enumerate(second_names):
                        blocks.append((first[:, i] * second[:, j])[:, None])
                        names.append(f"{first_name}:{second_name}")
            else:
                block, block_names = self._cell_block(frame, term.columns)
                blocks.append(block)
                names += block_names
        if not blocks:
            return np.zeros((n, 0)), names
        return np.hstack(blocks), names

    def _main_block(self, frame: pd.DataFrame, column: str,
                    keep_levels: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, List[str]]:
        if column not in frame.columns:
            raise PredictionError(f"Design rows lack column '{column}'")
        if column not in self.levels:
            if keep_levels is not None:
                raise ConfigurationError(f"Level restriction on numeric column '{column}'")
            values = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=float)
            return values[:, None], [column]

        levels = self.levels[column]
        labels = frame[column].astype(str).to_numpy(dtype=object)
        positions = pd.Index(levels).get_indexer(labels)
        if (positions < 0).any():
            unseen = sorted(set(labels[positions < 0].tolist()))
            raise PredictionError(f"Unseen level(s) {unseen} in column '{column}'")
        kept = [level for level in levels if level != self.references[column]]
        if keep_levels is not None:
            kept = [level for level in kept if level in keep_levels]
        block = np.zeros((len(labels), len(kept)))
        for j, level in enumerate(kept):
            block[:, j] = positions == levels.index(level)
        return block, [f"{column}[{level}]" for level in kept]

    def _cell_block(self, frame: pd.DataFrame, columns: Tuple[str, ...]) -> Tuple[np.ndarray, List[str]]:
        support = self.cell_supports[columns]
        keys = _cell_keys(frame, columns)
        positions = pd.Index(support).get_indexer(keys)
        if (positions < 0).any():
            unseen = sorted(set(keys[positions < 0].tolist()))
            raise PredictionError(f"Unseen cell(s) {unseen[:5]} of ({', '.join(columns)})")
        block = np.zeros((len(keys), len(support) - 1))
        rows = np.flatnonzero(positions > 0)
        block[rows, positions[rows] - 1] = 1.0
        label = ",".join(columns)
        return block, [f"cell({label})[{key}]" for key in support[1:]]


def _cell_keys(frame: pd.DataFrame, columns: Sequence[str]) -> np.ndarray:
    for column in columns:
        if column not in frame.columns:
            raise PredictionError(f"Design rows lack column '{column}'")
    if len(frame) == 0:
        return np.array([], dtype=object)
    keys = frame[columns[0]].astype(str).to_numpy(dtype=object)
    for column in columns[1:]:
        keys = keys + CELL_SEPARATOR + frame[column].astype(str).to_numpy(dtype=object)
    return keys


def _standardize(X: np.ndarray, intercept_index: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Return the standardized design Z and the map T with X @ (T @ b) == Z @ b"""
    n, p = X.shape
    center = np.zeros(p)
    scale = np.ones(p)
    for j in range(p):
        if j == intercept_index:
            continue
        sd = X[:, j].std() if n else 0.0
        if sd > 0:
            scale[j] = sd
            if intercept_index is not None:
                center[j] = X[:, j].mean()
    Z = (X - center) / scale
    T = np.diag(1.0 / scale)
    if intercept_index is not None:
        T[intercept_index, :] = -center / scale
        T[intercept_index, intercept_index] = 1.0
    return Z, T


def _pivoted_qr(Z: np.ndarray, names: List[str]):
    q, r, pivot = linalg.qr(Z, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(r))
    p = Z.shape[1]
    if diagonal.size == 0 or diagonal[0] == 0:
        raise RankDeficiencyError("Design matrix is empty or all zero", dependent_columns=list(names))
    rank = int(np.sum(diagonal > RANK_TOLERANCE * diagonal[0]))
    if rank < p:
        dependent = [names[i] for i in pivot[rank:]]
        raise RankDeficiencyError(
            f"Design matrix is rank deficient ({rank} of {p}); dependent columns: {dependent}",
            dependent_columns=dependent)
    return q, r, pivot


@dataclass(frozen=True)
class LinearModel:
    design: BoundDesign
    response: str
    coefficients: np.ndarray
    standard_errors: np.ndarray
    residuals: np.ndarray
    residual_sd: float
    df_resid: int
    rss: float
    n_obs: int

    @property
    def column_names(self) -> List[str]:
        return self.design.column_names

    @property
    def t_values(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coefficients / self.standard_errors

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.design.index_of(name)])

    def se(self, name: str) -> float:
        return float(self.standard_errors[self.design.index_of(name)])

    def t_value(self, name: str) -> float:
        return float(self.t_values[self.design.index_of(name)])

    def partial_r2(self, name: str) -> float:
        """Partial R^2 of one design column: t^2 / (t^2 + df)"""
        t = self.t_value(name)
        return float(t * t / (t * t + self.df_resid))

    def predict(self, rows: Union[pd.DataFrame, ObservationTable]) -> np.ndarray:
        frame = rows.to_frame() if isinstance(rows, ObservationTable) else rows
        return self.design.matrix(frame) @ self.coefficients

    def as_series(self) -> pd.Series:
        return pd.Series(self.coefficients, index=self.column_names, name=self.response)


def fit_linear_model(table: ObservationTable, response: str,
                     design: Union[DesignSpec, BoundDesign]) -> LinearModel:
    """Least squares via pivoted QR; standard errors from the unbiased residual variance"""
    bound = design.bind(table) if isinstance(design, DesignSpec) else design
    if table.is_categorical(response):
        raise ConfigurationError(f"Response '{response}' must be numeric")
    X = bound.matrix(table.to_frame(bound.spec.columns_used))
    y = table.column(response)
    n, p = X.shape
    if n <= p:
        raise EstimationError(f"Linear model for '{response}' needs more rows ({n}) than design columns ({p})")

    Z, T = _standardize(X, bound.intercept_index)
    q, r, pivot = _pivoted_qr(Z, bound.column_names)
    beta_z = np.empty(p)
    beta_z[pivot] = linalg.solve_triangular(r, q.T @ y)
    residuals = y - Z @ beta_z
    rss = float(residuals @ residuals)
    df_resid = n - p
    sigma2 = rss / df_resid

    r_inverse = linalg.solve_triangular(r, np.eye(p))
    covariance_z = np.empty((p, p))
    covariance_z[np.ix_(pivot, pivot)] = sigma2 * (r_inverse @ r_inverse.T)
    covariance = T @ covariance_z @ T.T

    return LinearModel(
        design=bound,
        response=response,
        coefficients=T @ beta_z,
        standard_errors=np.sqrt(np.clip(np.diag(covariance), 0.0, None)),
        residuals=residuals,
        residual_sd=float(np.sqrt(sigma2)),
        df_resid=df_resid,
        rss=rss,
        n_obs=n,
    )


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    gradient_norm: float
    log_likelihood: float
    converged: bool
    trace: List[Dict[str, float]] = field(default_factory=list)
    note: str = ""


@dataclass(frozen=True)
class GroupMembershipModel:
    """Multinomial logit; coefficients are design columns x non-reference levels"""
    design: BoundDesign
    response: str
    levels: List[str]
    reference: str
    coefficients: np.ndarray
    report: ConvergenceReport

    @property
    def non_reference_levels(self) -> List[str]:
        return [level for level in self.levels if level != self.reference]

    def _log_probabilities(self, X: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
        eta = np.zeros((X.shape[0], len(self.levels)))
        columns = [self.levels.index(level) for level in self.non_reference_levels]
        eta[:, columns] = X @ coefficients
        return eta - logsumexp(eta, axis=1, keepdims=True)

    def predict_proba(self, rows: Union[pd.DataFrame, ObservationTable]) -> np.ndarray:
        """Probabilities over ``levels`` (in level order) for every row"""
        frame = rows.to_frame() if isinstance(rows, ObservationTable) else rows
        X = self.design.matrix(frame)
        return np.exp(self._log_probabilities(X, self.coefficients))

    def probability(self, rows: Union[pd.DataFrame, ObservationTable], level: str) -> np.ndarray:
        return self.predict_proba(rows)[:, self.levels.index(level)]

    def log_likelihood(self, table: ObservationTable,
                       coefficients: Optional[np.ndarray] = None) -> float:
        coefficients = self.coefficients if coefficients is None else coefficients
        X = self.design.matrix(table.to_frame(self.design.spec.columns_used))
        log_p = self._log_probabilities(X, coefficients)
        positions = pd.Index(self.levels).get_indexer(table.column(self.response))
        return float(log_p[np.arange(len(positions)), positions].sum())

    def coefficient_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.coefficients, index=self.design.column_names,
                            columns=self.non_reference_levels)


def fit_multinomial_logit(table: ObservationTable, response: Any,
                          design: Union[DesignSpec, BoundDesign],
                          reference: Optional[str] = None) -> GroupMembershipModel:
    """
    Maximize the multinomial likelihood by Newton iterations from all-zero coefficients.

    Args:
        table: observations
        response: categorical column name, or a group binding with ``column`` and ``reference``
        design: right-hand side
        reference: reference level (defaults to the binding's reference or the first level)

    Returns:
        GroupMembershipModel with a convergence report

    Raises:
        ConvergenceError: no convergence within the iteration limit, or step-halving stalls
        SeparationError: a fitted probability falls below 1e-10 before convergence
    """
    if hasattr(response, "column"):
        reference = reference or response.reference
        response = response.column
    if not table.is_categorical(response):
        raise ConfigurationError(f"Response '{response}' must be categorical")
    levels = table.levels(response)
    if len(levels) < 2:
        raise ConfigurationError(f"Response '{response}' needs at least 2 levels, has {levels}")
    reference = reference or levels[0]
    if reference not in levels:
        raise ConfigurationError(f"Reference '{reference}' is not a level of '{response}'")

    bound = design.bind(table) if isinstance(design, DesignSpec) else design
    X = bound.matrix(table.to_frame(bound.spec.columns_used))
    n, p = X.shape
    Z, T = _standardize(X, bound.intercept_index)
    _pivoted_qr(Z, bound.column_names)

    codes = pd.Index(levels).get_indexer(table.column(response))
    non_reference = [i for i, level in enumerate(levels) if level != reference]
    k = len(non_reference)
    Y = np.zeros((n, k))
    for j, position in enumerate(non_reference):
        Y[:, j] = codes == position

    def evaluate(B: np.ndarray) -> Tuple[np.ndarray, float]:
        eta = np.zeros((n, len(levels)))
        eta[:, non_reference] = Z @ B
        log_p = eta - logsumexp(eta, axis=1, keepdims=True)
        return np.exp(log_p), float(log_p[np.arange(n), codes].sum())

    B = np.zeros((p, k))
    P, log_likelihood = evaluate(B)
    trace: List[Dict[str, float]] = []
    step = 0.0
    converged = False
    note = ""
    iteration = 0
    max_score = np.inf

    for iteration in range(MAX_ITERATIONS + 1):
        P_non_reference = P[:, non_reference]
        score = Z.T @ (Y - P_non_reference)
        max_score = float(np.abs(score).max()) if score.size else 0.0
        trace.append({"iteration": iteration, "log_likelihood": log_likelihood,
                      "max_score": max_score, "step": step})
        logger.debug(f"GLM_CORE: iteration {iteration} loglik={log_likelihood:.10g} max|score|={max_score:.3e}")

        if max_score < SCORE_TOLERANCE:
            converged = True
            break
        if P.min() < SEPARATION_PROBABILITY:
            raise SeparationError(
                f"Quasi-complete separation in model for '{response}': fitted probability "
                f"{P.min():.2e} before convergence (iteration {iteration})")
        if iteration == MAX_ITERATIONS:
            break

        information = np.zeros((p * k, p * k))
        for a in range(k):
            for b in range(a, k):
                weight = P_non_reference[:, a] * ((a == b) - P_non_reference[:, b])
                block = Z.T @ (Z * weight[:, None])
                information[a * p:(a + 1) * p, b * p:(b + 1) * p] = block
                information[b * p:(b + 1) * p, a * p:(a + 1) * p] = block
        try:
            direction = linalg.solve(information, score.flatten(order="F"), assume_a="pos")
        except (linalg.LinAlgError, ValueError) as e:
            raise ConvergenceError(f"Singular information matrix for '{response}': {e}", trace) from e
        direction = direction.reshape((p, k), order="F")

        tolerance = LOGLIK_RELATIVE_TOLERANCE * max(abs(log_likelihood), 1.0)
        step = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            candidate = B + step * direction
            P_candidate, ll_candidate = evaluate(candidate)
            if ll_candidate >= log_likelihood - tolerance:
                accepted = True
                break
            step /= 2.0

        if not accepted or ll_candidate - log_likelihood <= tolerance:
            # no measurable gain: the likelihood is flat at float precision
            if max_score < SCORE_TOLERANCE * max(n, 1):
                converged = True
                note = (f"stopped at numerical precision at iteration {iteration}: "
                        f"no measurable likelihood change, max|score|={max_score:.3e}")
                break
            if not accepted or ll_candidate < log_likelihood:
                raise ConvergenceError(
                    f"Step-halving failed to increase the likelihood for '{response}' "
                    f"at iteration {iteration}", trace)
        B, P, log_likelihood = candidate, P_candidate, ll_candidate

    if not converged:
        raise ConvergenceError(
            f"Multinomial logit for '{response}' did not converge in {MAX_ITERATIONS} iterations "
            f"(max|score|={max_score:.3e})", trace)

    logger.debug(f"GLM_CORE: multinomial logit for '{response}' converged in {iteration} iterations")
    if note:
        logger.info(f"GLM_CORE: multinomial logit for '{response}' {note}")
    report = ConvergenceReport(iterations=iteration, gradient_norm=max_score,
                               log_likelihood=log_likelihood, converged=True, trace=trace, note=note)
    return GroupMembershipModel(design=bound, response=response, levels=levels, reference=reference,
                                coefficients=T @ B, report=report)


def predict(model: Union[LinearModel, GroupMembershipModel],
            rows: Union[pd.DataFrame, ObservationTable]) -> np.ndarray:
    """Predicted values (LinearModel) or level probabilities (GroupMembershipModel)"""
    if isinstance(model, GroupMembershipModel):
        return model.predict_proba(rows)
    return model.predict(rows)
