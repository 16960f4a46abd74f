#!/usr/bin/env python3
"""
Nonparametric bootstrap for the decomposition quantities.

Rows are resampled with replacement (within group levels by default) and the whole
pipeline, model fits included, is re-run per replicate. Replicate b draws from its own
stream spawned from the master seed, so results do not depend on the number of workers.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.analysis_config import AnalysisConfig
from utils.data_table import ObservationTable
from utils.errors import ConfigurationError, DisparityError, InferenceError
from utils.estimators import DecompositionEstimate, run_estimator

logger = logging.getLogger(__name__)

DEFAULT_REPLICATES = 1000
MAX_FAILURE_RATE = 0.05

Pipeline = Callable[[ObservationTable], Dict[str, float]]


@dataclass
class BootstrapResult:
    B: int
    seed: int
    level: float
    stratified: bool
    replicates: Dict[str, np.ndarray]
    failures: List[Tuple[int, str]] = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    @property
    def n_success(self) -> int:
        return self.B - self.n_failed

    @property
    def names(self) -> List[str]:
        return list(self.replicates)

    def interval(self, name: str, level: Optional[float] = None) -> Tuple[float, float]:
        """Percentile interval: quantiles at (1-level)/2 and 1-(1-level)/2"""
        level = self.level if level is None else level
        _check_level(level)
        alpha = (1.0 - level) / 2.0
        lower, upper = np.quantile(self.replicates[name], [alpha, 1.0 - alpha])
        return float(lower), float(upper)

    def standard_error(self, name: str) -> float:
        return float(np.std(self.replicates[name], ddof=1))

    def intervals(self) -> Dict[str, Tuple[float, float]]:
        return {name: self.interval(name) for name in self.replicates}


def _check_level(level: float):
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"Confidence level must be in (0, 1), got {level}")


def resample_indices(rng: np.random.Generator, n_rows: int,
                     strata: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Row positions of one replicate; with strata, each stratum keeps its size"""
    if strata is None:
        return rng.integers(0, n_rows, size=n_rows)
    return np.concatenate([
        rows[rng.integers(0, rows.size, size=rows.size)] for rows in strata if rows.size
    ])


def bootstrap(pipeline: Pipeline, table: ObservationTable, B: int = DEFAULT_REPLICATES, seed: int = 0,
              level: float = 0.95, strata: Optional[str] = None, n_jobs: int = 1) -> BootstrapResult:
    """
    Args:
        pipeline: closure mapping a table to named statistics
        table: original data
        B: replicate count (>= 2)
        seed: master seed
        level: coverage of the percentile intervals
        strata: categorical column to stratify on (None for plain row resampling)
        n_jobs: worker threads

    Raises:
        InferenceError: more than 5% of the replicates failed
    """
    if B < 2:
        raise ConfigurationError(f"Bootstrap needs B >= 2, got {B}")
    _check_level(level)

    strata_rows = None
    if strata is not None:
        codes = table.codes(strata)
        strata_rows = [np.flatnonzero(codes == k) for k in range(len(table.levels(strata)))]
    streams = np.random.SeedSequence(seed).spawn(B)

    def run_replicate(b: int):
        rng = np.random.default_rng(streams[b])
        resampled = table.take(resample_indices(rng, table.n_rows, strata_rows))
        try:
            return b, pipeline(resampled), None
        except (DisparityError, np.linalg.LinAlgError, FloatingPointError) as e:
            return b, None, f"{type(e).__name__}: {e}"

    logger.info(f"=== Bootstrap: B={B}, {'stratified by ' + strata if strata else 'unstratified'}, "
                f"{n_jobs} worker(s) ===")
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as executor:
            outcomes = list(executor.map(run_replicate, range(B)))
    else:
        outcomes = [run_replicate(b) for b in range(B)]

    failures = [(b, message) for b, stats, message in outcomes if stats is None]
    successes = [stats for _, stats, _ in outcomes if stats is not None]
    for b, message in failures:
        logger.warning(f"⚠️ Bootstrap replicate {b} failed: {message}")
    if len(failures) > MAX_FAILURE_RATE * B or not successes:
        raise InferenceError(
            f"{len(failures)} of {B} bootstrap replicates failed (limit {MAX_FAILURE_RATE:.0%})")

    names = list(successes[0])
    replicates = {name: np.array([stats[name] for stats in successes], dtype=float) for name in names}
    logger.info(f"✅ Bootstrap finished: {len(successes)} replicates, {len(failures)} failed")
    return BootstrapResult(B=B, seed=seed, level=level, stratified=strata is not None,
                           replicates=replicates, failures=failures)


def statistic_name(estimate: DecompositionEstimate, quantity: str) -> str:
    return f"{estimate.estimator.value}:{estimate.group}:{quantity}"


def flatten_estimates(estimates: Sequence[DecompositionEstimate]) -> Dict[str, float]:
    return {statistic_name(estimate, quantity): value
            for estimate in estimates for quantity, value in estimate.quantities().items()}


def decomposition_closure(config: AnalysisConfig, estimators: Sequence[str], seed: int = 0) -> Pipeline:
    """Pipeline re-running the named estimators on a resampled table"""
    def pipeline(table: ObservationTable) -> Dict[str, float]:
        statistics: Dict[str, float] = {}
        for name in estimators:
            statistics.update(flatten_estimates(run_estimator(name, config, table, seed)))
        return statistics
    return pipeline
