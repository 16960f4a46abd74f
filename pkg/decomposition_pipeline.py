#!/usr/bin/env python3
"""
Disparity Decomposition Pipeline

## 개요 (Abstract)
이 모듈은 집단 간 결과 격차(disparity)를 인과적으로 분해하는 분석 파이프라인입니다.
관찰된 격차 τ를 매개변수(mediator) 분포를 기준 집단과 같게 만들었을 때 줄어드는 부분 δ
(disparity reduction)와 남는 부분 ζ (disparity remaining)로 나누어 추정합니다.

### 주요 기능:
- **데이터 적재 및 검증**: CSV 데이터를 분석 설정과 대조하고 양성(positivity) 조건 진단
- **분해 추정**: 가중치(weighting), 차등 효과(differential), 회귀(regression), 개입 교란(interposed) 추정량
- **부트스트랩 추론**: 집단별 층화 재표본으로 백분위 신뢰구간과 표준오차 계산
- **민감도 분석**: 관측되지 않은 교란 U에 대한 부분 R² 격자, 영점/신뢰구간 교차 곡선, 공변량 벤치마크
- **결과 저장**: 17자리 유효숫자의 CSV/JSON 및 실행 매니페스트를 원자적으로 기록

### 데이터 플로우:
1. **CSV + 설정 파일** → 검증된 관측 테이블
2. **추정량** → τ, δ, ζ 점추정
3. **부트스트랩 / 민감도 분석** → 신뢰구간, 민감도 격자
4. **출력 디렉터리** → 분해표, 격자, 벤치마크, 매니페스트

Pipeline: config + CSV → validation → estimators → bootstrap → sensitivity → output files
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from utils.analysis_config import AnalysisConfig, Scenario, ValidatedBinding, load_analysis_config, validate_config
from utils.bootstrap import BootstrapResult, bootstrap, decomposition_closure, statistic_name
from utils.data_table import ObservationTable, load_table
from utils.errors import ConfigurationError, DisparityError
from utils.estimators import DecompositionEstimate, EstimatorTag, run_estimator
from utils.result_writer import ResultWriter, decomposition_frame
from utils.sensitivity import (DEFAULT_R2_MAX, DEFAULT_RESOLUTION, DEFAULT_VALUE_CONTOURS, BenchmarkReport,
                               SensitivityGrid, benchmark_covariates, benchmark_summary,
                               prepare_sensitivity_inputs, sensitivity_grid)

logger = logging.getLogger(__name__)

ESTIMATOR_CHOICES = ("weighting", "regression", "interposed", "all")


def resolve_estimators(config: AnalysisConfig, estimator: str = "weighting",
                       differential: bool = False) -> List[str]:
    """
    Estimator names for run_estimator().

    "all" runs weighting, differential (when terms are declared or requested) and regression
    for the joint ordering, and the interposed estimator for the interposed ordering.
    """
    if estimator not in ESTIMATOR_CHOICES:
        raise ConfigurationError(f"Unknown estimator '{estimator}'; choose from {ESTIMATOR_CHOICES}")
    interposed = config.scenario == Scenario.INTERPOSED_CONFOUNDER
    wants_differential = differential or bool(config.differential_effect_terms)
    if estimator == "interposed" or (interposed and estimator in ("weighting", "all")):
        return ["interposed"]
    if estimator == "regression":
        return ["regression"]
    names = ["weighting"]
    if wants_differential:
        names.append("differential")
    if estimator == "all":
        names.append("regression")
    return names


class DisparityDecompositionPipeline:
    """Decomposition run over one config and one data table"""

    def __init__(self, config: AnalysisConfig, table: Optional[ObservationTable] = None,
                 seed: int = 0, n_jobs: int = 1):
        self.config = config
        self.table = table
        self.seed = seed
        self.n_jobs = n_jobs
        self.binding: Optional[ValidatedBinding] = None
        self.estimator_names: List[str] = []
        self.estimates: List[DecompositionEstimate] = []
        self.bootstrap_result: Optional[BootstrapResult] = None
        self.grids: Dict[str, SensitivityGrid] = {}
        self.benchmarks: Optional[BenchmarkReport] = None
        self.sensitivity_summaries: List[Dict[str, Any]] = []
        self.warnings: List[str] = []
        self.estimates_written = 0
        self.failed_replicates = 0

    @classmethod
    def from_files(cls, config_path: str, data_path: str, **kwargs) -> "DisparityDecompositionPipeline":
        config = load_analysis_config(config_path)
        pipeline = cls(config, **kwargs)
        pipeline.load_data(data_path)
        return pipeline

    def load_data(self, data_path: str) -> ObservationTable:
        logger.info("=== Loading Data ===")
        self.table = load_table(data_path, self.config.table_schema())
        if self.table.dropped_rows:
            self.warnings.append(f"{self.table.dropped_rows} rows dropped for missing values")
        return self.table

    def validate(self, strict: bool = False) -> ValidatedBinding:
        logger.info("=== Validating Config Against Data ===")
        if self.table is None:
            raise ConfigurationError("No data loaded")
        self.binding = validate_config(self.config, self.table, strict=strict)
        for diagnostic in self.binding.diagnostics:
            self.warnings.append(f"positivity: {diagnostic.reason} (group {diagnostic.group}, "
                                 f"cell {diagnostic.cell}, n={diagnostic.count})")
        logger.info(f"✅ Validation finished with {len(self.binding.diagnostics)} diagnostic(s)")
        return self.binding

    def apply_options(self, trim_pct: Optional[float] = None):
        if trim_pct is not None:
            self.config = self.config.updated(weight_trim=trim_pct)

    def run_estimators(self, estimator: str = "weighting", differential: bool = False) -> List[DecompositionEstimate]:
        logger.info("=== Running Estimators ===")
        names = resolve_estimators(self.config, estimator, differential)
        self.estimates = []
        self.estimator_names = []
        for name in names:
            try:
                estimates = run_estimator(name, self.config, self.table, self.seed)
            except ConfigurationError as e:
                if estimator == "all" and name == "regression":
                    message = f"regression estimator skipped: {e}"
                    logger.warning(f"⚠️ {message}")
                    self.warnings.append(message)
                    continue
                raise
            self.estimates.extend(estimates)
            self.estimator_names.append(name)
            for estimate in estimates:
                logger.info(f"✅ {estimate.estimator.value} group {estimate.group}: tau={estimate.tau:.4f} "
                            f"delta={estimate.delta:.4f} zeta={estimate.zeta:.4f}")
        return self.estimates

    def run_bootstrap(self, B: int, level: float = 0.95, stratified: bool = True) -> Optional[BootstrapResult]:
        if B <= 0:
            logger.info("Bootstrap disabled (B = 0); intervals are not reported")
            return None
        logger.info("=== Running Bootstrap ===")
        closure = decomposition_closure(self.config, self.estimator_names, self.seed)
        strata = self.config.group.column if stratified else None
        self.bootstrap_result = bootstrap(closure, self.table, B=B, seed=self.seed, level=level,
                                          strata=strata, n_jobs=self.n_jobs)
        self.failed_replicates = self.bootstrap_result.n_failed
        if self.failed_replicates:
            self.warnings.append(f"{self.failed_replicates} of {B} bootstrap replicates failed")
        return self.bootstrap_result

    def _standard_error(self, estimate: DecompositionEstimate, quantity: str) -> Optional[float]:
        if self.bootstrap_result is None:
            return None
        name = statistic_name(estimate, quantity)
        if name not in self.bootstrap_result.replicates:
            return None
        return self.bootstrap_result.standard_error(name)

    def run_sensitivity(self, r2_max: float = DEFAULT_R2_MAX, grid_n: int = DEFAULT_RESOLUTION,
                        value_contours: Sequence[float] = DEFAULT_VALUE_CONTOURS,
                        mediator_weights: Optional[Dict[str, float]] = None) -> Dict[str, SensitivityGrid]:
        """Grid per comparison group for the first weighting-type estimator"""
        logger.info("=== Running Sensitivity Analysis ===")
        primary = [e for e in self.estimates if e.estimator != EstimatorTag.REGRESSION
                   and e.group != self.config.reference_level]
        if not primary:
            primary = [e for e in self.estimates if e.group != self.config.reference_level]
        if not primary:
            raise ConfigurationError("Sensitivity analysis needs a decomposition for a comparison group")
        tag = primary[0].estimator
        primary = [e for e in primary if e.estimator == tag]

        self.benchmarks = benchmark_covariates(self.table, self.config, mediator_weights)
        self.warnings.extend(self.benchmarks.notes)
        for estimate in primary:
            inputs = prepare_sensitivity_inputs(
                self.table, self.config, estimate,
                delta_se=self._standard_error(estimate, "delta"),
                zeta_se=self._standard_error(estimate, "zeta"),
                mediator_weights=mediator_weights)
            grid = sensitivity_grid(inputs, resolution=grid_n, r2_max=r2_max, value_contours=value_contours)
            grid.benchmarks = list(self.benchmarks.points)
            self.grids[estimate.group] = grid
            summary = grid.summary()
            summary["estimator"] = tag.value
            summary["benchmark"] = benchmark_summary(self.benchmarks, inputs)
            self.sensitivity_summaries.append(summary)
            logger.info(f"✅ Sensitivity grid for group {estimate.group}: "
                        f"delta zero crossing t = {summary['delta_zero']}")
        return self.grids

    # Outputs

    def decomposition_table(self, level: Optional[float] = None) -> pd.DataFrame:
        return decomposition_frame(self.estimates, self.bootstrap_result, level)

    def write_decomposition(self, writer: ResultWriter, level: Optional[float] = None):
        frame = self.decomposition_table(level)
        writer.write_table(frame, "decomposition")
        self.estimates_written = len(frame)
        if self.bootstrap_result is not None:
            replicates = pd.DataFrame(self.bootstrap_result.replicates)
            writer.write_csv(replicates, "bootstrap_replicates.csv")
        return frame

    def write_sensitivity(self, writer: ResultWriter):
        frames, contours = [], []
        for group, grid in self.grids.items():
            frame = grid.to_frame()
            frame.insert(0, "group", group)
            frames.append(frame)
            for name, points in grid.contours.items():
                contours.extend({"group": group, "contour": name, "r2_yu": yu, "r2_udm": udm}
                                for yu, udm in points)
        if frames:
            writer.write_table(pd.concat(frames, ignore_index=True), "sensitivity_grid")
        writer.write_table(pd.DataFrame(contours, columns=["group", "contour", "r2_yu", "r2_udm"]),
                           "sensitivity_contours")
        if self.benchmarks is not None:
            writer.write_table(self.benchmarks.to_frame(), "benchmarks")
        writer.write_json({"groups": self.sensitivity_summaries, "warnings": self.warnings},
                          "sensitivity_summary.json")

    def get_summary(self) -> Dict[str, Any]:
        return {
            "estimators": list(self.estimator_names),
            "estimates": len(self.estimates),
            "estimates_written": self.estimates_written,
            "bootstrap_B": self.bootstrap_result.B if self.bootstrap_result else 0,
            "failed_replicates": self.failed_replicates,
            "sensitivity_groups": list(self.grids),
            "warnings": len(self.warnings),
        }


def main():
    """Run the weighting decomposition for DISPARITY_CONFIG / DISPARITY_DATA"""
    logging.basicConfig(
        level=os.getenv("DISPARITY_LOG_LEVEL", "INFO"),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        from dotenv import load_dotenv
        load_dotenv()
        logger.info("Loaded environment variables from .env file")
    except ImportError:
        logger.info("python-dotenv not available, using system environment variables")

    missing_vars = [var for var in ("DISPARITY_CONFIG", "DISPARITY_DATA") if not os.getenv(var)]
    if missing_vars:
        logger.error(f"Missing required environment variables: {missing_vars}")
        raise SystemExit(2)

    try:
        pipeline = DisparityDecompositionPipeline.from_files(
            os.getenv("DISPARITY_CONFIG"), os.getenv("DISPARITY_DATA"),
            seed=int(os.getenv("DISPARITY_SEED", "0")), n_jobs=int(os.getenv("DISPARITY_N_JOBS", "1")))
        pipeline.validate()
        pipeline.run_estimators("all")
        pipeline.run_bootstrap(int(os.getenv("DISPARITY_BOOTSTRAP_B", "1000")))
        writer = ResultWriter(Path(os.getenv("DISPARITY_OUT_DIR", "outputs")))
        pipeline.write_decomposition(writer)
    except DisparityError as e:
        logger.error(f"❌ Disparity decomposition pipeline failed: {e}")
        raise SystemExit(e.exit_code)

    summary = pipeline.get_summary()
    logger.info("=== Processing Summary ===")
    logger.info(f"Estimators: {summary['estimators']}")
    logger.info(f"Rows written: {summary['estimates_written']}")
    logger.info(f"Failed replicates: {summary['failed_replicates']}")
    logger.info(f"Warnings: {summary['warnings']}")
    logger.info("🎉 Disparity decomposition pipeline completed successfully!")


if __name__ == "__main__":
    main()
