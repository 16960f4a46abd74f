"""
Exception hierarchy for the disparity decomposition toolkit.

Every error carries the process exit code the CLI reports for it:
2 for configuration/input problems, 3 for estimation failures, 4 for positivity violations.
"""

from typing import Any, Dict, List, Optional


class DisparityError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class ConfigurationError(DisparityError, ValueError):
    exit_code = 2


class IngestionError(ConfigurationError):
    """Unparseable cell or undeclared categorical level in an input file"""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class UnsupportedModelError(ConfigurationError):
    pass


class EstimationError(DisparityError, RuntimeError):
    exit_code = 3


class RankDeficiencyError(EstimationError):
    def __init__(self, message: str, dependent_columns: List[str]):
        super().__init__(message)
        self.dependent_columns = list(dependent_columns)


class ConvergenceError(EstimationError):
    def __init__(self, message: str, trace: List[Dict[str, Any]]):
        super().__init__(message)
        self.trace = list(trace)


class SeparationError(EstimationError):
    pass


class PredictionError(EstimationError):
    pass


class InferenceError(EstimationError):
    pass


class PositivityError(EstimationError):
    exit_code = 4

    def __init__(self, message: str, cells: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.cells = list(cells or [])


class SensitivityDomainError(DisparityError, ValueError):
    exit_code = 3


class DegenerateScoreError(SensitivityDomainError):
    pass
