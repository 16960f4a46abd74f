#!/usr/bin/env python3
"""
Result writing utilities

CSV and JSON outputs are written atomically (temp file + rename) and every float is
serialized with 17 significant digits, so reruns can be compared byte for byte.
The run manifest goes to its own file next to the outputs.
"""

import json
import logging
import math
import os
import tempfile
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from utils import __version__
from utils.bootstrap import BootstrapResult, statistic_name
from utils.estimators import DecompositionEstimate

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
MANIFEST_FILE = "manifest.json"
DECOMPOSITION_COLUMNS = [
    "estimator", "group", "tau", "tau_ci_lo", "tau_ci_hi", "zeta", "zeta_ci_lo", "zeta_ci_hi",
    "delta", "delta_ci_lo", "delta_ci_hi", "pct_reduction", "counterfactual_mean", "n_trimmed",
    "n_rows", "n_rows_reference",
]


class RunManifest(BaseModel):
    command: str
    config_path: Optional[str] = None
    data_path: Optional[str] = None
    model_path: Optional[str] = None
    seed: int = 0
    bootstrap_B: Optional[int] = None
    options: Dict[str, Any] = Field(default_factory=dict)
    tool_version: str = __version__
    timestamp: str = ""
    outputs: List[str] = Field(default_factory=list)

    @classmethod
    def create(cls, command: str, **fields: Any) -> "RunManifest":
        """Manifest stamped with SOURCE_DATE_EPOCH when set, the current UTC time otherwise"""
        epoch = os.getenv("SOURCE_DATE_EPOCH")
        moment = (datetime.fromtimestamp(int(epoch), tz=timezone.utc) if epoch
                  else datetime.now(timezone.utc))
        return cls(command=command, timestamp=moment.strftime("%Y-%m-%dT%H:%M:%SZ"), **fields)


def _encode(value: Any, depth: int = 0) -> str:
    pad = "  " * (depth + 1)
    close = "  " * depth
    if value is None or isinstance(value, (bool, np.bool_)):
        return json.dumps(None if value is None else bool(value))
    if isinstance(value, Enum):
        return _encode(value.value, depth)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        number = float(value)
        return format(number, ".17g") if math.isfinite(number) else "null"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, BaseModel):
        return _encode(value.model_dump(), depth)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(str(key), ensure_ascii=False)}: {_encode(item, depth + 1)}"
                 for key, item in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + close + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        if len(value) == 0:
            return "[]"
        items = [f"{pad}{_encode(item, depth + 1)}" for item in value]
        return "[\n" + ",\n".join(items) + "\n" + close + "]"
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def to_json_text(data: Any) -> str:
    """JSON with 17-significant-digit floats; non-finite numbers become null"""
    return _encode(data) + "\n"


def atomic_write_text(path: Union[str, Path], text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile("w", encoding="utf-8", newline="", dir=path.parent,
                                         prefix=f".{path.name}.", delete=False)
    try:
        with handle:
            handle.write(text)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(handle.name, path)
    except BaseException:
        if os.path.exists(handle.name):
            os.unlink(handle.name)
        raise


class ResultWriter:
    """Writes tables and summaries for one run into ``out_dir``"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.written: List[str] = []

    def write_csv(self, frame: pd.DataFrame, filename: str) -> Path:
        path = self.out_dir / filename
        text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, na_rep="NaN", lineterminator="\n")
        atomic_write_text(path, text)
        self.written.append(filename)
        logger.info(f"Results saved to {path}")
        return path

    def write_json(self, data: Any, filename: str) -> Path:
        path = self.out_dir / filename
        atomic_write_text(path, to_json_text(data))
        self.written.append(filename)
        logger.info(f"Results saved to {path}")
        return path

    def write_table(self, frame: pd.DataFrame, stem: str) -> List[Path]:
        """CSV plus a JSON mirror (list of row objects)"""
        records = [{column: _plain(value) for column, value in row.items()}
                   for row in frame.to_dict(orient="records")]
        return [self.write_csv(frame, f"{stem}.csv"), self.write_json(records, f"{stem}.json")]

    def write_manifest(self, manifest: RunManifest) -> Path:
        manifest = manifest.model_copy(update={"outputs": list(self.written)})
        path = self.out_dir / MANIFEST_FILE
        atomic_write_text(path, to_json_text(manifest.model_dump()))
        logger.info(f"Manifest saved to {path}")
        return path


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    return value


def load_json(path: Union[str, Path]) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# Decomposition tables

def decomposition_frame(estimates: Sequence[DecompositionEstimate],
                        bootstrap: Optional[BootstrapResult] = None,
                        level: Optional[float] = None) -> pd.DataFrame:
    """One row per (estimator, group); CI columns are NaN without bootstrap replicates"""
    rows = []
    for estimate in estimates:
        row: Dict[str, Any] = {"estimator": estimate.estimator.value, "group": estimate.group}
        for quantity, value in estimate.quantities().items():
            lower = upper = float("nan")
            name = statistic_name(estimate, quantity)
            if bootstrap is not None and name in bootstrap.replicates:
                lower, upper = bootstrap.interval(name, level)
            row[quantity] = value
            row[f"{quantity}_ci_lo"] = lower
            row[f"{quantity}_ci_hi"] = upper
        row["pct_reduction"] = estimate.pct_reduction
        row["counterfactual_mean"] = (float("nan") if estimate.counterfactual_mean is None
                                      else estimate.counterfactual_mean)
        row["n_trimmed"] = estimate.n_trimmed
        row["n_rows"] = estimate.n_rows
        row["n_rows_reference"] = estimate.n_rows_reference
        rows.append(row)
    return pd.DataFrame(rows, columns=DECOMPOSITION_COLUMNS)


def _cell(value: float, digits: int = 3) -> str:
    return "NA" if value is None or not math.isfinite(value) else f"{value:.{digits}f}"


def _interval(lower: float, upper: float) -> str:
    if not (math.isfinite(lower) and math.isfinite(upper)):
        return ""
    return f"({lower:.3f}, {upper:.3f})"


def print_decomposition_table(frame: pd.DataFrame, reference: str, level: float = 0.95,
                              title: str = "DISPARITY DECOMPOSITION"):
    """Observed disparity, remaining, reduction and % reduction per group, one column per estimator"""
    width = 22
    estimators = list(dict.fromkeys(frame["estimator"]))
    labels = [("Observed disparity", "tau"), ("Disparity remaining", "zeta"),
              ("Disparity reduction", "delta")]

    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    print(f"Reference group: {reference}    Intervals: {level:.0%} percentile bootstrap")
    for group in dict.fromkeys(frame["group"]):
        block = frame[frame["group"] == group].set_index("estimator")
        print(f"\nComparison group: {group}")
        print("-" * 40)
        print(" " * width + "".join(f"{name:>{width + 2}}" for name in estimators))
        for label, quantity in labels:
            values = [_cell(block.loc[name, quantity]) for name in estimators]
            print(f"{label:<{width}}" + "".join(f"{value:>{width + 2}}" for value in values))
            intervals = [_interval(block.loc[name, f"{quantity}_ci_lo"], block.loc[name, f"{quantity}_ci_hi"])
                         for name in estimators]
            if any(intervals):
                print(" " * width + "".join(f"{value:>{width + 2}}" for value in intervals))
        reductions = [_cell(block.loc[name, "pct_reduction"], 1) for name in estimators]
        reductions = [value if value == "NA" else value + "%" for value in reductions]
        print(f"{'% reduction':<{width}}" + "".join(f"{value:>{width + 2}}" for value in reductions))
    print("=" * 60)


def print_sensitivity_summary(summaries: Sequence[Dict[str, Any]], title: str = "SENSITIVITY SUMMARY"):
    """Diagonal crossing points r2_yu = r2_udm = t per comparison group"""
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    names = [("delta_zero", "delta reaches 0"), ("delta_ci", "delta CI covers 0"),
             ("zeta_zero", "zeta reaches 0"), ("zeta_ci", "zeta CI covers 0")]
    for summary in summaries:
        print(f"\nComparison group: {summary.get('group')}  (r2 range [0, {summary.get('r2_max')}])")
        print("-" * 40)
        for key, label in names:
            value = summary.get(key)
            if value is None:
                text = "NA (no bootstrap SE)"
            elif isinstance(value, str):
                text = value
            else:
                text = f"t = {value:.4f}"
            print(f"{label:<22}{text}")
        strongest = summary.get("benchmark", {}) or {}
        if strongest.get("strongest_covariate"):
            print(f"{'strongest covariate':<22}{strongest['strongest_covariate']} "
                  f"(r2_y = {strongest['r2_y']:.4f})")
    print("=" * 60)
