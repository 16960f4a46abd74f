#!/usr/bin/env python3
"""
Ground truth for generated data

- oracle_truth_mc: interventional Monte Carlo. Units of group r keep their covariates,
  unobserved variables and confounders, receive mediators drawn jointly from the reference
  group's law at their covariates, and are pushed through the outcome equation.
- oracle_truth_exact: exact summation of the identification formula over a fully discrete model.
- empirical_bias: estimate without U minus estimate with U as a confounder.
"""

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.analysis_config import AnalysisConfig, Scenario
from utils.errors import ConfigurationError, PositivityError, UnsupportedModelError
from utils.estimators import run_estimator
from utils.structural_model import StructuralModel, generate

logger = logging.getLogger(__name__)

DEFAULT_N_MC = 1_000_000
DEFAULT_BATCH = 100_000
MAX_ENUMERATION = 5_000_000
ALL_CELLS = "__all__"


class OracleMethod(str, Enum):
    MC_INTERVENTIONAL = "MC_INTERVENTIONAL"
    EXACT_SUM = "EXACT_SUM"


@dataclass(frozen=True)
class OracleResult:
    group: str
    method: OracleMethod
    tau: float
    delta: float
    zeta: float
    tau_se: float = 0.0
    delta_se: float = 0.0
    zeta_se: float = 0.0
    comparison_mean: Optional[float] = None
    counterfactual_mean: Optional[float] = None
    reference_mean: Optional[float] = None
    n_mc: Optional[int] = None

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["method"] = self.method.value
        data["se"] = {"tau": data.pop("tau_se"), "delta": data.pop("delta_se"),
                      "zeta": data.pop("zeta_se")}
        return data


def _reference_result(model: StructuralModel, method: OracleMethod) -> OracleResult:
    return OracleResult(group=model.reference, method=method, tau=0.0, delta=0.0, zeta=0.0)


def _check_group(model: StructuralModel, r: str):
    if r not in model.levels(model.group):
        raise ConfigurationError(f"'{r}' is not a level of group variable '{model.group}'")


# Monte Carlo

class _Moments:
    """Running sums for a mean and its standard error"""

    def __init__(self):
        self.n = 0
        self.total = 0.0
        self.squares = 0.0

    def add(self, values: np.ndarray):
        self.n += values.size
        self.total += float(np.sum(values))
        self.squares += float(np.sum(values * values))

    @property
    def mean(self) -> float:
        return self.total / self.n

    @property
    def standard_error(self) -> float:
        if self.n < 2:
            return float("nan")
        variance = max(self.squares - self.n * self.mean ** 2, 0.0) / (self.n - 1)
        return float(np.sqrt(variance / self.n))


def oracle_truth_mc(model: StructuralModel, r: str, n_mc: int = DEFAULT_N_MC, seed: int = 0,
                    batch_size: int = DEFAULT_BATCH) -> OracleResult:
    """
    Interventional truth for comparison group r, standardized to the covariate law.

    Batches run on streams spawned from ``seed``; the comparison, reference and counterfactual
    worlds of a batch share their noise, so the differences have paired standard errors.
    In the interposed scenario the post-mediator confounders are regenerated downstream of
    the drawn mediators.
    """
    _check_group(model, r)
    if n_mc < 2:
        raise ConfigurationError(f"n_mc must be at least 2, got {n_mc}")
    if r == model.reference:
        return _reference_result(model, OracleMethod.MC_INTERVENTIONAL)

    group = model.group
    reference_code = model.levels(group).index(model.reference)
    kept = model.unobserved + model.confounders_pre
    if model.scenario == Scenario.JOINT_MEDIATORS:
        kept += model.confounders_post

    sizes = [batch_size] * (n_mc // batch_size)
    if n_mc % batch_size:
        sizes.append(n_mc % batch_size)
    streams = np.random.SeedSequence(seed).spawn(len(sizes))

    moments = {name: _Moments() for name in ("comparison", "counterfactual", "reference",
                                             "tau", "delta", "zeta")}
    logger.info(f"ORACLE: Monte Carlo truth for group {r}, n_mc={n_mc} in {len(sizes)} batch(es)")
    for size, stream in zip(sizes, streams):
        world_seed, draw_seed = stream.spawn(2)
        world_r = model.simulate(size, np.random.default_rng(world_seed), do={group: r})

        reference_probability = model.probabilities(group, world_r, size)[:, reference_code]
        empty = reference_probability <= 0
        if empty.any():
            cell = {name: model.levels(name)[world_r[name][np.flatnonzero(empty)[0]]]
                    for name in model.covariates if model.is_discrete(name)}
            raise PositivityError(f"P({group}={model.reference} | c) = 0 at covariates {cell}",
                                  cells=[cell])

        world_ref = model.simulate(size, np.random.default_rng(world_seed), do={group: model.reference})
        world_draw = model.simulate(size, np.random.default_rng(draw_seed), do={group: model.reference},
                                    fixed={name: world_r[name] for name in model.covariates})
        fixed = {name: world_r[name] for name in model.covariates + kept}
        fixed.update({name: world_draw[name] for name in model.mediators})
        world_cf = model.simulate(size, np.random.default_rng(world_seed), do={group: r}, fixed=fixed)

        y_r = world_r[model.outcome]
        y_ref = world_ref[model.outcome]
        y_cf = world_cf[model.outcome]
        moments["comparison"].add(y_r)
        moments["counterfactual"].add(y_cf)
        moments["reference"].add(y_ref)
        moments["tau"].add(y_r - y_ref)
        moments["delta"].add(y_r - y_cf)
        moments["zeta"].add(y_cf - y_ref)

    result = OracleResult(
        group=r, method=OracleMethod.MC_INTERVENTIONAL,
        tau=moments["tau"].mean, delta=moments["delta"].mean, zeta=moments["zeta"].mean,
        tau_se=moments["tau"].standard_error, delta_se=moments["delta"].standard_error,
        zeta_se=moments["zeta"].standard_error,
        comparison_mean=moments["comparison"].mean, counterfactual_mean=moments["counterfactual"].mean,
        reference_mean=moments["reference"].mean, n_mc=n_mc)
    logger.info(f"✅ ORACLE: group {r} tau={result.tau:.6g} delta={result.delta:.6g} "
                f"(se {result.delta_se:.2g}) zeta={result.zeta:.6g}")
    return result


# Exact summation

def joint_law(model: StructuralModel) -> pd.DataFrame:
    """
    Every configuration of the non-outcome variables with its probability ``p`` and the
    conditional outcome mean ``ey``. Values are labels.
    """
    if not model.is_fully_discrete:
        continuous = [name for name in model.variables if name != model.outcome and not model.is_discrete(name)]
        raise UnsupportedModelError(f"Exact summation needs discrete variables; continuous: {continuous}")
    names = [name for name in model.order if name != model.outcome]
    size = int(np.prod([len(model.levels(name)) for name in names], dtype=np.int64))
    if size > MAX_ENUMERATION:
        raise UnsupportedModelError(f"Joint support has {size} configurations (limit {MAX_ENUMERATION})")

    grid = model.value_grid(names)
    p = np.ones(size)
    for name in names:
        p *= model.probabilities(name, grid, size)[np.arange(size), grid[name]]
    frame = pd.DataFrame({name: np.array(model.levels(name), dtype=object)[grid[name]] for name in names})
    frame["p"] = p
    frame["ey"] = model.mean(model.outcome, grid, size)
    return frame


def _conditional(law: pd.DataFrame, target: List[str], given: List[str], name: str) -> pd.DataFrame:
    """P(target | given) on the configurations where the conditioning event has mass"""
    joint = law.groupby(given + target, sort=True)["p"].sum().rename("joint").reset_index()
    margin = law.groupby(given, sort=True)["p"].sum().rename("margin").reset_index()
    merged = joint.merge(margin, on=given)
    merged = merged[merged["margin"] > 0]
    merged[name] = merged["joint"] / merged["margin"]
    return merged[given + target + [name]]


def _regression(law: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    """E[Y | keys] on the configurations with positive mass"""
    cells = law.groupby(keys, sort=True)[["p", "eyp"]].sum().reset_index()
    cells = cells[cells["p"] > 0]
    cells["mu"] = cells["eyp"] / cells["p"]
    return cells[keys + ["mu"]]


def _require_support(terms: pd.DataFrame, weight: pd.Series, column: str, what: str):
    missing = (weight > 0) & terms[column].isna()
    if missing.any():
        example = terms.loc[missing].iloc[0].to_dict()
        raise PositivityError(f"{what} is undefined at a configuration with positive weight: {example}",
                              cells=[{key: value for key, value in example.items() if isinstance(value, str)}])


def _standardized_mean(law_g: pd.DataFrame, p_c: pd.DataFrame, cells: List[str], what: str) -> float:
    means = _regression(law_g, cells)
    terms = p_c.merge(means, on=cells, how="left")
    _require_support(terms, terms["p_c"], "mu", what)
    terms = terms[terms["p_c"] > 0]
    return float(np.sum(terms["p_c"] * terms["mu"]))


def _counterfactual_mean(law_r: pd.DataFrame, law_0: pd.DataFrame, p_c: pd.DataFrame,
                         cells: List[str], model: StructuralModel, scenario: Scenario) -> float:
    mediators = model.mediators
    p_dm = _conditional(law_0, mediators, cells, "p_dm")
    if scenario == Scenario.JOINT_MEDIATORS:
        confounders = model.confounders
        p_x = _conditional(law_r, confounders, cells, "p_x")
        terms = p_c.merge(p_x, on=cells).merge(p_dm, on=cells)
        weight = terms["p_c"] * terms["p_x"] * terms["p_dm"]
    else:
        pre, post = model.confounders_pre, model.confounders_post
        after = [name for name in model.interposed_after if name in mediators]
        p_x1 = _conditional(law_r, pre, cells, "p_x1")
        p_x2 = _conditional(law_r, post, cells + pre + after, "p_x2")
        terms = p_c.merge(p_x1, on=cells).merge(p_dm, on=cells)
        partial = terms["p_c"] * terms["p_x1"] * terms["p_dm"]
        terms = terms[partial > 0].merge(p_x2, on=cells + pre + after, how="left")
        _require_support(terms, terms["p_c"], "p_x2", "P(x2 | r, x1, d, c)")
        weight = terms["p_c"] * terms["p_x1"] * terms["p_dm"] * terms["p_x2"]
        confounders = pre + post

    mu = _regression(law_r, cells + confounders + mediators)
    terms = terms.assign(weight=weight.to_numpy()).merge(mu, on=cells + confounders + mediators, how="left")
    _require_support(terms, terms["weight"], "mu", "E[Y | r, x, d, m, c]")
    terms = terms[terms["weight"] > 0]
    return float(np.sum(terms["weight"] * terms["mu"]))


def oracle_truth_exact(model: StructuralModel, r: str,
                       scenario: Optional[Scenario] = None) -> OracleResult:
    """
    Identification formula evaluated by exact summation over the model's joint law.

    Unobserved variables are summed out first, so the formula sees what the data would show.
    ``scenario`` defaults to the model's own ordering.
    """
    _check_group(model, r)
    scenario = scenario or model.scenario
    law = joint_law(model)
    if r == model.reference:
        return _reference_result(model, OracleMethod.EXACT_SUM)

    observed = [name for name in model.order if name != model.outcome and name not in model.unobserved]
    law = law.assign(eyp=law["p"] * law["ey"])
    law = law.groupby(observed, sort=True)[["p", "eyp"]].sum().reset_index()
    law[ALL_CELLS] = ALL_CELLS
    cells = [ALL_CELLS] + model.covariates

    p_c = law.groupby(cells, sort=True)["p"].sum().rename("p_c").reset_index()
    law_r = law[law[model.group] == r]
    law_0 = law[law[model.group] == model.reference]

    comparison = _standardized_mean(law_r, p_c, cells, f"E[Y | {model.group}={r}, c]")
    reference = _standardized_mean(law_0, p_c, cells, f"E[Y | {model.group}={model.reference}, c]")
    counterfactual = _counterfactual_mean(law_r, law_0, p_c, cells, model, scenario)

    delta = comparison - counterfactual
    zeta = counterfactual - reference
    return OracleResult(group=r, method=OracleMethod.EXACT_SUM, tau=delta + zeta, delta=delta, zeta=zeta,
                        comparison_mean=comparison, counterfactual_mean=counterfactual,
                        reference_mean=reference)


def oracle_truth(model: StructuralModel, method: OracleMethod = OracleMethod.EXACT_SUM,
                 groups: Optional[Sequence[str]] = None, n_mc: int = DEFAULT_N_MC,
                 seed: int = 0) -> List[OracleResult]:
    """Oracle results for several comparison groups (default: every non-reference level)"""
    groups = list(groups) if groups is not None else [
        level for level in model.levels(model.group) if level != model.reference]
    if method == OracleMethod.EXACT_SUM:
        return [oracle_truth_exact(model, r) for r in groups]
    streams = np.random.SeedSequence(seed).generate_state(len(groups))
    return [oracle_truth_mc(model, r, n_mc=n_mc, seed=int(stream)) for r, stream in zip(groups, streams)]


# Omitted-confounder bias

@dataclass(frozen=True)
class EmpiricalBias:
    group: str
    delta: float
    zeta: float
    delta_without_u: float
    delta_with_u: float


def empirical_bias(model: StructuralModel, config: Optional[AnalysisConfig] = None, n: int = 100_000,
                   seed: int = 0, estimator: Optional[str] = None,
                   interactions_with_u: Sequence[Tuple[str, str]] = ()) -> Dict[str, EmpiricalBias]:
    """
    Estimate with U omitted minus estimate with U added to the pre-mediator confounders,
    on one generated data set with U exposed.

    Args:
        interactions_with_u: extra outcome-model interactions used only in the run with U
    """
    if not model.unobserved:
        raise ConfigurationError(f"Model '{model.spec.name}' has no unobserved variable")
    config = config or model.analysis_config()
    if estimator is None:
        estimator = "interposed" if config.scenario == Scenario.INTERPOSED_CONFOUNDER else "weighting"

    table = generate(model, n, seed, expose_unobserved=True)
    columns = {name: spec.model_dump() for name, spec in config.columns.items()}
    columns.update({name: spec.model_dump() for name, spec in
                    model.column_specs(expose_unobserved=True).items() if name in model.unobserved})
    with_u = config.updated(
        columns=columns,
        confounders_pre=list(config.confounders_pre) + model.unobserved,
        outcome_interactions=[list(pair) for pair in config.outcome_interactions]
        + [list(pair) for pair in interactions_with_u])

    without = {e.group: e for e in run_estimator(estimator, config, table, seed)}
    adjusted = {e.group: e for e in run_estimator(estimator, with_u, table, seed)}
    biases = {}
    for group, estimate in without.items():
        other = adjusted[group]
        biases[group] = EmpiricalBias(group=group, delta=estimate.delta - other.delta,
                                      zeta=estimate.zeta - other.zeta,
                                      delta_without_u=estimate.delta, delta_with_u=other.delta)
        logger.info(f"ORACLE: empirical bias for group {group}: delta {biases[group].delta:.6g}")
    return biases
