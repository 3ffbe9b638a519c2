"""End-to-end orchestration: protocol per dataset, aggregation, sweeps, multiset, LLD ranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import classifiers
from .data_model import DatasetManifest, FeatureMatrix, SyntheticSpec, generate_synthetic
from .evaluation import ProtocolResult, derive_seed, fit_and_evaluate, run_protocol, selection_mode
from .importance import (
    AggregatedScores,
    FeatureMultiset,
    ImportanceTensor,
    SweepResult,
    aggregate,
    build_multiset,
    rank_llds,
    single_model_scores,
    sweep_curve,
    threshold_grid,
)

log = logging.getLogger(__name__)

AGGREGATED = "aggregated"
INDIVIDUAL = "individual"


@dataclass
class DatasetData:
    name: str
    manifest: DatasetManifest
    features: FeatureMatrix
    informative: tuple | None = None

    @classmethod
    def synthetic(cls, spec: SyntheticSpec) -> "DatasetData":
        manifest, features, informative = generate_synthetic(spec)
        return cls(spec.name, manifest, features, informative)


def importance_tensor(results: Sequence[ProtocolResult]) -> ImportanceTensor:
    tensor = ImportanceTensor()
    for res in results:
        for cell in res.cells:
            if cell.ok and cell.importance is not None:
                tensor.add(cell.family, res.dataset, cell.run, res.feature_names, cell.importance)
    return tensor


def retrain_sweep(data: DatasetData, protocol: ProtocolResult, family: str, ordering: AggregatedScores,
                  ordering_kind: str, seed: int, thresholds: Sequence[float] | None = None,
                  retune: bool = True, stop_early: bool = True, grid_preset="full",
                  large_dataset_threshold: int | None = None) -> SweepResult:
    """Retrain `family` on growing top-ranked prefixes of `ordering` until it matches its baseline.

    The performance at each threshold is the mean test UAR over the protocol's
    splits, compared with the mean all-feature UAR of the same cells.
    """
    baseline = protocol.mean_uar(family)
    if baseline is None:
        raise ValueError(f"{data.name}/{family}: no successful baseline cells")
    features = data.features.aligned_to(data.manifest)
    x, y = features.values, data.manifest.labels
    names = np.array(features.feature_names, dtype=object)
    runs = [(plan, protocol.cell(family, plan.run_index)) for plan in protocol.plans]
    runs = [(plan, cell) for plan, cell in runs if cell.ok]

    def evaluate(k: int) -> float:
        cols = ordering.order[:k]
        xk = x[:, cols]
        scores = []
        for plan, cell in runs:
            train, test = plan.masks(data.manifest)
            mode = cell.mode
            if large_dataset_threshold is not None:
                mode = selection_mode(int(train.sum()), large_dataset_threshold)
            res = fit_and_evaluate(
                family, xk, y, train, test, derive_seed(seed, data.name, family, plan.run_index),
                grid_preset=grid_preset, mode=mode, config=None if retune else cell.best_config,
                feature_names=tuple(names[cols]))
            scores.append(res.eval.uar)
        return float(np.mean(scores))

    points, pt = sweep_curve(evaluate, x.shape[1], baseline, thresholds, stop_early=stop_early)
    return SweepResult(family, data.name, ordering_kind, baseline, points, pt)


@dataclass
class RankOutcome:
    aggregated: dict                 # dataset -> AggregatedScores
    individual: dict                 # (family, dataset) -> AggregatedScores
    sweeps: list                     # SweepResult, aggregated and individual orderings
    multiset: FeatureMultiset | None
    ranking: list
    errors: list = field(default_factory=list)

    def sweeps_for(self, ordering_kind: str) -> list[SweepResult]:
        return [s for s in self.sweeps if s.ordering == ordering_kind]


def rank_features(datasets: Sequence[DatasetData], protocols: Sequence[ProtocolResult], tensor: ImportanceTensor,
                  seed: int, thresholds: Sequence[float] | None = None, retune: bool = True,
                  stop_early: bool = True, grid_preset="full", clamp: bool = False,
                  individual: bool = True, run_mode: int | None = None, jobs: int = 1) -> RankOutcome:
    """Aggregate per dataset, sweep every (family, dataset) cell, then build the multiset and LLD ranking.

    Families without importances are swept on the aggregated ordering only.
    The multiset is built from the aggregated-ordering sweeps of the
    importance-bearing families.
    """
    thresholds = threshold_grid() if thresholds is None else list(thresholds)
    by_name = {p.dataset: p for p in protocols}
    aggregated, single = {}, {}
    tasks = []
    for data in datasets:
        protocol = by_name[data.name]
        agg = aggregate(tensor, data.name, run=run_mode)
        aggregated[data.name] = agg
        for family in protocol.families():
            if protocol.mean_uar(family) is None:
                continue
            tasks.append((data, protocol, family, agg, AGGREGATED))
            if individual and family in tensor.models(data.name):
                own = single_model_scores(tensor, data.name, family, run=run_mode)
                single[(family, data.name)] = own
                tasks.append((data, protocol, family, own, INDIVIDUAL))

    def work(task):
        data, protocol, family, ordering, kind = task
        return retrain_sweep(data, protocol, family, ordering, kind, seed, thresholds,
                             retune=retune, stop_early=stop_early, grid_preset=grid_preset)

    if jobs > 1:
        from joblib import Parallel, delayed

        sweeps = Parallel(n_jobs=jobs)(delayed(work)(t) for t in tasks)
    else:
        sweeps = [work(t) for t in tasks]

    multiset_sweeps = [s for s in sweeps if s.ordering == AGGREGATED and s.model in classifiers.IMPORTANCE_FAMILIES]
    errors = []
    try:
        multiset = build_multiset(aggregated, multiset_sweeps, clamp=clamp, clamp_pct=thresholds[-1])
        ranking = rank_llds(multiset)
    except ValueError as exc:
        errors.append(str(exc))
        multiset, ranking = None, []
    return RankOutcome(aggregated, single, sweeps, multiset, ranking, errors)


def run_all(datasets: Sequence[DatasetData], families: Sequence[str], n_runs: int, seed: int,
            grid_preset="full", jobs: int = 1, large_dataset_threshold: int | None = None) -> list[ProtocolResult]:
    kwargs = {} if large_dataset_threshold is None else {"large_dataset_threshold": large_dataset_threshold}
    return [run_protocol(d.manifest, d.features, families, n_runs=n_runs, seed=seed,
                         grid_preset=grid_preset, jobs=jobs, **kwargs) for d in datasets]


def uar_delta_summary(outcome: RankOutcome, threshold_pct: float, families: Sequence[str] | None = None) -> dict:
    """Per dataset and ordering: mean UAR delta at `threshold_pct` and the number of cells at par by it."""
    out: dict = {}
    for s in outcome.sweeps:
        if families is not None and s.model not in families:
            continue
        entry = out.setdefault(s.dataset, {}).setdefault(s.ordering, {"deltas": [], "at_par": 0, "cells": 0})
        p = s.point(threshold_pct)
        if p is not None and p.uar_delta is not None:
            entry["deltas"].append(p.uar_delta)
        entry["cells"] += 1
        entry["at_par"] += int(s.at_par_by(threshold_pct))
    for per in out.values():
        for entry in per.values():
            entry["mean_delta"] = float(np.mean(entry["deltas"])) if entry["deltas"] else None
    return out
