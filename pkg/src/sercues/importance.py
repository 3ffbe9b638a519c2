"""Cross-model importance aggregation, top-k retraining sweeps and LLD ranking."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .audio_features import LLD_NAMES, FeatureName

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 20.0, 0.5)


class AggregationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# importance tensor
# ---------------------------------------------------------------------------

@dataclass
class ImportanceTensor:
    """Raw importances keyed by (model, dataset, run)."""

    scores: dict = field(default_factory=dict)
    feature_names: dict = field(default_factory=dict)   # dataset -> tuple of names

    def add(self, model: str, dataset: str, run: int, names: Sequence[str], values) -> None:
        values = np.asarray(values, dtype=np.float64)
        names = tuple(names)
        if values.shape != (len(names),):
            raise ValueError("importance vector length differs from feature names")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError(f"{model}/{dataset}/{run}: importances must be finite and non-negative")
        known = self.feature_names.setdefault(dataset, names)
        if known != names:
            raise ValueError(f"{dataset}: feature names differ between models")
        self.scores[(model, dataset, int(run))] = values

    def __len__(self) -> int:
        return len(self.scores)

    def models(self, dataset: str | None = None) -> list[str]:
        return list(dict.fromkeys(m for (m, d, _) in self.scores if dataset is None or d == dataset))

    def datasets(self) -> list[str]:
        return list(dict.fromkeys(d for (_, d, _) in self.scores))

    def runs(self, model: str, dataset: str) -> list[int]:
        return sorted(r for (m, d, r) in self.scores if m == model and d == dataset)

    def model_vector(self, model: str, dataset: str, run: int | None = None) -> np.ndarray:
        """Run-averaged importance (or a single run's)."""
        if run is not None:
            return self.scores[(model, dataset, run)]
        runs = self.runs(model, dataset)
        if not runs:
            raise KeyError((model, dataset))
        return np.mean([self.scores[(model, dataset, r)] for r in runs], axis=0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "dataset", "run", "feature_name", "score"])
            for (m, d, r), vec in self.scores.items():
                for name, v in zip(self.feature_names[d], vec):
                    w.writerow([m, d, r, name, repr(float(v))])

    @classmethod
    def read_csv(cls, path) -> "ImportanceTensor":
        grouped: dict = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["model", "dataset", "run", "feature_name", "score"]:
                raise ValueError(f"{path}: unexpected importance CSV header")
            for row in reader:
                key = (row["model"], row["dataset"], int(row["run"]))
                names, vals = grouped.setdefault(key, ([], []))
                names.append(row["feature_name"])
                vals.append(float(row["score"]))
        tensor = cls()
        for (m, d, r), (names, vals) in grouped.items():
            tensor.add(m, d, r, names, vals)
        return tensor


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def descending_order(scores) -> np.ndarray:
    """Feature indices by descending score; equal scores keep ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


@dataclass(frozen=True)
class AggregatedScores:
    dataset: str
    feature_names: tuple
    scores: np.ndarray
    order: np.ndarray
    models: tuple
    excluded: tuple = ()

    def top(self, k: int) -> list[str]:
        return [self.feature_names[i] for i in self.order[:k]]


def aggregate_vectors(vectors: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    """Median across models of each max-normalized vector.

    Returns the aggregate and the indices of all-zero vectors that were dropped.
    """
    kept, dropped = [], []
    for i, v in enumerate(vectors):
        v = np.asarray(v, dtype=np.float64)
        peak = np.max(v) if v.size else 0.0
        if peak > 0:
            kept.append(v / peak)
        else:
            dropped.append(i)
    if not kept:
        raise AggregationError("every model has all-zero importances")
    return np.median(np.vstack(kept), axis=0), dropped


def aggregate(tensor: ImportanceTensor, dataset: str, run: int | None = None,
              models: Sequence[str] | None = None) -> AggregatedScores:
    models = list(models) if models is not None else tensor.models(dataset)
    if not models:
        raise AggregationError(f"no importances for dataset {dataset!r}")
    vectors = [tensor.model_vector(m, dataset, run) for m in models]
    scores, dropped = aggregate_vectors(vectors)
    for i in dropped:
        warnings.warn(f"{dataset}: model {models[i]} has all-zero importances and is excluded")
    kept = tuple(m for i, m in enumerate(models) if i not in dropped)
    return AggregatedScores(dataset, tensor.feature_names[dataset], scores, descending_order(scores),
                            kept, tuple(models[i] for i in dropped))


def single_model_scores(tensor: ImportanceTensor, dataset: str, model: str, run: int | None = None) -> AggregatedScores:
    """A model's own ordering, in the same container as the aggregate."""
    v = tensor.model_vector(model, dataset, run)
    peak = v.max()
    scores = v / peak if peak > 0 else v.copy()
    return AggregatedScores(dataset, tensor.feature_names[dataset], scores, descending_order(scores), (model,))


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def threshold_grid(lo: float = 0.5, hi: float = 20.0, step: float = 0.5) -> list[float]:
    """Inclusive percentage grid lo, lo+step, ..., hi (within (0, 100])."""
    lo_f, hi_f, step_f = Fraction(str(lo)), Fraction(str(hi)), Fraction(str(step))
    if not (0 < lo_f <= hi_f <= 100) or step_f <= 0:
        raise ValueError("threshold bounds must satisfy 0 < lo <= hi <= 100 and step > 0")
    n = int((hi_f - lo_f) / step_f) + 1
    return [float(lo_f + i * step_f) for i in range(n)]


def n_top_features(threshold_pct: float, q: int) -> int:
    """ceil(threshold% of q), computed exactly; at least one feature."""
    k = math.ceil(Fraction(str(threshold_pct)) * q / 100)
    return max(1, min(q, k))


@dataclass
class SweepPoint:
    threshold_pct: float
    n_features: int
    uar: float | None
    uar_delta: float | None
    error: str | None = None


@dataclass
class SweepResult:
    model: str
    dataset: str
    ordering: str
    baseline_uar: float
    points: list = field(default_factory=list)
    pt: float | None = None

    def point(self, threshold_pct: float) -> SweepPoint | None:
        for p in self.points:
            if math.isclose(p.threshold_pct, threshold_pct):
                return p
        return None

    def at_par_by(self, threshold_pct: float) -> bool:
        return self.pt is not None and self.pt <= threshold_pct + 1e-12


def sweep_curve(evaluate: Callable[[int], float], q: int, baseline_uar: float,
                thresholds: Sequence[float] | None = None, stop_early: bool = True) -> tuple[list[SweepPoint], float | None]:
    """Evaluate `evaluate(k)` on the top-k prefix for each threshold; pt is the first par threshold.

    Errors raised by `evaluate` are recorded on the point and the sweep moves on.
    """
    thresholds = threshold_grid() if thresholds is None else list(thresholds)
    points, pt = [], None
    for t in thresholds:
        k = n_top_features(t, q)
        try:
            score = float(evaluate(k))
        except Exception as exc:
            log.warning("sweep threshold %.1f%% failed: %s", t, exc)
            points.append(SweepPoint(t, k, None, None, f"{type(exc).__name__}: {exc}"))
            continue
        points.append(SweepPoint(t, k, score, score - baseline_uar))
        if pt is None and score >= baseline_uar:
            pt = t
            if stop_early:
                break
    return points, pt


# ---------------------------------------------------------------------------
# multiset and LLD ranking
# ---------------------------------------------------------------------------

@dataclass
class FeatureMultiset:
    elements: Counter
    lld_counts: dict
    cutoff_llds: list
    contributions: list = field(default_factory=list)   # (model, dataset, pt, n_features)

    @property
    def size(self) -> int:
        return sum(self.elements.values())

    @property
    def n_distinct(self) -> int:
        return len(self.elements)


def lld_of(feature_name: str) -> str:
    return FeatureName.parse(feature_name).base_lld


def _lld_sort_key(lld: str):
    try:
        return (0, LLD_NAMES.index(lld), lld)
    except ValueError:
        return (1, 0, lld)


@dataclass(frozen=True)
class LLDRankRow:
    rank: int
    lld: str
    count: int
    normalized: float
    cumulative: float
    in_cutoff: bool


def rank_lld_counts(lld_counts: Mapping[str, int], cutoff_share: float = 0.5) -> list[LLDRankRow]:
    """Descending count, ties by canonical LLD order; cutoff = minimal prefix reaching the share."""
    items = sorted(lld_counts.items(), key=lambda kv: (-kv[1], _lld_sort_key(kv[0])))
    total = sum(c for _, c in items)
    if total <= 0:
        raise AggregationError("cannot rank an empty multiset")
    need = Fraction(str(cutoff_share)) * total
    rows, running, reached = [], 0, False
    for rank, (lld, count) in enumerate(items, start=1):
        in_cutoff = not reached
        running += count
        if running >= need:
            reached = True
        rows.append(LLDRankRow(rank, lld, count, count / total, running / total, in_cutoff))
    return rows


def rank_llds(multiset: FeatureMultiset, cutoff_share: float = 0.5) -> list[LLDRankRow]:
    """Attribute each feature (delta or not) to its base LLD and rank by occurrence."""
    return rank_lld_counts(multiset.lld_counts, cutoff_share)


def build_multiset(orderings: Mapping[str, AggregatedScores], sweeps: Iterable[SweepResult],
                   clamp: bool = False, clamp_pct: float = 20.0) -> FeatureMultiset:
    """Insert the top ceil(pt/100 * Q) features of each dataset's ordering once per (model, dataset)."""
    elements: Counter = Counter()
    contributions = []
    for s in sweeps:
        pt = s.pt
        if pt is None:
            if not clamp:
                warnings.warn(f"{s.model}/{s.dataset}: no par threshold, excluded from the multiset")
                continue
            pt = clamp_pct
        order = orderings[s.dataset]
        k = n_top_features(pt, len(order.feature_names))
        elements.update(order.top(k))
        contributions.append((s.model, s.dataset, pt, k))
    if not contributions:
        raise AggregationError("no (model, dataset) sweep reached par performance")
    lld_counts: dict = {}
    for name, mult in elements.items():
        lld = lld_of(name)
        lld_counts[lld] = lld_counts.get(lld, 0) + mult
    ranking = rank_lld_counts(lld_counts)
    cutoff = [r.lld for r in ranking if r.in_cutoff]
    return FeatureMultiset(elements, lld_counts, cutoff, contributions)
