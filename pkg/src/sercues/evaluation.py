"""UAR, speaker-disjoint splits, stratified k-fold selection and the repeated protocol."""

from __future__ import annotations

import itertools
import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import classifiers
from .classifiers import ModelSpec, TrainingError
from .data_model import EMOTIONS, DatasetManifest, FeatureMatrix

log = logging.getLogger(__name__)

LARGE_DATASET_THRESHOLD = 5000
DEFAULT_FOLDS = 5


def derive_seed(seed: int, *keys) -> int:
    """Stable 31-bit seed from a base seed and any hashable-by-repr keys."""
    text = ":".join([str(int(seed)), *map(str, keys)])
    return zlib.crc32(text.encode("utf-8")) & 0x7FFFFFFF


def _label_order(labels) -> list:
    present = set(labels)
    canonical = [e for e in EMOTIONS if e in present]
    return canonical + sorted(present - set(canonical), key=str)


@dataclass(frozen=True)
class EvalResult:
    uar: float
    per_emotion_recall: dict
    confusion: np.ndarray
    labels: tuple

    def to_dict(self) -> dict:
        return {
            "uar": self.uar,
            "per_emotion_recall": dict(self.per_emotion_recall),
            "confusion": {"labels": list(self.labels), "counts": self.confusion.tolist()},
        }


def uar(y_true: Sequence, y_pred: Sequence) -> EvalResult:
    """Unweighted average recall: mean of per-class recalls over classes present in y_true."""
    y_true = list(y_true)
    y_pred = list(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted labels")
    if not y_true:
        raise ValueError("uar needs at least one sample")
    labels = _label_order(y_true + y_pred)
    index = {lab: i for i, lab in enumerate(labels)}
    confusion = np.zeros((len(labels), len(labels)), dtype=np.int64)
    np.add.at(confusion, ([index[t] for t in y_true], [index[p] for p in y_pred]), 1)
    support = confusion.sum(axis=1)
    recalls = {lab: float(confusion[i, i] / support[i]) for i, lab in enumerate(labels) if support[i] > 0}
    return EvalResult(float(np.mean(list(recalls.values()))), recalls, confusion, tuple(labels))


# ---------------------------------------------------------------------------
# speaker-disjoint splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    train_speakers: tuple
    test_speakers: tuple
    run_index: int

    def masks(self, manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
        spk = manifest.speaker_ids
        test = np.isin(spk, list(self.test_speakers))
        train = np.isin(spk, list(self.train_speakers))
        return train, test

    def to_dict(self) -> dict:
        return {"run": self.run_index, "train_speakers": list(self.train_speakers),
                "test_speakers": list(self.test_speakers)}


def n_test_speakers(n_speakers: int) -> int:
    """20% (half rounded up) above 12 speakers, 2 at or below, 1 at or below 6."""
    if n_speakers < 2:
        raise ValueError("need at least two speakers to split")
    if n_speakers <= 6:
        return 1
    if n_speakers > 12:
        return max(2, int(math.floor(0.2 * n_speakers + 0.5)))
    return 2


def _balanced_male_counts(n_male: int, n_female: int, n_test: int) -> list[int]:
    lo, hi = max(0, n_test - n_female), min(n_male, n_test)
    feasible = list(range(lo, hi + 1))
    best = min(abs(2 * m - n_test) for m in feasible)
    return [m for m in feasible if abs(2 * m - n_test) == best]


def plan_splits(manifest: DatasetManifest, n_runs: int = 3, seed: int = 0, max_enumeration: int = 20000) -> list[SplitPlan]:
    """Speaker-disjoint train/test plans with the best achievable sex balance.

    Plans have pairwise-distinct test speaker sets whenever enough balanced
    selections exist.
    """
    speakers = manifest.speakers()
    if len(speakers) < 2:
        raise ValueError(f"{manifest.dataset_name}: need at least two speakers, found {len(speakers)}")
    rng = np.random.default_rng(derive_seed(seed, "splits", manifest.dataset_name))
    males = sorted(s for s, sex in speakers.items() if sex == "male")
    females = sorted(s for s, sex in speakers.items() if sex == "female")
    n_test = n_test_speakers(len(speakers))
    male_counts = _balanced_male_counts(len(males), len(females), n_test)
    n_options = sum(math.comb(len(males), m) * math.comb(len(females), n_test - m) for m in male_counts)

    chosen: list[tuple] = []
    if n_options <= max_enumeration:
        options = [tuple(sorted(mc + fc))
                   for m in male_counts
                   for mc in itertools.combinations(males, m)
                   for fc in itertools.combinations(females, n_test - m)]
        order = rng.permutation(len(options))
        while len(chosen) < n_runs:
            chosen.extend(options[i] for i in order[: n_runs - len(chosen)])
    else:
        seen = set()
        while len(chosen) < n_runs:
            m = male_counts[int(rng.integers(len(male_counts)))]
            pick = tuple(sorted(list(rng.choice(males, m, replace=False)) +
                                list(rng.choice(females, n_test - m, replace=False))))
            if pick not in seen:
                seen.add(pick)
                chosen.append(pick)

    all_speakers = sorted(speakers)
    plans = []
    for run, test in enumerate(chosen):
        train = tuple(s for s in all_speakers if s not in set(test))
        plans.append(SplitPlan(train, tuple(str(s) for s in test), run))
    return plans


# ---------------------------------------------------------------------------
# cross-validation and hyperparameter selection
# ---------------------------------------------------------------------------

def stratified_kfold(labels: Sequence, k: int = DEFAULT_FOLDS, seed: int = 0) -> np.ndarray:
    """Fold index per sample; per-class fold counts differ by at most one.

    When the rarest class has fewer than k members, k drops to that count
    with a warning.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    labels = np.asarray(labels, dtype=object)
    classes = _label_order(labels.tolist())
    counts = {c: int(np.sum(labels == c)) for c in classes}
    smallest = min(counts.values())
    if smallest < k:
        if smallest < 2:
            raise ValueError(f"class with {smallest} instance(s) cannot be cross-validated")
        warnings.warn(f"reducing folds from {k} to {smallest}: smallest class has {smallest} instances")
        k = smallest
    rng = np.random.default_rng(seed)
    folds = np.empty(labels.size, dtype=int)
    offset = 0
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (offset + np.arange(idx.size)) % k
        offset = (offset + idx.size) % k
    return folds


@dataclass(frozen=True)
class CVOutcome:
    best_config: dict
    fold_scores: tuple
    mean_score: float
    all_scores: tuple = ()   # (config, mean) per grid entry, in grid order


def select_hyperparameters(family: str, train_features: np.ndarray, train_labels: Sequence,
                           mode: str = "cv5", seed: int = 0, grid_preset="full",
                           configs: list[dict] | None = None) -> CVOutcome:
    """Grid search by stratified CV (mode "cv5") or one held-out fold ("single_fold").

    Ties go to the earliest configuration in grid order.
    """
    if mode not in ("cv5", "single_fold"):
        raise ValueError(f"unknown selection mode {mode!r}")
    configs = configs if configs is not None else classifiers.grid(family, grid_preset)
    x = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=object)
    folds = stratified_kfold(y, DEFAULT_FOLDS, seed=derive_seed(seed, "folds"))
    eval_folds = [0] if mode == "single_fold" else list(range(int(folds.max()) + 1))

    best, summary = None, []
    for cfg in configs:
        spec = ModelSpec(family, cfg, seed)
        scores = []
        for f in eval_folds:
            val = folds == f
            try:
                model = classifiers.train(spec, x[~val], y[~val])
            except Exception as exc:
                raise TrainingError(f"{family} config {cfg}: {exc}") from exc
            scores.append(uar(y[val], classifiers.predict(model, x[val])).uar)
        mean = float(np.mean(scores))
        summary.append((cfg, mean))
        if best is None or mean > best[2]:
            best = (cfg, tuple(scores), mean)
    return CVOutcome(dict(best[0]), best[1], best[2], tuple(summary))


def selection_mode(n_train_rows: int, threshold: int = LARGE_DATASET_THRESHOLD) -> str:
    return "single_fold" if n_train_rows > threshold else "cv5"


# ---------------------------------------------------------------------------
# repeated protocol
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    dataset: str
    family: str
    run: int
    eval: EvalResult | None = None
    importance: np.ndarray | None = None
    best_config: dict | None = None
    cv: CVOutcome | None = None
    mode: str | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ProtocolResult:
    dataset: str
    feature_names: tuple
    plans: list
    cells: list = field(default_factory=list)

    def cell(self, family: str, run: int) -> CellResult:
        for c in self.cells:
            if c.family == family and c.run == run:
                return c
        raise KeyError((family, run))

    def families(self) -> list[str]:
        return list(dict.fromkeys(c.family for c in self.cells))

    def mean_uar(self, family: str) -> float | None:
        vals = [c.eval.uar for c in self.cells if c.family == family and c.ok]
        return float(np.mean(vals)) if vals else None

    def run_uars(self, family: str) -> list[float]:
        return [c.eval.uar for c in self.cells if c.family == family and c.ok]


def fit_and_evaluate(family: str, x: np.ndarray, y: np.ndarray, train: np.ndarray, test: np.ndarray,
                     seed: int, grid_preset="full", mode: str | None = None, config: dict | None = None,
                     feature_names=None) -> CellResult:
    """One protocol cell: select on train (unless `config` is given), refit, evaluate on test."""
    cell = CellResult(dataset="", family=family, run=-1)
    mode = mode or selection_mode(int(train.sum()))
    cell.mode = mode
    if config is None:
        configs = classifiers.grid(family, grid_preset)
        if len(configs) == 1:
            config = configs[0]
    if config is None:
        cell.cv = select_hyperparameters(family, x[train], y[train], mode=mode, seed=seed, grid_preset=grid_preset)
        config = cell.cv.best_config
    cell.best_config = dict(config)
    model = classifiers.train(ModelSpec(family, config, seed), x[train], y[train], feature_names)
    cell.eval = uar(y[test], classifiers.predict(model, x[test]))
    if model.spec.has_importance:
        cell.importance = classifiers.importance(model)
    return cell


def _run_cell(dataset, family, plan, x, y, train, test, seed, grid_preset, mode, names):
    try:
        cell = fit_and_evaluate(family, x, y, train, test, derive_seed(seed, dataset, family, plan.run_index),
                                grid_preset=grid_preset, mode=mode, feature_names=names)
    except Exception as exc:  # one failing cell must not abort the others
        log.warning("%s/%s run %d failed: %s", dataset, family, plan.run_index, exc)
        cell = CellResult(dataset="", family=family, run=-1, error=f"{type(exc).__name__}: {exc}")
    cell.dataset, cell.run = dataset, plan.run_index
    return cell


def run_protocol(manifest: DatasetManifest, features: FeatureMatrix, model_families: Sequence[str],
                 n_runs: int = 3, seed: int = 0, grid_preset="full",
                 large_dataset_threshold: int = LARGE_DATASET_THRESHOLD, jobs: int = 1) -> ProtocolResult:
    """Split, select, refit and evaluate every (family, run) cell of one dataset."""
    features = features.aligned_to(manifest)
    families = [f.family if isinstance(f, ModelSpec) else f for f in model_families]
    plans = plan_splits(manifest, n_runs=n_runs, seed=seed)
    x, y = features.values, manifest.labels
    jobs_args = []
    for family in families:
        for plan in plans:
            train, test = plan.masks(manifest)
            mode = selection_mode(int(train.sum()), large_dataset_threshold)
            jobs_args.append((manifest.dataset_name, family, plan, x, y, train, test, seed, grid_preset,
                              mode, features.feature_names))
    if jobs > 1:
        from joblib import Parallel, delayed

        cells = Parallel(n_jobs=jobs)(delayed(_run_cell)(*a) for a in jobs_args)
    else:
        cells = [_run_cell(*a) for a in jobs_args]
    return ProtocolResult(manifest.dataset_name, features.feature_names, plans, list(cells))
