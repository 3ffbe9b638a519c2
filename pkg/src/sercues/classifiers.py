"""Model zoo: four importance-bearing classifiers and two validation-only ones.

All families share one interface: `train` fits a per-feature z-score on the
training rows and the estimator on the standardized matrix, `predict` checks
the column schema, `importance` returns the family's built-in importance.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.exceptions import ConvergenceWarning
from sklearn.kernel_approximation import RBFSampler
from sklearn.linear_model import LogisticRegression
from sklearn.neural_network import MLPClassifier
from sklearn.svm import LinearSVC

FAMILIES = ("l_svm", "logistic_regression", "random_forest", "gradient_boosting", "mlp", "rbf_svm")
IMPORTANCE_FAMILIES = FAMILIES[:4]
VALIDATION_FAMILIES = FAMILIES[4:]

DISPLAY_NAMES = {
    "l_svm": "L-SVM",
    "logistic_regression": "LGRG",
    "random_forest": "RFC",
    "gradient_boosting": "LGBM",
    "mlp": "MLP",
    "rbf_svm": "RBF-SVM",
}

RFF_COMPONENTS = 2048
MLP_VALIDATION_FRACTION = 0.1
# adam defaults stop on the first flat validation stretch at desk-scale row counts
MLP_SOLVER = {"alpha": 1.0, "learning_rate_init": 0.01, "n_iter_no_change": 20}
BOOSTING_MAX_BIN = 31

# Grids are dicts of name -> values; configurations enumerate in itertools.product order.
FULL_GRIDS = {
    "l_svm": {"C": [0.01, 0.1, 1.0, 10.0]},
    "logistic_regression": {"C": [0.01, 0.1, 1.0, 10.0]},
    "random_forest": {"n_trees": [200, 500], "max_depth": [8, 16, None]},
    "gradient_boosting": {"learning_rate": [0.05, 0.1], "n_rounds": [200, 500], "num_leaves": [31, 63]},
    "mlp": {"hidden_width": [64, 128]},
    "rbf_svm": {"C": [0.1, 1.0, 10.0]},
}

# Desk-scale grids for single-core acceptance runs; same parameters, fewer values.
COMPACT_GRIDS = {
    "l_svm": {"C": [0.01, 0.1]},
    "logistic_regression": {"C": [0.01, 0.1]},
    "random_forest": {"n_trees": [100], "max_depth": [None]},
    "gradient_boosting": {"learning_rate": [0.1], "n_rounds": [100], "num_leaves": [15]},
    "mlp": {"hidden_width": [64]},
    "rbf_svm": {"C": [1.0]},
}

GRID_PRESETS = {"full": FULL_GRIDS, "compact": COMPACT_GRIDS}


class ModelError(ValueError):
    """Invalid model specification or unsupported operation."""


class TrainingError(RuntimeError):
    """Training failed (degenerate data, non-convergence)."""


class SchemaMismatchError(ValueError):
    """Prediction matrix columns differ from the training schema."""


@dataclass(frozen=True)
class ModelSpec:
    family: str
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown model family {self.family!r}")
        allowed = set(FULL_GRIDS[self.family])
        unknown = set(self.hyperparameters) - allowed
        if unknown:
            raise ModelError(f"{self.family}: unknown hyperparameters {sorted(unknown)}")

    @property
    def has_importance(self) -> bool:
        return self.family in IMPORTANCE_FAMILIES

    def with_params(self, params: dict) -> "ModelSpec":
        return ModelSpec(self.family, {**self.hyperparameters, **params}, self.seed)


def grid(family: str, preset: str = "full") -> list[dict]:
    """Hyperparameter configurations for `family`, in deterministic order."""
    if family not in FAMILIES:
        raise ModelError(f"unknown model family {family!r}")
    if isinstance(preset, dict):
        table = preset.get(family, FULL_GRIDS[family])
    else:
        if preset not in GRID_PRESETS:
            raise ModelError(f"unknown grid preset {preset!r}")
        table = GRID_PRESETS[preset][family]
    keys = list(table)
    return [dict(zip(keys, values)) for values in itertools.product(*(table[k] for k in keys))]


def default_params(family: str) -> dict:
    return grid(family)[0]


# ---------------------------------------------------------------------------
# estimator construction
# ---------------------------------------------------------------------------

def _median_bandwidth(xs: np.ndarray, rng: np.random.Generator, max_rows: int = 500) -> float:
    rows = xs if xs.shape[0] <= max_rows else xs[rng.choice(xs.shape[0], max_rows, replace=False)]
    sq = np.sum(rows * rows, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * rows @ rows.T
    iu = np.triu_indices(rows.shape[0], k=1)
    d = np.sqrt(np.maximum(d2[iu], 0.0))
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def _linear_svc(C: float, seed: int) -> LinearSVC:
    return LinearSVC(C=C, dual="auto", max_iter=20000, tol=1e-4, random_state=seed)


def _build(spec: ModelSpec, xs: np.ndarray):
    p = {**default_params(spec.family), **spec.hyperparameters}
    fam, seed = spec.family, spec.seed
    if fam == "l_svm":
        return _linear_svc(p["C"], seed)
    if fam == "logistic_regression":
        return LogisticRegression(C=p["C"], max_iter=5000, tol=1e-6)
    if fam == "random_forest":
        return RandomForestClassifier(
            n_estimators=p["n_trees"], max_depth=p["max_depth"], random_state=seed, n_jobs=1)
    if fam == "gradient_boosting":
        import lightgbm

        return lightgbm.LGBMClassifier(
            learning_rate=p["learning_rate"], n_estimators=p["n_rounds"], num_leaves=p["num_leaves"],
            max_bin=BOOSTING_MAX_BIN, importance_type="gain", random_state=seed, n_jobs=1,
            deterministic=True, force_row_wise=True, verbose=-1)
    if fam == "mlp":
        return MLPClassifier(
            hidden_layer_sizes=(p["hidden_width"],), early_stopping=True,
            validation_fraction=MLP_VALIDATION_FRACTION, max_iter=500, random_state=seed,
            **MLP_SOLVER)
    if fam == "rbf_svm":
        rng = np.random.default_rng(seed)
        sigma = _median_bandwidth(xs, rng)
        sampler = RBFSampler(gamma=1.0 / (2.0 * sigma * sigma), n_components=RFF_COMPONENTS, random_state=seed)
        return _RFFSVM(sampler, _linear_svc(p["C"], seed))
    raise ModelError(fam)


class _RFFSVM:
    """Random Fourier feature map followed by a linear SVM."""

    def __init__(self, sampler: RBFSampler, svm: LinearSVC):
        self.sampler = sampler
        self.svm = svm

    def fit(self, x, y):
        self.svm.fit(self.sampler.fit_transform(x), y)
        return self

    def decision_function(self, x):
        return self.svm.decision_function(self.sampler.transform(x))


# ---------------------------------------------------------------------------
# trained model
# ---------------------------------------------------------------------------

@dataclass
class TrainedModel:
    spec: ModelSpec
    feature_names: tuple
    classes: tuple
    mean: np.ndarray
    scale: np.ndarray
    estimator: Any = None
    _replay: dict | None = None

    @property
    def family(self) -> str:
        return self.spec.family

    def standardize(self, x: np.ndarray) -> np.ndarray:
        # scale 0 marks a zero-variance training column, which maps to 0
        live = self.scale > 0
        out = np.zeros_like(x, dtype=np.float64)
        out[:, live] = (x[:, live] - self.mean[live]) / self.scale[live]
        return out

    def class_scores(self, xs: np.ndarray) -> np.ndarray:
        """Per-class scores on standardized rows, shape (n, n_classes)."""
        if self._replay is not None:
            return _replay_scores(self._replay, self.family, xs, len(self.classes))
        est = self.estimator
        if self.family in ("random_forest", "gradient_boosting", "mlp"):
            return est.predict_proba(xs)
        scores = est.decision_function(xs)
        if scores.ndim == 1:
            scores = np.stack([-scores, scores], axis=1)
        return scores

    def to_json(self) -> str:
        return save_model(self)


def _check_features(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=0))[0])
        raise TrainingError(f"non-finite feature values (first in column {bad})")
    return x


def train(spec: ModelSpec, features: np.ndarray, labels: Sequence, feature_names: Sequence[str] | None = None) -> TrainedModel:
    """Fit `spec` on (features, labels). Classes are ordered by first sort order of the labels."""
    x = _check_features(features)
    labels = np.asarray(labels, dtype=object)
    if labels.shape[0] != x.shape[0]:
        raise ValueError("features and labels differ in length")
    classes = tuple(sorted(set(labels.tolist())))
    if len(classes) < 2:
        raise TrainingError("training data must contain at least two classes")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(x.shape[1]))
    if len(names) != x.shape[1]:
        raise ValueError("feature_names length differs from column count")

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale <= 1e-12 * np.maximum(1.0, np.abs(mean)), 0.0, scale)
    y = np.searchsorted(np.array(classes, dtype=object), labels)

    model = TrainedModel(spec, names, classes, mean, scale)
    xs = model.standardize(x)
    est = _build(spec, xs)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        warnings.filterwarnings("ignore", message="X does not have valid feature names")
        try:
            est.fit(xs, y)
        except ConvergenceWarning as exc:
            if spec.family != "mlp":
                raise TrainingError(f"{spec.family} {spec.hyperparameters}: {exc}") from exc
            # early-stopped MLPs hitting max_iter are still usable
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                est.fit(xs, y)
    model.estimator = est
    return model


def predict(model: TrainedModel, features, feature_names: Sequence[str] | None = None) -> np.ndarray:
    """Predicted labels; argmax ties go to the lowest class index."""
    if feature_names is not None:
        names = tuple(feature_names)
        if names != model.feature_names:
            for i, (a, b) in enumerate(itertools.zip_longest(names, model.feature_names)):
                if a != b:
                    raise SchemaMismatchError(f"column {i}: expected {b!r}, got {a!r}")
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        return np.array([], dtype=object)
    if x.ndim != 2 or x.shape[1] != len(model.feature_names):
        raise SchemaMismatchError(f"expected {len(model.feature_names)} columns, got {x.shape[-1]}")
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="X does not have valid feature names")
        scores = model.class_scores(model.standardize(x))
    return np.array(model.classes, dtype=object)[np.argmax(scores, axis=1)]


def importance(model: TrainedModel) -> np.ndarray:
    """Non-negative importance per feature, aligned with model.feature_names.

    Linear families: mean |weight| over class weight vectors. Forest: mean
    impurity decrease. Boosting: total split gain.
    """
    if model.family not in IMPORTANCE_FAMILIES:
        raise ModelError(f"{model.family} has no built-in feature importance")
    if model._replay is not None:
        return np.asarray(model._replay["importance"], dtype=np.float64)
    est = model.estimator
    if model.family in ("l_svm", "logistic_regression"):
        scores = np.mean(np.abs(est.coef_), axis=0)
    elif model.family == "random_forest":
        scores = np.asarray(est.feature_importances_, dtype=np.float64)
    else:
        scores = np.asarray(est.booster_.feature_importance(importance_type="gain"), dtype=np.float64)
    return np.maximum(np.nan_to_num(scores, nan=0.0), 0.0)


# ---------------------------------------------------------------------------
# JSON persistence
# ---------------------------------------------------------------------------

def _linear_params(est) -> dict:
    return {"coef": est.coef_.tolist(), "intercept": np.atleast_1d(est.intercept_).tolist()}


def _tree_params(tree) -> dict:
    t = tree.tree_
    return {
        "children_left": t.children_left.tolist(),
        "children_right": t.children_right.tolist(),
        "feature": t.feature.tolist(),
        "threshold": t.threshold.tolist(),
        "value": t.value[:, 0, :].tolist(),
    }


def save_model(model: TrainedModel) -> str:
    """Self-describing JSON: schema, standardization and the learned parameters."""
    fam, est = model.family, model.estimator
    if model._replay is not None:
        params = model._replay
    elif fam in ("l_svm", "logistic_regression"):
        params = _linear_params(est)
    elif fam == "random_forest":
        params = {"trees": [_tree_params(t) for t in est.estimators_]}
    elif fam == "gradient_boosting":
        params = {"lightgbm_model": est.booster_.model_to_string(), "trees": est.booster_.dump_model()["tree_info"]}
    elif fam == "mlp":
        params = {"coefs": [c.tolist() for c in est.coefs_], "intercepts": [b.tolist() for b in est.intercepts_]}
    else:
        params = {
            "random_weights": est.sampler.random_weights_.tolist(),
            "random_offset": est.sampler.random_offset_.tolist(),
            **_linear_params(est.svm),
        }
    if fam in IMPORTANCE_FAMILIES and "importance" not in params:
        params = {**params, "importance": importance(model).tolist()}
    doc = {
        "format": "sercues.model/1",
        "family": fam,
        "hyperparameters": model.spec.hyperparameters,
        "seed": model.spec.seed,
        "feature_names": list(model.feature_names),
        "classes": list(model.classes),
        "standardize": {"mean": model.mean.tolist(), "scale": model.scale.tolist()},
        "params": params,
    }
    return json.dumps(doc, sort_keys=True)


def load_model(text: str) -> TrainedModel:
    doc = json.loads(text)
    if doc.get("format") != "sercues.model/1":
        raise ModelError("not a sercues model document")
    spec = ModelSpec(doc["family"], doc["hyperparameters"], doc["seed"])
    params = doc["params"]
    if spec.family == "gradient_boosting":
        import lightgbm

        params = {**params, "_booster": lightgbm.Booster(model_str=params["lightgbm_model"])}
    return TrainedModel(
        spec, tuple(doc["feature_names"]), tuple(doc["classes"]),
        np.asarray(doc["standardize"]["mean"]), np.asarray(doc["standardize"]["scale"]),
        None, params)


def _linear_scores(p: dict, xs: np.ndarray) -> np.ndarray:
    scores = xs @ np.asarray(p["coef"]).T + np.asarray(p["intercept"])
    if scores.shape[1] == 1:
        scores = np.hstack([-scores, scores])
    return scores


def _tree_proba(t: dict, xs: np.ndarray) -> np.ndarray:
    left, right = np.asarray(t["children_left"]), np.asarray(t["children_right"])
    feat, thr = np.asarray(t["feature"]), np.asarray(t["threshold"])
    value = np.asarray(t["value"], dtype=np.float64)
    node = np.zeros(xs.shape[0], dtype=int)
    active = left[node] != -1
    while np.any(active):
        rows = np.flatnonzero(active)
        n = node[rows]
        go_left = xs[rows, feat[n]] <= thr[n]
        node[rows] = np.where(go_left, left[n], right[n])
        active = left[node] != -1
    leaf = value[node]
    return leaf / leaf.sum(axis=1, keepdims=True)


def _replay_scores(p: dict, family: str, xs: np.ndarray, n_classes: int) -> np.ndarray:
    if family in ("l_svm", "logistic_regression"):
        return _linear_scores(p, xs)
    if family == "random_forest":
        return np.mean([_tree_proba(t, xs) for t in p["trees"]], axis=0)
    if family == "gradient_boosting":
        out = p["_booster"].predict(xs)
        return out if out.ndim == 2 else np.stack([1 - out, out], axis=1)
    if family == "mlp":
        h = xs
        layers = list(zip(p["coefs"], p["intercepts"]))
        for w, b in layers[:-1]:
            h = np.maximum(h @ np.asarray(w) + np.asarray(b), 0.0)
        w, b = layers[-1]
        out = h @ np.asarray(w) + np.asarray(b)
        return np.hstack([-out, out]) if out.shape[1] == 1 else out
    z = xs @ np.asarray(p["random_weights"]) + np.asarray(p["random_offset"])
    z = np.cos(z) * np.sqrt(2.0 / RFF_COMPONENTS)
    return _linear_scores(p, z)
