"""Dataset manifests, emotion labels and the planted-signal synthetic generator."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_features import FUNCTIONALS, FeatureName

EMOTIONS = ("happiness", "anger", "fear", "sadness", "neutral", "disgust", "surprise")
SEXES = ("male", "female")
MANIFEST_COLUMNS = ("utterance_id", "audio_path", "speaker_id", "sex", "emotion")
SYNTHETIC_VIEWS = ("gaussian", "heavy_tailed", "mixed")

_SEX_ALIASES = {"m": "male", "male": "male", "f": "female", "female": "female"}


class ManifestError(ValueError):
    """Malformed or inconsistent manifest."""


class EmotionMappingError(ManifestError):
    """Raw emotion labels with no mapping onto the closed label set."""

    def __init__(self, offending: list[tuple[int, str]]):
        self.offending = offending
        shown = ", ".join(f"line {ln}: {lab!r}" for ln, lab in offending[:20])
        more = f" (+{len(offending) - 20} more)" if len(offending) > 20 else ""
        super().__init__(f"unmapped emotion labels: {shown}{more}")


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: str
    speaker_id: str
    sex: str
    emotion: str
    duration_s: float | None = None


@dataclass(frozen=True)
class DatasetManifest:
    dataset_name: str
    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ManifestError(f"{self.dataset_name}: manifest has no entries")
        seen = set()
        for e in entries:
            if e.utterance_id in seen:
                raise ManifestError(f"{self.dataset_name}: duplicate utterance_id {e.utterance_id!r}")
            seen.add(e.utterance_id)
            if e.emotion not in EMOTIONS:
                raise ManifestError(f"{self.dataset_name}: emotion {e.emotion!r} outside the closed label set")
            if e.sex not in SEXES:
                raise ManifestError(f"{self.dataset_name}: sex {e.sex!r} must be one of {SEXES}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def utterance_ids(self) -> list[str]:
        return [e.utterance_id for e in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.emotion for e in self.entries], dtype=object)

    @property
    def speaker_ids(self) -> np.ndarray:
        return np.array([e.speaker_id for e in self.entries], dtype=object)

    def speakers(self) -> dict[str, str]:
        """speaker_id -> sex, in first-appearance order."""
        out: dict[str, str] = {}
        for e in self.entries:
            prev = out.setdefault(e.speaker_id, e.sex)
            if prev != e.sex:
                raise ManifestError(f"speaker {e.speaker_id!r} listed with both sexes")
        return out

    def emotion_counts(self) -> dict[str, int]:
        counts = {emo: 0 for emo in EMOTIONS}
        for e in self.entries:
            counts[e.emotion] += 1
        return {k: v for k, v in counts.items() if v}


@dataclass(frozen=True)
class FeatureMatrix:
    """Rows aligned to utterance ids, columns to feature names."""

    utterance_ids: tuple
    feature_names: tuple
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "utterance_ids", tuple(self.utterance_ids))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        values = np.asarray(self.values, dtype=np.float64).reshape(len(self.utterance_ids), len(self.feature_names))
        object.__setattr__(self, "values", values)
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError("duplicate feature names")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def aligned_to(self, manifest: DatasetManifest) -> "FeatureMatrix":
        """Rows reordered to follow the manifest; every manifest utterance must be present."""
        index = {uid: i for i, uid in enumerate(self.utterance_ids)}
        missing = [uid for uid in manifest.utterance_ids if uid not in index]
        if missing:
            raise ManifestError(f"{len(missing)} manifest utterances have no feature row, e.g. {missing[0]!r}")
        rows = [index[uid] for uid in manifest.utterance_ids]
        return FeatureMatrix(manifest.utterance_ids, self.feature_names, self.values[rows])


def load_emotion_mapping(path=None) -> dict[tuple[str, str], str]:
    """(dataset_name.lower(), raw_label.lower()) -> canonical emotion."""
    if path is None:
        text = resources.files("sercues").joinpath("data/emotion_mapping.csv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames != ["dataset_name", "raw_label", "mapped_label"]:
        raise ManifestError("emotion mapping must have header dataset_name,raw_label,mapped_label")
    table = {}
    for row in reader:
        mapped = row["mapped_label"].strip().lower()
        if mapped not in EMOTIONS:
            raise ManifestError(f"emotion mapping targets unknown label {mapped!r}")
        table[(row["dataset_name"].strip().lower(), row["raw_label"].strip().lower())] = mapped
    return table


def map_emotion(dataset_name: str, raw: str, mapping: dict) -> str | None:
    key = raw.strip().lower()
    if key in EMOTIONS:
        return key
    return mapping.get((dataset_name.lower(), key))


def load_manifest(path, dataset_name: str | None = None, mapping_path=None) -> DatasetManifest:
    """Read and validate a manifest CSV, mapping raw corpus labels to canonical emotions."""
    path = Path(path)
    dataset_name = dataset_name or path.stem
    mapping = load_emotion_mapping(mapping_path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if tuple(header[:5]) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must start with {','.join(MANIFEST_COLUMNS)}")
        rows = list(reader)
    if not rows:
        raise ManifestError(f"{path}: manifest has no entries")

    entries, unmapped = [], []
    for lineno, row in enumerate(rows, start=2):
        emotion = map_emotion(dataset_name, row["emotion"] or "", mapping)
        if emotion is None:
            unmapped.append((lineno, row["emotion"]))
            continue
        sex = _SEX_ALIASES.get((row["sex"] or "").strip().lower())
        if sex is None:
            raise ManifestError(f"{path}: line {lineno}: unknown sex {row['sex']!r}")
        if not row["utterance_id"] or not row["speaker_id"]:
            raise ManifestError(f"{path}: line {lineno}: utterance_id and speaker_id are required")
        duration = row.get("duration_s")
        entries.append(ManifestEntry(
            utterance_id=row["utterance_id"],
            audio_path=row["audio_path"] or "",
            speaker_id=row["speaker_id"],
            sex=sex,
            emotion=emotion,
            duration_s=float(duration) if duration not in (None, "") else None,
        ))
    if unmapped:
        raise EmotionMappingError(unmapped)
    return DatasetManifest(dataset_name, tuple(entries))


def write_manifest(path, manifest: DatasetManifest) -> None:
    with_duration = any(e.duration_s is not None for e in manifest.entries)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(MANIFEST_COLUMNS) + (["duration_s"] if with_duration else []))
        for e in manifest.entries:
            row = [e.utterance_id, e.audio_path, e.speaker_id, e.sex, e.emotion]
            if with_duration:
                row.append("" if e.duration_s is None else f"{e.duration_s:.9g}")
            w.writerow(row)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-signal tabular dataset.

    Features are class_mean(emotion) + speaker_offset(speaker) + noise; class
    means differ only on `informative_features`. `view` selects the noise
    structure (see `generate_synthetic`).
    """

    n_speakers: int = 12
    utterances_per_speaker_per_emotion: int = 10
    n_emotions: int = 4
    q_features: int = 500
    informative_features: tuple = tuple(range(10))
    speaker_effect_scale: float = 0.5
    noise_scale: float = 1.0
    class_separation: float = 2.0
    seed: int = 0
    view: str = "gaussian"
    speaker_decoys: int = 0
    decoy_scale: float = 0.0
    name: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "informative_features", tuple(int(i) for i in self.informative_features))
        inf = self.informative_features
        if not 2 <= self.n_emotions <= len(EMOTIONS):
            raise ValueError(f"n_emotions must be in [2, {len(EMOTIONS)}]")
        if self.n_speakers < 1 or self.utterances_per_speaker_per_emotion < 1:
            raise ValueError("need at least one speaker and one utterance per speaker and emotion")
        if len(set(inf)) != len(inf) or any(not 0 <= i < self.q_features for i in inf):
            raise ValueError("informative_features must be distinct indices in [0, q_features)")
        if not 0 <= self.speaker_decoys <= self.q_features - len(inf):
            raise ValueError("speaker_decoys must fit in the non-informative columns")
        if min(self.speaker_effect_scale, self.noise_scale, self.class_separation, self.decoy_scale) < 0:
            raise ValueError("scales must be non-negative")
        if self.view not in SYNTHETIC_VIEWS:
            raise ValueError(f"unknown synthetic view {self.view!r}; choose from {SYNTHETIC_VIEWS}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["informative_features"] = list(self.informative_features)
        return d


def synthetic_feature_names(q: int) -> list[str]:
    """LLD-style names for synthetic columns: 24 features (12 base + 12 delta) per synthetic LLD."""
    per_lld = 2 * len(FUNCTIONALS)
    names = []
    for j in range(q):
        lld, k = divmod(j, per_lld)
        is_delta, fn = divmod(k, len(FUNCTIONALS))
        names.append(str(FeatureName(f"syn{lld:02d}", bool(is_delta), FUNCTIONALS[fn])))
    return names


def _sign_codes(rng: np.random.Generator, n_emotions: int, k: int, n_candidates: int = 64) -> np.ndarray:
    """+/-1 code per (emotion, feature) with balanced columns.

    Among random candidates, keeps the one whose closest pair of emotions
    differs on the most features.
    """
    base = np.where(np.arange(n_emotions) < (n_emotions + 1) // 2, 1.0, -1.0)
    best, best_key = None, None
    for _ in range(n_candidates):
        codes = np.stack([rng.permutation(base) for _ in range(k)], axis=1)
        dist = (k - codes @ codes.T) / 2
        off = dist[~np.eye(n_emotions, dtype=bool)]
        key = (off.min(), off.mean())
        if best_key is None or key > best_key:
            best, best_key = codes, key
    return best


def generate_synthetic(spec: SyntheticSpec) -> tuple[DatasetManifest, FeatureMatrix, tuple]:
    """Generate (manifest, features, informative feature indices) deterministically from `spec`.

    Every informative feature shifts by +/- class_separation / 2 between two
    balanced groups of emotions. `view` sets the noise law:

      gaussian      standard normal noise on every column
      heavy_tailed  Student-t noise (1.5 degrees of freedom) on every column
      mixed         heavy-tailed noise on the first half of the informative
                    features and on every other non-informative column

    `speaker_decoys` non-informative columns additionally carry a
    speaker-specific emotion code: each speaker maps the emotions onto evenly
    spaced levels (spread `decoy_scale`) in its own random order. Such columns
    separate emotions within a known speaker but carry no signal that
    transfers to unseen speakers.

    Random draws happen in a canonical column layout (informative block
    first, then decoys), and columns are then placed so that
    informative_features[i] receives canonical column i; relabelling the
    informative indices therefore only permutes columns.
    """
    rng = np.random.default_rng(spec.seed)
    emotions = EMOTIONS[: spec.n_emotions]
    q, k = spec.q_features, len(spec.informative_features)
    n_per = spec.utterances_per_speaker_per_emotion

    speaker_idx = np.repeat(np.arange(spec.n_speakers), spec.n_emotions * n_per)
    emotion_idx = np.tile(np.repeat(np.arange(spec.n_emotions), n_per), spec.n_speakers)
    n = speaker_idx.size

    codes = _sign_codes(rng, spec.n_emotions, k)
    offsets = spec.speaker_effect_scale * rng.standard_normal((spec.n_speakers, q))
    gauss = rng.standard_normal((n, q))
    heavy = rng.standard_t(1.5, size=(n, q))
    levels = np.linspace(-0.5, 0.5, spec.n_emotions) * spec.decoy_scale
    decoy_perm = np.argsort(rng.random((spec.n_speakers, spec.speaker_decoys, spec.n_emotions)), axis=2)

    if spec.view == "gaussian":
        noise = gauss
    elif spec.view == "heavy_tailed":
        noise = heavy
    else:
        noise = gauss.copy()
        half = k // 2
        noise[:, :half] = heavy[:, :half]
        noise[:, k::2] = heavy[:, k::2]

    means = np.zeros((spec.n_emotions, q))
    means[:, :k] = 0.5 * spec.class_separation * codes
    canonical = means[emotion_idx] + offsets[speaker_idx] + spec.noise_scale * noise
    if spec.speaker_decoys:
        # level assigned to this row's emotion by its speaker, per decoy column
        canonical[:, k:k + spec.speaker_decoys] += levels[decoy_perm[speaker_idx, :, emotion_idx]]

    layout = np.empty(q, dtype=int)
    informative = list(spec.informative_features)
    taken = set(informative)
    rest = [j for j in range(q) if j not in taken]
    layout[informative] = np.arange(k)
    layout[rest] = np.arange(k, q)
    values = canonical[:, layout]

    entries = []
    for row in range(n):
        s, e = int(speaker_idx[row]), int(emotion_idx[row])
        rep = row % n_per
        entries.append(ManifestEntry(
            utterance_id=f"{spec.name}_s{s:03d}_{emotions[e]}_{rep:03d}",
            audio_path="",
            speaker_id=f"spk{s:03d}",
            sex=SEXES[s % 2],
            emotion=emotions[e],
        ))
    manifest = DatasetManifest(spec.name, tuple(entries))
    features = FeatureMatrix(manifest.utterance_ids, synthetic_feature_names(q), values)
    return manifest, features, tuple(spec.informative_features)


def decoy_columns(spec: SyntheticSpec) -> tuple:
    """Column indices that carry speaker-specific decoy codes."""
    taken = set(spec.informative_features)
    rest = [j for j in range(spec.q_features) if j not in taken]
    return tuple(rest[: spec.speaker_decoys])
