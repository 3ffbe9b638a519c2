"""Frame-level acoustic descriptors and utterance-level functionals.

A reduced ComParE-style feature set: 20 low-level descriptors (LLDs), their
temporal deltas, and 12 statistical functionals per track, giving 480 named
features per utterance.
"""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps
from scipy.fft import dct

DEFAULT_SAMPLE_RATE = 16000
MIN_SAMPLE_RATE = 8000

F0_MIN_HZ = 60.0
F0_MAX_HZ = 500.0
VOICING_THRESHOLD = 0.45
N_AUDITORY_BANDS = 26
AUDITORY_FMIN_HZ = 20.0
LOG_FLOOR = 1e-20
HNR_CLAMP_DB = 100.0
N_MFCC_FEATURES = 10

# RASTA band-pass: 0.1 * (2 + z^-1 - z^-3 - 2 z^-4) / (1 - 0.98 z^-1)
RASTA_B = 0.1 * np.array([2.0, 1.0, 0.0, -1.0, -2.0])
RASTA_A = np.array([1.0, -0.98])

DELTA_SUFFIX = "_de"

FUNCTIONALS = (
    "mean",
    "stddev",
    "skewness",
    "kurtosis",
    "min",
    "max",
    "range",
    "quartile1",
    "median",
    "quartile3",
    "percentile1",
    "percentile99",
)

ROLLOFF25 = "pcm_fftMag_spectralRollOff25.0"
ROLLOFF50 = "pcm_fftMag_spectralRollOff50.0"

LLD_NAMES = (
    "F0final",
    "voicingFinalUnclipped",
    "pcm_RMSenergy",
    "pcm_zcr",
    "audspec_lengthL1norm",
    "audSpec_Rfilt[0]",
    "audSpec_Rfilt[1]",
    "logHNR",
    ROLLOFF25,
    ROLLOFF50,
) + tuple(f"mfcc[{i}]" for i in range(N_MFCC_FEATURES))


class AudioError(ValueError):
    """Raised for unusable audio input (empty, non-finite, wrong format)."""


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise AudioError("audio buffer must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise AudioError("audio buffer contains non-finite samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate < MIN_SAMPLE_RATE:
            raise AudioError(f"sample_rate must be an integer >= {MIN_SAMPLE_RATE}, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrameConfig:
    window_length: float = 0.025
    hop_length: float = 0.010
    window_function: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_length:
            raise ValueError("FrameConfig requires 0 < hop_length <= window_length")
        if self.window_function not in ("hann", "hamming"):
            raise ValueError(f"unsupported window function {self.window_function!r}")

    def window_samples(self, sample_rate: int) -> int:
        return max(1, int(round(self.window_length * sample_rate)))

    def hop_samples(self, sample_rate: int) -> int:
        return max(1, int(round(self.hop_length * sample_rate)))

    def window(self, n: int) -> np.ndarray:
        # periodic ("DFT-even") windows, as used for spectral analysis
        return sps.get_window(self.window_function, n, fftbins=True)


@dataclass(frozen=True)
class LLDTrack:
    lld_name: str
    values: np.ndarray
    is_delta: bool = False

    @property
    def name(self) -> str:
        return self.lld_name + (DELTA_SUFFIX if self.is_delta else "")


@dataclass(frozen=True)
class FeatureName:
    base_lld: str
    is_delta: bool
    functional: str

    def __str__(self) -> str:
        return f"{self.base_lld}{DELTA_SUFFIX if self.is_delta else ''}_{self.functional}"

    @classmethod
    def parse(cls, name: str) -> "FeatureName":
        head, sep, functional = name.rpartition("_")
        if not sep or not head or not functional:
            raise ValueError(f"malformed feature name {name!r}")
        is_delta = head.endswith(DELTA_SUFFIX)
        base = head[: -len(DELTA_SUFFIX)] if is_delta else head
        if not base:
            raise ValueError(f"malformed feature name {name!r}")
        return cls(base, is_delta, functional)


@dataclass(frozen=True)
class FeatureVector:
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise ValueError("names and values differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")

    def __len__(self) -> int:
        return len(self.names)


def feature_names(llds: Sequence[str] = LLD_NAMES) -> list[str]:
    """Canonical feature-name enumeration: base tracks, then delta tracks."""
    names = []
    for is_delta in (False, True):
        for lld in llds:
            for fn in FUNCTIONALS:
                names.append(str(FeatureName(lld, is_delta, fn)))
    return names


def frame_signal(audio: AudioBuffer, cfg: FrameConfig, apply_window: bool = True) -> np.ndarray:
    """Slice audio into (n_frames, window_samples) frames.

    Signals shorter than one window are zero-padded to a single frame.
    """
    x = audio.samples
    n_win = cfg.window_samples(audio.sample_rate)
    n_hop = cfg.hop_samples(audio.sample_rate)
    if x.size < n_win:
        x = np.concatenate([x, np.zeros(n_win - x.size)])
    n_frames = (x.size - n_win) // n_hop + 1
    idx = np.arange(n_win)[None, :] + n_hop * np.arange(n_frames)[:, None]
    frames = x[idx]
    if apply_window:
        frames = frames * cfg.window(n_win)[None, :]
    return frames


def _as_frames(frames) -> np.ndarray:
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.size == 0:
        raise AudioError("no frames")
    return frames


def _nfft(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def _magnitude_spectrum(windowed: np.ndarray) -> np.ndarray:
    return np.abs(np.fft.rfft(windowed, n=_nfft(windowed.shape[1]), axis=1))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_bands: int, n_fft: int, sample_rate: int, fmin: float = AUDITORY_FMIN_HZ,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, shape (n_bands, n_fft//2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_bands + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((n_bands, freqs.size))
    for b in range(n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        bank[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def _normalized_autocorrelation(frame: np.ndarray, lag_min: int, lag_max: int) -> np.ndarray:
    """r[k] for lags lag_min..lag_max, each lag normalized by the energies of its overlap."""
    n = frame.size
    lags = np.arange(lag_min, lag_max + 1)
    sq = np.concatenate([[0.0], np.cumsum(frame * frame)])
    spec = np.fft.rfft(frame, n=_nfft(2 * n))
    acf = np.fft.irfft(spec * np.conj(spec))[: n]
    e_head = sq[n - lags]            # sum x[0 : n-lag]^2
    e_tail = sq[n] - sq[lags]        # sum x[lag : n]^2
    denom = np.sqrt(e_head * e_tail)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(denom > 0, acf[lags] / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(r, -1.0, 1.0)


def _pitch_peak(r: np.ndarray):
    """Pick the first local maximum within 90% of the global maximum (octave-error guard).

    Returns (index into r, r value) or None when no positive local maximum exists.
    """
    if r.size < 3:
        return None
    interior = np.flatnonzero((r[1:-1] >= r[:-2]) & (r[1:-1] > r[2:])) + 1
    if interior.size == 0 or r[interior].max() <= 0:
        return None
    best = r[interior].max()
    i = int(interior[np.argmax(r[interior] >= 0.9 * best)])
    return i, float(r[i])


def _parabolic_offset(y0: float, y1: float, y2: float) -> float:
    denom = y0 - 2.0 * y1 + y2
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (y0 - y2) / denom, -0.5, 0.5))


def _cosine_peak_height(y0: float, y1: float, y2: float) -> float:
    """Height of the cosine A*cos(w*(k - d)) through three equally spaced samples.

    Exact for sinusoidal autocorrelation; falls back to a parabola otherwise.
    """
    if y1 > 0:
        c = (y0 + y2) / (2.0 * y1)
        if -1.0 < c < 1.0:
            w = math.acos(c)
            s = math.sin(w)
            d = math.atan2(y2 - y0, 2.0 * y1 * s) / w
            if abs(d) <= 0.5:
                return y1 / math.cos(w * d)
    p = _parabolic_offset(y0, y1, y2)
    return y1 - 0.25 * (y0 - y2) * p


def _f0_frame(frame: np.ndarray, sample_rate: int):
    """(f0_hz, voicing_probability, harmonic_peak) for one raw frame."""
    if not np.any(frame):
        return 0.0, 0.0, 0.0
    lag_min = max(2, int(math.floor(sample_rate / F0_MAX_HZ)))
    lag_max = min(frame.size - 2, int(math.ceil(sample_rate / F0_MIN_HZ)))
    if lag_max - lag_min < 2:
        return 0.0, 0.0, 0.0
    # one lag of context on either side for interpolation
    r = _normalized_autocorrelation(frame, lag_min - 1, lag_max + 1)
    peak = _pitch_peak(r)
    if peak is None:
        return 0.0, 0.0, 0.0
    i, height = peak
    voicing = float(np.clip(height, 0.0, 1.0))
    lag = lag_min - 1 + i + _parabolic_offset(r[i - 1], r[i], r[i + 1])
    harmonic = float(np.clip(_cosine_peak_height(r[i - 1], r[i], r[i + 1]), 0.0, 1.0))
    f0 = sample_rate / lag if voicing >= VOICING_THRESHOLD else 0.0
    return f0, voicing, harmonic


def extract_f0(frames, sample_rate: int) -> tuple[LLDTrack, LLDTrack]:
    """Autocorrelation pitch tracker over raw (unwindowed) frames.

    F0 is reported in Hz and set to 0 where the voicing probability (the height
    of the chosen normalized autocorrelation peak) is below the threshold.
    """
    frames = _as_frames(frames)
    out = np.array([_f0_frame(f, sample_rate)[:2] for f in frames])
    return (LLDTrack("F0final", out[:, 0]), LLDTrack("voicingFinalUnclipped", out[:, 1]))


def zero_crossing_rate(frames) -> np.ndarray:
    """Fraction of adjacent sample pairs whose signs differ."""
    frames = _as_frames(frames)
    if frames.shape[1] < 2:
        return np.zeros(frames.shape[0])
    s = np.signbit(frames)
    nonzero = frames != 0
    flips = (s[:, 1:] != s[:, :-1]) & nonzero[:, 1:] & nonzero[:, :-1]
    return flips.sum(axis=1) / (frames.shape[1] - 1)


def extract_energy_llds(frames, sample_rate: int = DEFAULT_SAMPLE_RATE,
                        window_function: str = "hann") -> list[LLDTrack]:
    """RMS energy and ZCR on raw frames; auditory-spectrum L1 norm on windowed frames."""
    frames = _as_frames(frames)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    zcr = zero_crossing_rate(frames)
    window = sps.get_window(window_function, frames.shape[1], fftbins=True)
    bands = auditory_bands(frames * window[None, :], sample_rate)
    return [
        LLDTrack("pcm_RMSenergy", rms),
        LLDTrack("pcm_zcr", zcr),
        LLDTrack("audspec_lengthL1norm", bands.sum(axis=1)),
    ]


def auditory_bands(windowed, sample_rate: int) -> np.ndarray:
    """26 mel-spaced triangular bands of the magnitude spectrum, shape (n_frames, 26)."""
    windowed = _as_frames(windowed)
    mag = _magnitude_spectrum(windowed)
    bank = mel_filterbank(N_AUDITORY_BANDS, _nfft(windowed.shape[1]), sample_rate)
    return mag @ bank.T


def spectral_rolloff(windowed, sample_rate: int, fraction: float) -> np.ndarray:
    """Lowest bin frequency where cumulative power reaches `fraction` of the total."""
    windowed = _as_frames(windowed)
    power = _magnitude_spectrum(windowed) ** 2
    n_fft = _nfft(windowed.shape[1])
    cum = np.cumsum(power, axis=1)
    total = cum[:, -1]
    idx = np.argmax(cum >= fraction * total[:, None], axis=1)
    return np.where(total > 0, idx * sample_rate / n_fft, 0.0)


def rasta_filter(log_bands: np.ndarray) -> np.ndarray:
    """RASTA band-pass along time (axis 0), started in steady state on the first frame."""
    zi = sps.lfilter_zi(RASTA_B, RASTA_A)
    out = np.empty_like(log_bands)
    for b in range(log_bands.shape[1]):
        col = log_bands[:, b]
        out[:, b], _ = sps.lfilter(RASTA_B, RASTA_A, col, zi=zi * col[0])
    return out


def log_hnr(frames, sample_rate: int) -> np.ndarray:
    """Harmonics-to-noise ratio in dB from the normalized autocorrelation peak, clamped to +/-100."""
    frames = _as_frames(frames)
    peaks = np.array([_f0_frame(f, sample_rate)[2] for f in frames])
    with np.errstate(divide="ignore"):
        hnr = 10.0 * np.log10(peaks) - 10.0 * np.log10(1.0 - peaks)
    hnr = np.where(peaks <= 0, -HNR_CLAMP_DB, hnr)
    return np.clip(np.nan_to_num(hnr, nan=-HNR_CLAMP_DB, posinf=HNR_CLAMP_DB), -HNR_CLAMP_DB, HNR_CLAMP_DB)


def extract_spectral_llds(windowed, sample_rate: int, raw_frames=None) -> list[LLDTrack]:
    """Rolloffs and RASTA bands from windowed frames; logHNR from raw frames.

    When `raw_frames` is omitted the windowed frames are used for HNR as well.
    """
    windowed = _as_frames(windowed)
    raw = windowed if raw_frames is None else _as_frames(raw_frames)
    rfilt = rasta_filter(np.log(np.maximum(auditory_bands(windowed, sample_rate), LOG_FLOOR)))
    return [
        LLDTrack(ROLLOFF25, spectral_rolloff(windowed, sample_rate, 0.25)),
        LLDTrack(ROLLOFF50, spectral_rolloff(windowed, sample_rate, 0.50)),
        LLDTrack("audSpec_Rfilt[0]", rfilt[:, 0]),
        LLDTrack("audSpec_Rfilt[1]", rfilt[:, 1]),
        LLDTrack("logHNR", log_hnr(raw, sample_rate)),
    ]


def extract_mfcc(windowed, sample_rate: int, n_coeffs: int = 13) -> list[LLDTrack]:
    """Orthonormal DCT-II of log mel-band power (26 bands)."""
    windowed = _as_frames(windowed)
    power = _magnitude_spectrum(windowed) ** 2
    bank = mel_filterbank(N_AUDITORY_BANDS, _nfft(windowed.shape[1]), sample_rate)
    logmel = np.log(np.maximum(power @ bank.T, LOG_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    return [LLDTrack(f"mfcc[{i}]", ceps[:, i]) for i in range(n_coeffs)]


def delta_track(track: LLDTrack) -> LLDTrack:
    """Symmetric first difference (x[t+1] - x[t-1]) / 2 with edge replication."""
    x = np.asarray(track.values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot take the delta of an empty track")
    padded = np.concatenate([x[:1], x, x[-1:]])
    return LLDTrack(track.lld_name, 0.5 * (padded[2:] - padded[:-2]), is_delta=True)


def _functionals(x: np.ndarray) -> list[float]:
    mean = float(np.mean(x))
    centered = x - mean
    std = float(np.sqrt(np.mean(centered * centered)))
    if std > 0 and std > 1e-12 * max(1.0, abs(mean)):
        z = centered / std
        skew = float(np.mean(z**3))
        kurt = float(np.mean(z**4) - 3.0)
    else:
        std, skew, kurt = (std if std > 0 else 0.0), 0.0, 0.0
    q = np.percentile(x, [25, 50, 75, 1, 99])
    lo, hi = float(np.min(x)), float(np.max(x))
    return [mean, std, skew, kurt, lo, hi, hi - lo, float(q[0]), float(q[1]), float(q[2]), float(q[3]), float(q[4])]


def apply_functionals(tracks: Iterable[LLDTrack]) -> FeatureVector:
    """Twelve functionals per track, in the order the tracks are given."""
    tracks = list(tracks)
    lengths = {len(t.values) for t in tracks}
    if len(lengths) != 1 or 0 in lengths:
        raise ValueError("all tracks must share one non-zero length")
    names, values = [], []
    for t in tracks:
        for fn, v in zip(FUNCTIONALS, _functionals(np.asarray(t.values, dtype=np.float64))):
            names.append(str(FeatureName(t.lld_name, t.is_delta, fn)))
            values.append(v)
    return FeatureVector(tuple(names), np.asarray(values))


def extract_llds(audio: AudioBuffer, cfg: FrameConfig | None = None) -> list[LLDTrack]:
    """All 20 base LLD tracks in canonical order."""
    cfg = cfg or FrameConfig()
    sr = audio.sample_rate
    raw = frame_signal(audio, cfg, apply_window=False)
    windowed = raw * cfg.window(raw.shape[1])[None, :]
    tracks = {}
    for t in extract_f0(raw, sr):
        tracks[t.lld_name] = t
    for t in extract_energy_llds(raw, sr, cfg.window_function):
        tracks[t.lld_name] = t
    for t in extract_spectral_llds(windowed, sr, raw_frames=raw):
        tracks[t.lld_name] = t
    for t in extract_mfcc(windowed, sr, n_coeffs=N_MFCC_FEATURES):
        tracks[t.lld_name] = t
    return [tracks[name] for name in LLD_NAMES]


def extract_features(audio: AudioBuffer, cfg: FrameConfig | None = None) -> FeatureVector:
    """Full 480-dimensional feature vector for one utterance."""
    base = extract_llds(audio, cfg)
    deltas = [delta_track(t) for t in base]
    return apply_functionals(base + deltas)


def read_wav(path, expected_rate: int | None = None) -> AudioBuffer:
    """Read a 16-bit PCM WAV file, averaging channels to mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getsampwidth() != 2 or wf.getcomptype() != "NONE":
                raise AudioError(f"{path}: only 16-bit PCM WAV is supported")
            n_channels = wf.getnchannels()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: {exc}") from exc
    if expected_rate is not None and rate != expected_rate:
        raise AudioError(f"{path}: sample rate {rate} Hz does not match expected {expected_rate} Hz")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if data.size == 0 or data.size % n_channels:
        raise AudioError(f"{path}: empty or truncated audio data")
    data = data.reshape(-1, n_channels).mean(axis=1)
    return AudioBuffer(data, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.tobytes())


def format_value(v: float) -> str:
    return f"{v:.9g}"


def write_feature_csv(path, utterance_ids: Sequence[str], names: Sequence[str], matrix: np.ndarray) -> None:
    """Feature matrix CSV: `utterance_id` then one column per feature, 9 significant digits."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", *names])
        for uid, row in zip(utterance_ids, matrix):
            w.writerow([uid, *(format_value(v) for v in row)])


def read_feature_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Inverse of write_feature_csv: (utterance_ids, feature_names, matrix)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "utterance_id":
        raise ValueError(f"{path}: feature CSV must start with an utterance_id column")
    names = rows[0][1:]
    ids = [r[0] for r in rows[1:]]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(ids), len(names))
    return ids, names, matrix
