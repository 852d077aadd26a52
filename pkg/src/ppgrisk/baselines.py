"""Non-learned per-chunk features for comparison runs: random, morphological,
and short-time Fourier features. All plug into the same aggregator contract
as transformer embeddings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .segmentation import CHUNK_SAMPLES, PATCH_SAMPLES
from .cohort import SAMPLE_RATE_HZ
from .errors import DataError

RANDOM_DIM = 16
STFT_FRAME = 2 * SAMPLE_RATE_HZ   # 2 s = 80 samples
STFT_HOP = SAMPLE_RATE_HZ         # 1 s = 40 samples
STFT_MAX_FREQ_HZ = 10.0
PEAK_REFRACTORY_S = 0.3
MORPH_NAMES = ("rate_hz", "peak_amp_mean", "peak_amp_std",
               "pulse_width_s", "peak_to_notch_s", "sdptg_ba_ratio")
MORPH_DIM = 2 * len(MORPH_NAMES)  # values + validity flags


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    family: str

    @property
    def dim(self) -> int:
        return len(self.values)


def _check_chunk(chunk: np.ndarray) -> np.ndarray:
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape != (CHUNK_SAMPLES,):
        raise DataError(f"expected a {CHUNK_SAMPLES}-sample chunk, got {chunk.shape}")
    return chunk


def _origin_rng(seed: int, patient_id: str, start: int) -> np.random.Generator:
    digest = hashlib.blake2b(f"{patient_id}:{start}".encode(), digest_size=8).digest()
    key = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def random_features(chunk: np.ndarray, seed: int, patient_id: str = "",
                    start: int = 0, dim: int = RANDOM_DIM) -> FeatureVector:
    """Label-independent random vector, fixed for a (seed, chunk origin)."""
    _check_chunk(chunk)
    rng = _origin_rng(seed, patient_id, start)
    return FeatureVector(rng.standard_normal(dim), "random")


# ---------------------------------------------------------------------------
# Morphological features
# ---------------------------------------------------------------------------

def detect_peaks(chunk: np.ndarray, fs: int = SAMPLE_RATE_HZ) -> np.ndarray:
    """Systolic-peak candidates: local maxima above median + 3*MAD, with a
    0.3 s refractory window keeping the taller peak."""
    x = np.asarray(chunk, dtype=np.float64)
    med = np.median(x)
    mad = np.median(np.abs(x - med))
    threshold = med + 3.0 * mad
    interior = x[1:-1]
    is_max = (interior > x[:-2]) & (interior >= x[2:]) & (interior > threshold)
    candidates = np.flatnonzero(is_max) + 1
    if len(candidates) == 0:
        return candidates
    refractory = int(PEAK_REFRACTORY_S * fs)
    kept: list[int] = []
    for idx in candidates:
        if kept and idx - kept[-1] < refractory:
            if x[idx] > x[kept[-1]]:
                kept[-1] = int(idx)
        else:
            kept.append(int(idx))
    return np.asarray(kept, dtype=int)


def _pulse_width_half_height(x: np.ndarray, peak: int, baseline: float,
                             fs: int) -> float | None:
    half = baseline + 0.5 * (x[peak] - baseline)
    left = peak
    while left > 0 and x[left] > half:
        left -= 1
    right = peak
    while right < len(x) - 1 and x[right] > half:
        right += 1
    if left == 0 or right == len(x) - 1:
        return None
    return (right - left) / fs


def _notch_interval(x: np.ndarray, peak: int, fs: int) -> float | None:
    """First local minimum after the systolic peak, within 0.4 s."""
    horizon = min(len(x) - 1, peak + int(0.4 * fs))
    for i in range(peak + 1, horizon):
        if x[i] <= x[i - 1] and x[i] < x[i + 1]:
            return (i - peak) / fs
    return None


def _sdptg_ba_ratio(x: np.ndarray, peak: int, fs: int) -> float | None:
    """b/a ratio of the second derivative around the upstroke: a = early
    maximum, b = the minimum that follows it."""
    d2 = np.gradient(np.gradient(x))
    lo = max(0, peak - int(0.3 * fs))
    hi = min(len(x), peak + int(0.3 * fs))
    window = d2[lo:hi]
    if len(window) < 3:
        return None
    a_idx = int(np.argmax(window))
    if a_idx >= len(window) - 1 or window[a_idx] <= 0:
        return None
    b = float(np.min(window[a_idx + 1:]))
    a = float(window[a_idx])
    return b / a


def morph_features(chunk: np.ndarray, fs: int = SAMPLE_RATE_HZ) -> FeatureVector:
    """Fixed-order morphology vector plus per-feature validity flags.

    Features undetectable on the chunk (no peaks, clipped widths, flat
    second derivative) are reported as 0 with their flag cleared; an
    all-zero gap chunk yields the all-zero vector.
    """
    x = _check_chunk(chunk)
    values = np.zeros(len(MORPH_NAMES))
    valid = np.zeros(len(MORPH_NAMES))
    peaks = detect_peaks(x, fs)
    if len(peaks) >= 1:
        baseline = float(np.median(x))
        amps = x[peaks] - baseline
        values[1], valid[1] = float(np.mean(amps)), 1.0
        if len(peaks) >= 2:
            values[0] = (len(peaks) - 1) / ((peaks[-1] - peaks[0]) / fs)
            valid[0] = 1.0
            values[2], valid[2] = float(np.std(amps)), 1.0
        widths = [w for p in peaks
                  if (w := _pulse_width_half_height(x, p, baseline, fs)) is not None]
        if widths:
            values[3], valid[3] = float(np.mean(widths)), 1.0
        notches = [d for p in peaks if (d := _notch_interval(x, p, fs)) is not None]
        if notches:
            values[4], valid[4] = float(np.mean(notches)), 1.0
        ratios = [r for p in peaks if (r := _sdptg_ba_ratio(x, p, fs)) is not None]
        if ratios:
            values[5], valid[5] = float(np.mean(ratios)), 1.0
    return FeatureVector(np.concatenate([values, valid]), "morph")


# ---------------------------------------------------------------------------
# STFT features
# ---------------------------------------------------------------------------

def stft_magnitudes(chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed magnitude spectrogram of a chunk.

    Returns (magnitudes (n_frames, n_bins), bin_freqs_hz) over all rfft bins;
    frame 2 s, hop 1 s.
    """
    x = _check_chunk(chunk)
    window = np.hanning(STFT_FRAME)
    starts = np.arange(0, CHUNK_SAMPLES - STFT_FRAME + 1, STFT_HOP)
    frames = np.stack([x[s:s + STFT_FRAME] * window for s in starts])
    spec = np.abs(np.fft.rfft(frames, axis=1))
    freqs = np.fft.rfftfreq(STFT_FRAME, d=1.0 / SAMPLE_RATE_HZ)
    return spec, freqs


def stft_features(chunk: np.ndarray) -> FeatureVector:
    """Mean and std of magnitude over frames, per bin up to 10 Hz, flattened
    as [means..., stds...]."""
    spec, freqs = stft_magnitudes(chunk)
    keep = freqs <= STFT_MAX_FREQ_HZ
    sub = spec[:, keep]
    return FeatureVector(np.concatenate([sub.mean(axis=0), sub.std(axis=0)]), "stft")


def stft_bin_freqs() -> np.ndarray:
    freqs = np.fft.rfftfreq(STFT_FRAME, d=1.0 / SAMPLE_RATE_HZ)
    return freqs[freqs <= STFT_MAX_FREQ_HZ]


def feature_dim(family: str) -> int:
    if family == "random":
        return RANDOM_DIM
    if family == "morph":
        return MORPH_DIM
    if family == "stft":
        return 2 * len(stft_bin_freqs())
    raise DataError(f"unknown feature family {family!r}")
