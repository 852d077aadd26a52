"""Synthetic ICU cohort generation and canonical record layout.

A patient record is a single-channel PPG series at 40 Hz. Case records carry
an event time T and are laid out so the samples span exactly [T-25h, T-1h);
control records span the last 24 h of stay. Missing stretches are flagged in
a validity mask and zero-filled.

The waveform generator is parametric: each beat is the sum of two Gaussian
lobes (systolic + dicrotic) evaluated on an accumulated cardiac phase, with
slow heart-rate wander, beat-scale jitter, baseline wander, respiratory
modulation, and additive noise. Case signals get a monotone deterioration
ramp applied to amplitude, rate variability, and pulse morphology.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError

SAMPLE_RATE_HZ = 40
RETAIN_HOURS = 24
LEAD_HOURS = 1
SAMPLES_PER_HOUR = SAMPLE_RATE_HZ * 3600          # 144_000
RETAIN_SAMPLES = RETAIN_HOURS * SAMPLES_PER_HOUR  # 3_456_000
LEAD_SAMPLES = LEAD_HOURS * SAMPLES_PER_HOUR      # 144_000
# Event index of a canonical case record: samples cover [T-25h, T-1h), so T
# sits one lead-time past the end, 25 h past the start.
CANONICAL_EVENT_INDEX = RETAIN_SAMPLES + LEAD_SAMPLES  # 3_600_000

_FILE_MAGIC = b"PPGR"
_FILE_VERSION = 1


@dataclass
class PatientRecord:
    id: str
    label: int                      # 1 = case, 0 = control
    samples: np.ndarray             # float array, 40 Hz
    event_time: Optional[int] = None  # sample index of T (cases only)
    valid_mask: Optional[np.ndarray] = None  # False = originally missing
    meta: dict = field(default_factory=dict)
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise DataError(f"sample_rate_hz must be {SAMPLE_RATE_HZ}, got {self.sample_rate_hz}")
        self.samples = np.asarray(self.samples)
        if self.valid_mask is None:
            self.valid_mask = np.ones(len(self.samples), dtype=bool)
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if len(self.valid_mask) != len(self.samples):
            raise DataError("valid_mask length must match samples length")
        if self.label == 1 and self.event_time is None:
            raise DataError(f"case record {self.id!r} has no event_time")
        if self.label == 0 and self.event_time is not None:
            raise DataError(f"control record {self.id!r} must not carry an event_time")

    @property
    def is_case(self) -> bool:
        return self.label == 1

    def is_canonical(self) -> bool:
        """True if the record has the fixed 24 h layout used downstream."""
        if len(self.samples) != RETAIN_SAMPLES:
            return False
        if self.is_case and self.event_time != CANONICAL_EVENT_INDEX:
            return False
        return True


@dataclass
class CohortConfig:
    n_case: int = 10
    n_control: int = 50
    seed: int = 0
    duration_hours: float = float(RETAIN_HOURS)  # fixed at 24
    gap_rate: float = 0.05
    onset_hours_before_event: float = 24.0
    drift_strength: float = 1.0
    age_median: float = 63.0
    age_sd: float = 16.3

    def validate(self):
        if self.n_case <= 0 or self.n_control <= 0:
            raise ConfigError("patient counts must be positive")
        if self.duration_hours != RETAIN_HOURS:
            raise ConfigError(f"duration_hours is fixed at {RETAIN_HOURS}")
        if not (0.0 <= self.gap_rate < 0.5):
            raise ConfigError("gap_rate must be in [0, 0.5)")
        if self.onset_hours_before_event > RETAIN_HOURS:
            raise ConfigError("deterioration onset cannot exceed 24 h")
        if self.onset_hours_before_event <= 0:
            raise ConfigError("deterioration onset must be positive")
        if self.drift_strength < 0:
            raise ConfigError("drift_strength must be non-negative")


def _smooth_noise(rng: np.random.Generator, n: int, knot_spacing: int) -> np.ndarray:
    """Standard-normal noise at knots every `knot_spacing` samples, linearly
    interpolated to length n."""
    n_knots = n // knot_spacing + 2
    knots = rng.standard_normal(n_knots)
    x = np.arange(n, dtype=np.float64)
    xk = np.arange(n_knots, dtype=np.float64) * knot_spacing
    return np.interp(x, xk, knots)


def _deterioration_ramp(n: int, event_index: int, onset_hours: float) -> np.ndarray:
    """Monotone ramp in [0, 1]: zero until `onset_hours` before the event,
    rising toward 1 at the event. Square-root shaping front-loads the rise
    so separation appears within the first hours after onset."""
    idx = np.arange(n, dtype=np.float64)
    hours_before_event = (event_index - idx) / SAMPLES_PER_HOUR
    lam = (onset_hours - hours_before_event) / onset_hours
    np.clip(lam, 0.0, 1.0, out=lam)
    return np.sqrt(lam)


def synthesize_signal(rng: np.random.Generator, n_samples: int,
                      deterioration: Optional[np.ndarray] = None,
                      drift_strength: float = 1.0) -> np.ndarray:
    """One patient's raw PPG series (float64).

    `deterioration` is a per-sample ramp in [0, 1]; None means a stationary
    control-style signal. Both arms consume the identical draw sequence so
    that drift_strength == 0 leaves the arms distributionally identical.
    """
    n = int(n_samples)
    lam = np.zeros(n) if deterioration is None else deterioration
    s = float(drift_strength)

    hr_bpm = rng.uniform(50.0, 110.0)
    f0 = hr_bpm / 60.0
    amp0 = rng.uniform(0.9, 1.1)
    sys_center = rng.uniform(0.12, 0.18)
    sys_width = rng.uniform(0.045, 0.060)
    dic_center = rng.uniform(0.40, 0.50)
    dic_width = rng.uniform(0.08, 0.12)
    dic_ratio = rng.uniform(0.35, 0.55)
    resp_freq = rng.uniform(0.15, 0.35)
    resp_phase = rng.uniform(0.0, 2 * np.pi)

    slow = _smooth_noise(rng, n, 30 * SAMPLE_RATE_HZ)       # HR wander, ~30 s scale
    fast = _smooth_noise(rng, n, SAMPLE_RATE_HZ)            # beat-scale jitter, ~1 s
    amp_mod = _smooth_noise(rng, n, 10 * SAMPLE_RATE_HZ)
    wander = _smooth_noise(rng, n, 5 * SAMPLE_RATE_HZ)
    noise = rng.standard_normal(n)

    # Instantaneous rate: wander plus jitter whose spread grows with the ramp.
    jitter_sd = 0.02 * (1.0 + 10.0 * s * lam)
    freq = f0 * (1.0 + 0.03 * slow) * (1.0 + jitter_sd * fast)
    np.clip(freq, 0.3, 4.0, out=freq)
    phase = np.cumsum(freq) / SAMPLE_RATE_HZ
    p = np.mod(phase, 1.0)

    # Morphology: systolic lobe widens, dicrotic lobe collapses along the ramp
    # (collapse saturates at zero so oversized strengths stay physiological).
    w1 = sys_width * (1.0 + 1.2 * s * lam)
    ratio = dic_ratio * np.clip(1.0 - 0.9 * s * lam, 0.0, None)
    pulse = np.exp(-0.5 * ((p - sys_center) / w1) ** 2)
    pulse += ratio * np.exp(-0.5 * ((p - dic_center) / dic_width) ** 2)

    amp = amp0 * (1.0 + 0.05 * amp_mod) * np.clip(1.0 - 0.55 * s * lam, 0.05, None)
    baseline = 0.10 * amp0 * wander + 0.03 * np.sin(2 * np.pi * resp_freq *
                                                    np.arange(n) / SAMPLE_RATE_HZ + resp_phase)
    return amp * pulse + baseline + 0.03 * noise


def _insert_gaps(rng: np.random.Generator, n: int, gap_rate: float) -> np.ndarray:
    """Validity mask with roughly `gap_rate` of samples marked missing."""
    mask = np.ones(n, dtype=bool)
    if gap_rate <= 0:
        return mask
    target = gap_rate * n
    missing = 0
    while missing < target:
        dur = int(rng.uniform(30.0, 480.0) * SAMPLE_RATE_HZ)  # 30 s .. 8 min
        dur = min(dur, n)
        start = int(rng.integers(0, n - dur + 1))
        missing += int(mask[start:start + dur].sum())
        mask[start:start + dur] = False
    return mask


def synthesize_patient(config: CohortConfig, index: int, label: int) -> PatientRecord:
    """Deterministic single-patient synthesis; index is the cohort position."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    n = RETAIN_SAMPLES
    if label == 1:
        lam = _deterioration_ramp(n, CANONICAL_EVENT_INDEX, config.onset_hours_before_event)
        event_time = CANONICAL_EVENT_INDEX
        pid = f"case{index:04d}"
    else:
        lam = None
        event_time = None
        pid = f"ctrl{index:04d}"
    samples = synthesize_signal(rng, n, deterioration=lam, drift_strength=config.drift_strength)
    mask = _insert_gaps(rng, n, config.gap_rate)
    age = float(np.clip(rng.normal(config.age_median, config.age_sd), 18.0, 100.0))
    record = PatientRecord(id=pid, label=label, samples=samples,
                           event_time=event_time, valid_mask=mask,
                           meta={"age_years": age})
    return fill_gaps(record)


def synthesize_cohort(config: CohortConfig) -> list[PatientRecord]:
    """All patients of a cohort, cases first. Bit-reproducible for a seed."""
    config.validate()
    records = [synthesize_patient(config, i, 1) for i in range(config.n_case)]
    records += [synthesize_patient(config, config.n_case + j, 0)
                for j in range(config.n_control)]
    return records


def iter_cohort(config: CohortConfig):
    """Generator variant of synthesize_cohort for memory-bounded pipelines."""
    config.validate()
    for i in range(config.n_case):
        yield synthesize_patient(config, i, 1)
    for j in range(config.n_control):
        yield synthesize_patient(config, config.n_case + j, 0)


def fill_gaps(record: PatientRecord) -> PatientRecord:
    """Zero out every sample flagged missing; length unchanged."""
    samples = np.where(record.valid_mask, record.samples, 0.0)
    return replace(record, samples=samples, valid_mask=record.valid_mask.copy())


def mark_flat_invalid(record: PatientRecord, window_seconds: float = 5.0,
                      tol: float = 1e-6) -> PatientRecord:
    """Flag flat stretches (rolling std below tol over the window) as missing.

    Flatness is judged per full window; a stretch shorter than the window is
    kept. Returns a record with the mask tightened (samples untouched; run
    fill_gaps afterwards to zero them).
    """
    w = int(window_seconds * record.sample_rate_hz)
    x = np.asarray(record.samples, dtype=np.float64)
    n = len(x)
    if n < w or w < 2:
        return record
    c1 = np.cumsum(np.insert(x, 0, 0.0))
    c2 = np.cumsum(np.insert(x * x, 0, 0.0))
    s1 = c1[w:] - c1[:-w]
    s2 = c2[w:] - c2[:-w]
    var = np.maximum(s2 / w - (s1 / w) ** 2, 0.0)
    flat_start = np.sqrt(var) < tol          # window [i, i+w) is flat
    mask = record.valid_mask.copy()
    flagged = np.zeros(n, dtype=bool)
    idx = np.flatnonzero(flat_start)
    for i in idx:
        flagged[i:i + w] = True
    mask &= ~flagged
    return replace(record, valid_mask=mask)


def truncate_history(record: PatientRecord, allow_pad: bool = True) -> PatientRecord:
    """Cut a record to the canonical 24 h layout.

    Cases keep [T-25h, T-1h); controls keep the last 24 h. Shorter records
    are left-padded with invalid zeros when allow_pad, else rejected.
    """
    n = len(record.samples)
    if record.is_case:
        T = int(record.event_time)
        start = T - (RETAIN_SAMPLES + LEAD_SAMPLES)
        end = T - LEAD_SAMPLES
        if end > n:
            raise DataError(f"record {record.id!r}: data ends before T-1h")
        new_event = CANONICAL_EVENT_INDEX
    else:
        start = n - RETAIN_SAMPLES
        end = n
        new_event = None

    if start < 0:
        if not allow_pad:
            raise DataError(f"record {record.id!r}: shorter than 24 h and padding disabled")
        pad = -start
        samples = np.concatenate([np.zeros(pad, dtype=record.samples.dtype),
                                  record.samples[:end]])
        mask = np.concatenate([np.zeros(pad, dtype=bool), record.valid_mask[:end]])
    else:
        samples = record.samples[start:end].copy()
        mask = record.valid_mask[start:end].copy()

    return replace(record, samples=samples, valid_mask=mask, event_time=new_event)


# ---------------------------------------------------------------------------
# Persistence: one binary file per patient + a line-oriented manifest.
# ---------------------------------------------------------------------------

def save_patient(record: PatientRecord, path: Path) -> None:
    """Header, float32 LE samples, packed validity bits."""
    path = Path(path)
    id_bytes = record.id.encode("utf-8")
    n = len(record.samples)
    event = -1 if record.event_time is None else int(record.event_time)
    age = float(record.meta.get("age_years", 0.0))
    header = _FILE_MAGIC + struct.pack(
        "<IHB q Q I d", _FILE_VERSION, len(id_bytes), int(record.label),
        event, n, record.sample_rate_hz, age)
    with open(path, "wb") as f:
        f.write(header)
        f.write(id_bytes)
        f.write(np.asarray(record.samples, dtype="<f4").tobytes())
        f.write(np.packbits(record.valid_mask).tobytes())


def load_patient(path: Path) -> PatientRecord:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _FILE_MAGIC:
            raise DataError(f"{path}: not a patient file")
        version, id_len, label, event, n, rate, age = struct.unpack(
            "<IHB q Q I d", f.read(struct.calcsize("<IHB q Q I d")))
        if version != _FILE_VERSION:
            raise DataError(f"{path}: unsupported file version {version}")
        pid = f.read(id_len).decode("utf-8")
        samples = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64)
        mask_bytes = f.read((n + 7) // 8)
        mask = np.unpackbits(np.frombuffer(mask_bytes, dtype=np.uint8))[:n].astype(bool)
    return PatientRecord(id=pid, label=int(label), samples=samples,
                         event_time=None if event < 0 else int(event),
                         valid_mask=mask, meta={"age_years": age},
                         sample_rate_hz=int(rate))


def save_cohort(records, out_dir: Path) -> Path:
    """Persist each record and write the manifest. Returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "cohort_manifest.csv"
    with open(manifest, "w") as mf:
        mf.write("id,label,path\n")
        for rec in records:
            fname = f"{rec.id}.ppgr"
            save_patient(rec, out_dir / fname)
            mf.write(f"{rec.id},{rec.label},{fname}\n")
    return manifest


def load_manifest(manifest_path: Path) -> list[tuple[str, int, Path]]:
    manifest_path = Path(manifest_path)
    entries = []
    with open(manifest_path) as f:
        header = f.readline().strip()
        if header != "id,label,path":
            raise DataError(f"{manifest_path}: unexpected manifest header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            pid, label, rel = line.split(",")
            entries.append((pid, int(label), manifest_path.parent / rel))
    return entries


def iter_saved_cohort(manifest_path: Path):
    for _, _, path in load_manifest(manifest_path):
        yield load_patient(path)
