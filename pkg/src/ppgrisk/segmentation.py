"""Deterministic windowing: 30 s chunks, 1 s patches, training-window
sampling for the 1H/FH variants, and the 24-point hourly evaluation grid.

All windows are unions of whole chunks; starts snap to chunk boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import (LEAD_SAMPLES, RETAIN_SAMPLES, SAMPLE_RATE_HZ,
                     SAMPLES_PER_HOUR, PatientRecord)
from .errors import DataError

PATCH_SAMPLES = SAMPLE_RATE_HZ          # 1 s = 40 samples
PATCHES_PER_CHUNK = 30
CHUNK_SAMPLES = PATCH_SAMPLES * PATCHES_PER_CHUNK  # 30 s = 1200 samples
CHUNKS_PER_HOUR = SAMPLES_PER_HOUR // CHUNK_SAMPLES  # 120
CHUNKS_PER_RECORD = RETAIN_SAMPLES // CHUNK_SAMPLES  # 2880
EVAL_HOURS = 24

VARIANT_1H = "1H"
VARIANT_FH = "FH"


@dataclass(frozen=True)
class Chunk:
    samples: np.ndarray     # exactly 1200 samples
    patient_id: str
    start: int              # sample index within the record

    def __post_init__(self):
        if len(self.samples) != CHUNK_SAMPLES:
            raise DataError(f"chunk must have {CHUNK_SAMPLES} samples, got {len(self.samples)}")


@dataclass(frozen=True)
class WindowSpec:
    patient_id: str
    start: int
    end: int
    variant: str            # train_1h | train_fh | eval

    def __post_init__(self):
        if self.end <= self.start:
            raise DataError("window end must exceed start")
        if (self.end - self.start) % CHUNK_SAMPLES != 0:
            raise DataError("window length must be a whole number of chunks")

    @property
    def n_chunks(self) -> int:
        return (self.end - self.start) // CHUNK_SAMPLES

    @property
    def chunk_slice(self) -> slice:
        """Slice into the record's chunk grid (valid for chunk-aligned starts)."""
        return slice(self.start // CHUNK_SAMPLES, self.end // CHUNK_SAMPLES)


def chunk_signal(samples: np.ndarray, patient_id: str = "", offset: int = 0) -> list[Chunk]:
    """Non-overlapping 30 s chunks in order; trailing remainder dropped."""
    samples = np.asarray(samples)
    n = len(samples)
    if n < CHUNK_SAMPLES:
        raise DataError(f"series shorter than one chunk ({n} < {CHUNK_SAMPLES})")
    n_chunks = n // CHUNK_SAMPLES
    return [Chunk(samples[i * CHUNK_SAMPLES:(i + 1) * CHUNK_SAMPLES],
                  patient_id, offset + i * CHUNK_SAMPLES)
            for i in range(n_chunks)]


def chunk_array(samples: np.ndarray) -> np.ndarray:
    """Vectorized chunking: (n_chunks, 1200) view-copy, remainder dropped."""
    samples = np.asarray(samples)
    n_chunks = len(samples) // CHUNK_SAMPLES
    if n_chunks == 0:
        raise DataError("series shorter than one chunk")
    return samples[:n_chunks * CHUNK_SAMPLES].reshape(n_chunks, CHUNK_SAMPLES)


def patchify(chunk_samples: np.ndarray) -> np.ndarray:
    """(30, 40) contiguous patches whose concatenation reproduces the chunk."""
    chunk_samples = np.asarray(chunk_samples)
    if chunk_samples.shape[-1] != CHUNK_SAMPLES:
        raise DataError(f"expected {CHUNK_SAMPLES} samples, got {chunk_samples.shape[-1]}")
    return chunk_samples.reshape(*chunk_samples.shape[:-1], PATCHES_PER_CHUNK, PATCH_SAMPLES)


def _require_canonical(record: PatientRecord):
    if not record.is_canonical():
        raise DataError(f"record {record.id!r} is not in the canonical 24 h layout")


def sample_chunk_window(n_chunks: int, variant: str,
                        rng: np.random.Generator) -> tuple[int, int]:
    """Chunk-index bounds [start, end) of one training window on an
    n_chunks-long grid, uniform over admissible positions.

    1H: a fixed 1 h stretch anywhere inside the grid.
    FH: everything up to a random anchor (at least one chunk).
    """
    if variant == VARIANT_1H:
        if n_chunks < CHUNKS_PER_HOUR:
            raise DataError(f"grid of {n_chunks} chunks is shorter than 1 h")
        start = int(rng.integers(0, n_chunks - CHUNKS_PER_HOUR + 1))
        return start, start + CHUNKS_PER_HOUR
    if variant == VARIANT_FH:
        return 0, int(rng.integers(1, n_chunks + 1))
    raise DataError(f"unknown variant {variant!r}")


def sample_train_window(record: PatientRecord, variant: str,
                        rng: np.random.Generator) -> WindowSpec:
    """One training window on a canonical record, chunk-aligned."""
    _require_canonical(record)
    start_chunk, end_chunk = sample_chunk_window(CHUNKS_PER_RECORD, variant, rng)
    tag = "train_1h" if variant == VARIANT_1H else "train_fh"
    return WindowSpec(record.id, start_chunk * CHUNK_SAMPLES,
                      end_chunk * CHUNK_SAMPLES, tag)


def eval_chunk_bounds(variant: str) -> list[tuple[int, int, int]]:
    """(hour, start_chunk, end_chunk) for the 24 alarm times, T-24 .. T-1.

    The canonical grid ends 1 h before the event, so at evaluation time T-i
    the window closes (i-1) hours from the end. 1H keeps the latest hour,
    FH all history from admission.
    """
    if variant not in (VARIANT_1H, VARIANT_FH):
        raise DataError(f"unknown variant {variant!r}")
    bounds = []
    for i in range(EVAL_HOURS, 0, -1):
        end = CHUNKS_PER_RECORD - (i - 1) * CHUNKS_PER_HOUR
        start = end - CHUNKS_PER_HOUR if variant == VARIANT_1H else 0
        bounds.append((i, start, end))
    return bounds


def eval_windows(record: PatientRecord, variant: str) -> list[WindowSpec]:
    """The 24 hourly alarm windows of a canonical record, ordered T-24 .. T-1."""
    _require_canonical(record)
    return [WindowSpec(record.id, start * CHUNK_SAMPLES, end * CHUNK_SAMPLES, "eval")
            for _, start, end in eval_chunk_bounds(variant)]


def eval_hours() -> list[int]:
    """Hour indices in report order: 24, 23, ..., 1 (hours before the event)."""
    return list(range(EVAL_HOURS, 0, -1))
