"""Synthetic cohort generation: record validation, determinism, canonical
layout, gap handling, truncation, and on-disk round-trips."""

import numpy as np
import pytest
from scipy import stats

from ppgrisk.cohort import (
    CANONICAL_EVENT_INDEX,
    LEAD_SAMPLES,
    RETAIN_SAMPLES,
    SAMPLES_PER_HOUR,
    CohortConfig,
    PatientRecord,
    fill_gaps,
    iter_saved_cohort,
    load_manifest,
    load_patient,
    mark_flat_invalid,
    save_cohort,
    save_patient,
    synthesize_cohort,
    synthesize_patient,
    truncate_history,
)
from ppgrisk.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def small_cohort():
    config = CohortConfig(n_case=2, n_control=3, seed=42)
    return synthesize_cohort(config)


class TestPatientRecord:
    def test_case_requires_event_time(self):
        with pytest.raises(DataError):
            PatientRecord(id="c", label=1, samples=np.zeros(100))

    def test_control_rejects_event_time(self):
        with pytest.raises(DataError):
            PatientRecord(id="k", label=0, samples=np.zeros(100), event_time=50)

    def test_mask_length_must_match(self):
        with pytest.raises(DataError):
            PatientRecord(id="k", label=0, samples=np.zeros(100),
                          valid_mask=np.ones(99, dtype=bool))

    def test_default_mask_all_valid(self):
        rec = PatientRecord(id="k", label=0, samples=np.zeros(100))
        assert rec.valid_mask.all()

    def test_is_canonical(self):
        rec = PatientRecord(id="k", label=0, samples=np.zeros(RETAIN_SAMPLES))
        assert rec.is_canonical()
        rec = PatientRecord(id="c", label=1, samples=np.zeros(RETAIN_SAMPLES),
                            event_time=CANONICAL_EVENT_INDEX)
        assert rec.is_canonical()
        rec = PatientRecord(id="c", label=1, samples=np.zeros(RETAIN_SAMPLES),
                            event_time=CANONICAL_EVENT_INDEX + 1)
        assert not rec.is_canonical()


class TestConfigValidation:
    def test_defaults_pass(self):
        CohortConfig().validate()

    @pytest.mark.parametrize("kwargs", [
        {"n_case": 0},
        {"n_control": -1},
        {"duration_hours": 12.0},
        {"gap_rate": 0.5},
        {"gap_rate": -0.1},
        {"onset_hours_before_event": 25.0},
        {"onset_hours_before_event": 0.0},
        {"drift_strength": -1.0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            CohortConfig(**kwargs).validate()


class TestSynthesis:
    def test_canonical_layout(self, small_cohort):
        for rec in small_cohort:
            assert len(rec.samples) == RETAIN_SAMPLES
            assert rec.is_canonical()
        cases = [r for r in small_cohort if r.label == 1]
        assert len(cases) == 2
        for rec in cases:
            # retained data ends one lead-time hour before the event
            assert rec.event_time - len(rec.samples) == LEAD_SAMPLES

    def test_deterministic_for_seed(self):
        config = CohortConfig(n_case=1, n_control=1, seed=7)
        a = synthesize_patient(config, 0, 1)
        b = synthesize_patient(config, 0, 1)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.valid_mask, b.valid_mask)
        assert a.meta == b.meta

    def test_patients_differ_within_cohort(self, small_cohort):
        a, b = small_cohort[2], small_cohort[3]
        assert not np.array_equal(a.samples, b.samples)

    def test_gaps_zero_filled_at_requested_rate(self, small_cohort):
        for rec in small_cohort:
            missing = ~rec.valid_mask
            frac = missing.mean()
            assert 0.04 <= frac <= 0.15  # target 0.05, overshoot allowed per gap
            np.testing.assert_array_equal(rec.samples[missing], 0.0)

    def test_signal_scale_is_physiological_order(self, small_cohort):
        for rec in small_cohort:
            valid = rec.samples[rec.valid_mask]
            assert 0.1 < valid.std() < 2.0
            assert np.isfinite(valid).all()

    def test_age_metadata_present(self, small_cohort):
        ages = [r.meta["age_years"] for r in small_cohort]
        assert all(18.0 <= a <= 100.0 for a in ages)

    def test_zero_drift_removes_case_control_separation(self):
        # With drift_strength 0, case and control signals come from the same
        # generating process: a rank test on per-record summary features
        # should not reject; at the default strength it clearly does.
        n = 6
        controls = [synthesize_patient(
            CohortConfig(n_case=n, n_control=n, seed=9, gap_rate=0.0), n + j, 0)
            for j in range(n)]

        def last_hour_amplitude(rec):
            tail = rec.samples[-SAMPLES_PER_HOUR:]
            return float(np.percentile(tail, 95) - np.percentile(tail, 5))

        ctrl_feat = [last_hour_amplitude(r) for r in controls]
        for drift, should_reject in ((0.0, False), (1.0, True)):
            config = CohortConfig(n_case=n, n_control=n, seed=9,
                                  gap_rate=0.0, drift_strength=drift)
            case_feat = [last_hour_amplitude(synthesize_patient(config, i, 1))
                         for i in range(n)]
            p = stats.mannwhitneyu(case_feat, ctrl_feat).pvalue
            if should_reject:
                assert p < 0.01, f"drift={drift}: expected separation, p={p}"
            else:
                assert p >= 0.01, f"drift={drift}: expected no separation, p={p}"


class TestGapsAndFlats:
    def test_fill_gaps_zeroes_invalid(self):
        samples = np.ones(100)
        mask = np.ones(100, dtype=bool)
        mask[10:20] = False
        rec = PatientRecord(id="k", label=0, samples=samples, valid_mask=mask)
        filled = fill_gaps(rec)
        np.testing.assert_array_equal(filled.samples[10:20], 0.0)
        np.testing.assert_array_equal(filled.samples[:10], 1.0)

    def test_mark_flat_invalid_flags_constant_run(self):
        rng = np.random.default_rng(3)
        samples = rng.normal(size=4000)
        samples[1000:1600] = 0.73  # 15 s constant stretch
        rec = PatientRecord(id="k", label=0, samples=samples)
        marked = mark_flat_invalid(rec)
        assert not marked.valid_mask[1100:1500].any()
        assert marked.valid_mask[:900].all()
        assert marked.valid_mask[1700:].all()

    def test_mark_flat_invalid_keeps_short_flats(self):
        rng = np.random.default_rng(4)
        samples = rng.normal(size=4000)
        samples[1000:1080] = 0.5  # 2 s < the 5 s window
        rec = PatientRecord(id="k", label=0, samples=samples)
        marked = mark_flat_invalid(rec)
        assert marked.valid_mask.all()


class TestTruncateHistory:
    def test_case_keeps_window_before_lead_time(self):
        n = RETAIN_SAMPLES + 3 * SAMPLES_PER_HOUR
        samples = np.arange(n, dtype=np.float64)
        T = n - SAMPLES_PER_HOUR  # event one hour before the recording ends
        rec = PatientRecord(id="c", label=1, samples=samples, event_time=T)
        out = truncate_history(rec)
        assert len(out.samples) == RETAIN_SAMPLES
        assert out.event_time == CANONICAL_EVENT_INDEX
        # window is [T-25h, T-1h)
        assert out.samples[0] == T - RETAIN_SAMPLES - LEAD_SAMPLES
        assert out.samples[-1] == T - LEAD_SAMPLES - 1

    def test_control_keeps_last_24h(self):
        n = RETAIN_SAMPLES + 12345
        samples = np.arange(n, dtype=np.float64)
        rec = PatientRecord(id="k", label=0, samples=samples)
        out = truncate_history(rec)
        assert len(out.samples) == RETAIN_SAMPLES
        assert out.samples[-1] == n - 1

    def test_short_record_left_padded_invalid(self):
        n = RETAIN_SAMPLES // 2
        rec = PatientRecord(id="k", label=0, samples=np.ones(n))
        out = truncate_history(rec)
        assert len(out.samples) == RETAIN_SAMPLES
        pad = RETAIN_SAMPLES - n
        assert not out.valid_mask[:pad].any()
        np.testing.assert_array_equal(out.samples[:pad], 0.0)
        assert out.valid_mask[pad:].all()

    def test_short_record_rejected_without_padding(self):
        rec = PatientRecord(id="k", label=0, samples=np.ones(100))
        with pytest.raises(DataError):
            truncate_history(rec, allow_pad=False)

    def test_case_data_ending_before_lead_rejected(self):
        samples = np.ones(1000)
        rec = PatientRecord(id="c", label=1, samples=samples,
                            event_time=1000 + LEAD_SAMPLES + 1)
        with pytest.raises(DataError):
            truncate_history(rec)


class TestPersistence:
    def test_roundtrip_is_float32_exact(self, small_cohort, tmp_path):
        rec = small_cohort[0]
        path = tmp_path / "one.ppgr"
        save_patient(rec, path)
        back = load_patient(path)
        assert back.id == rec.id
        assert back.label == rec.label
        assert back.event_time == rec.event_time
        assert back.meta["age_years"] == rec.meta["age_years"]
        # storage is float32; loading upcasts losslessly from that
        np.testing.assert_array_equal(
            back.samples, rec.samples.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(back.valid_mask, rec.valid_mask)

    def test_second_roundtrip_bit_identical(self, small_cohort, tmp_path):
        rec = small_cohort[1]
        p1, p2 = tmp_path / "a.ppgr", tmp_path / "b.ppgr"
        save_patient(rec, p1)
        save_patient(load_patient(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_manifest_roundtrip(self, small_cohort, tmp_path):
        manifest = save_cohort(small_cohort, tmp_path / "cohort")
        entries = load_manifest(manifest)
        assert [(e[0], e[1]) for e in entries] == \
            [(r.id, r.label) for r in small_cohort]
        loaded = list(iter_saved_cohort(manifest))
        assert [r.id for r in loaded] == [r.id for r in small_cohort]
        assert all(r.is_canonical() for r in loaded)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ppgr"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataError):
            load_patient(path)

    def test_bad_manifest_header_rejected(self, tmp_path):
        path = tmp_path / "cohort_manifest.csv"
        path.write_text("id;label;path\n")
        with pytest.raises(DataError):
            load_manifest(path)
