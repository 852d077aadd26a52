"""Causal patch transformer: config validation, causality, next-patch
pretraining behavior, chunk embedding, and checkpoint round-trips."""

import numpy as np
import pytest
import torch

from ppgrisk.errors import ConfigError, DataError
from ppgrisk.extractor import (
    SIZE_PRESETS,
    ExtractorConfig,
    PatchTransformer,
    chunks_to_patches,
    copy_last_patch_baseline,
    embed_chunk,
    embed_chunks,
    embed_window,
    load_extractor,
    next_patch_loss,
    pretrain_step,
    save_extractor,
    standardize_chunks,
    weights_digest,
)
from ppgrisk.segmentation import CHUNK_SAMPLES, PATCH_SAMPLES, PATCHES_PER_CHUNK


def tiny_config(**overrides):
    return ExtractorConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, **overrides)


@pytest.fixture(scope="module")
def tiny_model():
    return PatchTransformer(tiny_config(), seed=0)


def random_patches(n, seed, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(n, PATCHES_PER_CHUNK, PATCH_SAMPLES,
                       dtype=dtype, generator=gen)


class TestConfig:
    def test_presets_are_valid(self):
        for tag in SIZE_PRESETS:
            cfg = ExtractorConfig.from_size_tag(tag)
            cfg.validate()
            assert cfg.size_tag == tag

    def test_unknown_tag(self):
        with pytest.raises(ConfigError):
            ExtractorConfig.from_size_tag("huge-19M")

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ExtractorConfig(d_model=30, n_heads=4).validate()

    def test_patch_layout_is_fixed(self):
        with pytest.raises(ConfigError):
            ExtractorConfig(patch_size=50).validate()

    def test_size_ladder_parameter_counts(self):
        # the ladder tags promise an order of magnitude, not an exact count
        for tag, approx in (("tiny-0.05M", 0.05e6), ("small-0.2M", 0.2e6),
                            ("base-0.8M", 0.8e6)):
            model = PatchTransformer(ExtractorConfig.from_size_tag(tag))
            assert 0.5 * approx < model.n_params() < 2.0 * approx


class TestStandardization:
    def test_zscore_per_chunk(self):
        rng = np.random.default_rng(0)
        chunks = rng.normal(3.0, 5.0, size=(4, CHUNK_SAMPLES))
        z = standardize_chunks(chunks)
        np.testing.assert_allclose(z.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=-1), 1.0, atol=1e-12)

    def test_zero_gap_chunk_maps_to_zero(self):
        z = standardize_chunks(np.zeros((1, CHUNK_SAMPLES)))
        np.testing.assert_array_equal(z, 0.0)

    def test_chunks_to_patches_shape(self):
        rng = np.random.default_rng(1)
        t = chunks_to_patches(rng.normal(size=(5, CHUNK_SAMPLES)))
        assert t.shape == (5, PATCHES_PER_CHUNK, PATCH_SAMPLES)
        assert t.dtype == torch.float32


class TestForward:
    def test_output_shapes(self, tiny_model):
        patches = random_patches(3, seed=0)
        hidden, preds = tiny_model(patches)
        assert hidden.shape == (3, PATCHES_PER_CHUNK, 8)
        assert preds.shape == (3, PATCHES_PER_CHUNK, PATCH_SAMPLES)

    def test_shape_mismatch_rejected(self, tiny_model):
        with pytest.raises(DataError):
            tiny_model(torch.zeros(1, 29, 40))
        with pytest.raises(DataError):
            tiny_model(torch.zeros(2, 40))

    def test_causality_every_position(self, tiny_model):
        # outputs at position t must ignore patches > t
        base = random_patches(1, seed=10)
        with torch.no_grad():
            h0, p0 = tiny_model(base)
        rng = np.random.default_rng(11)
        for t in range(PATCHES_PER_CHUNK):
            bumped = base.clone()
            bumped[0, t] += torch.as_tensor(
                rng.normal(size=PATCH_SAMPLES), dtype=torch.float32)
            with torch.no_grad():
                h1, p1 = tiny_model(bumped)
            if t > 0:
                torch.testing.assert_close(h1[0, :t], h0[0, :t],
                                           rtol=0.0, atol=0.0)
                torch.testing.assert_close(p1[0, :t], p0[0, :t],
                                           rtol=0.0, atol=0.0)
            # ... and generically does affect the position itself
            assert not torch.equal(h1[0, t], h0[0, t])

    def test_deterministic_inference(self, tiny_model):
        patches = random_patches(2, seed=12)
        with torch.no_grad():
            a = tiny_model(patches)
            b = tiny_model(patches)
        torch.testing.assert_close(a[0], b[0], rtol=0.0, atol=0.0)
        torch.testing.assert_close(a[1], b[1], rtol=0.0, atol=0.0)

    def test_seeded_init_reproducible(self):
        a = PatchTransformer(tiny_config(), seed=5)
        b = PatchTransformer(tiny_config(), seed=5)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            torch.testing.assert_close(pa, pb, rtol=0.0, atol=0.0)


class TestPretraining:
    def test_next_patch_loss_matches_manual_mse(self):
        preds = random_patches(2, seed=20)
        patches = random_patches(2, seed=21)
        loss = next_patch_loss(preds, patches)
        manual = ((preds[:, :-1] - patches[:, 1:]) ** 2).mean()
        torch.testing.assert_close(loss, manual)

    def test_untrained_loss_near_signal_second_moment(self, tiny_model):
        # near-zero init weights emit ~0, so MSE ~ E[x^2] of the target
        patches = random_patches(8, seed=22)
        with torch.no_grad():
            _, preds = tiny_model(patches)
            loss = next_patch_loss(preds, patches).item()
        second_moment = (patches[:, 1:] ** 2).mean().item()
        assert 0.5 * second_moment < loss < 2.0 * second_moment

    def test_zero_batch_loss_collapses(self):
        model = PatchTransformer(tiny_config(), seed=1)
        patches = torch.zeros(4, PATCHES_PER_CHUNK, PATCH_SAMPLES)
        opt = torch.optim.Adam(model.parameters(), lr=1e-2)
        first = pretrain_step(model, patches, opt)
        for _ in range(60):
            last = pretrain_step(model, patches, opt)
        assert last < 0.01 * first

    def test_copy_last_baseline(self):
        patches = random_patches(4, seed=23)
        base = copy_last_patch_baseline(patches)
        manual = ((patches[:, :-1] - patches[:, 1:]) ** 2).mean().item()
        assert base == pytest.approx(manual, rel=1e-6)


class TestEmbedding:
    def test_embed_chunk_shape_and_determinism(self, tiny_model):
        rng = np.random.default_rng(30)
        chunk = rng.normal(size=CHUNK_SAMPLES)
        a = embed_chunk(tiny_model, chunk)
        b = embed_chunk(tiny_model, chunk)
        assert a.shape == (8,)
        np.testing.assert_array_equal(a, b)

    def test_golden_zero_chunk_embedding(self, tiny_model):
        # fixed reference recorded at first run (seed-0 weights, zero input)
        golden = np.array([-0.62996221, -1.02540016, -0.31078109, 0.78426927,
                           2.25789165, -0.70388228, -0.04538048, -0.32675484])
        emb = embed_chunk(tiny_model, np.zeros(CHUNK_SAMPLES))
        np.testing.assert_allclose(emb, golden, atol=1e-6)

    def test_embedding_sees_the_whole_chunk(self, tiny_model):
        rng = np.random.default_rng(31)
        chunk = rng.normal(size=CHUNK_SAMPLES)
        bumped = chunk.copy()
        bumped[:PATCH_SAMPLES] += 1.0  # perturb patch 0 only
        a = embed_chunk(tiny_model, chunk)
        b = embed_chunk(tiny_model, bumped)
        assert not np.array_equal(a, b)

    def test_embed_window_rows_independent(self, tiny_model):
        rng = np.random.default_rng(32)
        window = rng.normal(size=8 * CHUNK_SAMPLES)
        base = embed_window(tiny_model, window)
        assert base.shape == (8, 8)
        assert base.dtype == np.float32
        swapped = window.copy()
        swapped[5 * CHUNK_SAMPLES:6 * CHUNK_SAMPLES] = rng.normal(size=CHUNK_SAMPLES)
        out = embed_window(tiny_model, swapped)
        changed = [i for i in range(8) if not np.array_equal(out[i], base[i])]
        assert changed == [5]

    def test_embed_window_matches_per_chunk_map(self, tiny_model):
        rng = np.random.default_rng(33)
        window = rng.normal(size=4 * CHUNK_SAMPLES)
        rows = embed_window(tiny_model, window)
        for i in range(4):
            chunk = window[i * CHUNK_SAMPLES:(i + 1) * CHUNK_SAMPLES]
            np.testing.assert_allclose(rows[i], embed_chunk(tiny_model, chunk),
                                       atol=1e-7)

    def test_batch_size_does_not_change_result(self, tiny_model):
        rng = np.random.default_rng(34)
        chunks = rng.normal(size=(10, CHUNK_SAMPLES))
        a = embed_chunks(tiny_model, chunks, batch_size=3)
        b = embed_chunks(tiny_model, chunks, batch_size=100)
        np.testing.assert_array_equal(a, b)

    def test_empty_window_rejected(self, tiny_model):
        with pytest.raises(DataError):
            embed_chunks(tiny_model, np.zeros((0, CHUNK_SAMPLES)))


class TestCheckpoint:
    def test_roundtrip_bit_identical_outputs(self, tiny_model, tmp_path):
        path = tmp_path / "extractor.npz"
        save_extractor(tiny_model, path)
        back = load_extractor(path)
        assert back.config == tiny_model.config
        patches = random_patches(2, seed=40)
        with torch.no_grad():
            h0, p0 = tiny_model(patches)
            h1, p1 = back(patches)
        torch.testing.assert_close(h0, h1, rtol=0.0, atol=0.0)
        torch.testing.assert_close(p0, p1, rtol=0.0, atol=0.0)

    def test_digest_tracks_weights(self, tmp_path):
        model = PatchTransformer(tiny_config(), seed=3)
        d0 = weights_digest(model)
        assert d0 == weights_digest(model)
        path = tmp_path / "ck.npz"
        save_extractor(model, path)
        assert weights_digest(load_extractor(path)) == d0
        with torch.no_grad():
            model.patch_out.bias += 1e-3
        assert weights_digest(model) != d0
