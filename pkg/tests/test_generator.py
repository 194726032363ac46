import numpy as np
import pytest

from motok.autodiff import Tensor
from motok.conditioning import ConditionSet, CurriculumConfig, build_stage
from motok.generator import (
    DecodeConfig,
    GenConfig,
    GeneratorModel,
    GeneratorError,
    apply_consistent_mask,
    generate,
    load_generator,
    masked_ce_loss,
    sample_mask_ratio,
    save_generator,
    train_generator,
)

TINY = GenConfig(width=16, depth=1, heads=2, ff_hidden=32, streams=3,
                 codebook=8, max_len=64, text_width=6, audio_width=2, seed=0)


@pytest.fixture(scope="module")
def model():
    return GeneratorModel(TINY)


class TestConfig:
    def test_mask_id_is_codebook_size(self):
        assert TINY.mask_id == 8
        assert TINY.vocab == 9

    def test_unknown_strategy_rejected(self):
        with pytest.raises(GeneratorError, match="unknown decode strategy"):
            DecodeConfig(strategy="greedy")

    def test_bad_iterations_rejected(self):
        with pytest.raises(GeneratorError):
            DecodeConfig(iterations=0)


class TestConsistentMask:
    RNG = np.random.default_rng(0)

    def test_full_mask(self):
        tokens = self.RNG.integers(0, 8, size=(2, 3, 10))
        b = apply_consistent_mask(tokens, 1.0, 8, self.RNG)
        assert (b.tokens == 8).all()
        assert b.mask_positions.all()

    def test_empty_mask(self):
        tokens = self.RNG.integers(0, 8, size=(2, 3, 10))
        b = apply_consistent_mask(tokens, 0.0, 8, self.RNG)
        np.testing.assert_array_equal(b.tokens, tokens)
        assert not b.mask_positions.any()

    def test_consistency_across_streams(self):
        tokens = self.RNG.integers(0, 8, size=(4, 3, 12))
        b = apply_consistent_mask(tokens, 0.4, 8, self.RNG)
        masked = b.tokens == 8
        for v in range(3):
            np.testing.assert_array_equal(masked[:, v], b.mask_positions)

    def test_count_is_ceil(self):
        tokens = self.RNG.integers(0, 8, size=(1, 3, 10))
        b = apply_consistent_mask(tokens, 0.25, 8, self.RNG)
        assert b.mask_positions.sum() == 3  # ceil(0.25 * 10)

    def test_out_of_range_ratio_rejected(self):
        tokens = np.zeros((1, 3, 4), dtype=np.int64)
        with pytest.raises(GeneratorError, match="ratio"):
            apply_consistent_mask(tokens, 1.5, 8, self.RNG)
        with pytest.raises(GeneratorError, match="ratio"):
            apply_consistent_mask(tokens, -0.1, 8, self.RNG)


class TestEmbedAndHeads:
    def test_additivity_over_streams(self, model):
        # summed embedding equals the sum of single-stream lookups
        rng = np.random.default_rng(1)
        tokens = rng.integers(0, 9, size=(1, 3, 5))
        out = model.embed_streams(tokens).data
        parts = sum(model.stream_embed[v](tokens[:, v]).data for v in range(3))
        np.testing.assert_allclose(out, parts + model.pos_embed.data[:5], atol=1e-12)

    def test_prefix_extends_length(self, model):
        tokens = np.zeros((1, 3, 5), dtype=np.int64)
        prefix = Tensor(np.zeros((4, 16)))
        assert model.embed_streams(tokens, prefix).shape == (1, 9, 16)

    def test_token_out_of_vocab_rejected(self, model):
        tokens = np.full((1, 3, 4), 9, dtype=np.int64)
        with pytest.raises(Exception):
            model.embed_streams(tokens)

    def test_masked_timestep_ignores_original(self, model):
        rng = np.random.default_rng(2)
        a = rng.integers(0, 8, size=(1, 3, 6))
        b = a.copy()
        b[0, :, 2] = (b[0, :, 2] + 1) % 8
        a[0, :, 2] = 8  # MASK in every stream
        b[0, :, 2] = 8
        np.testing.assert_array_equal(model.embed_streams(a).data,
                                      model.embed_streams(b).data)

    def test_head_shapes_and_independence(self, model):
        rng = np.random.default_rng(3)
        tokens = rng.integers(0, 8, size=(1, 3, 7))
        logits = model.forward(tokens)
        assert [lg.shape for lg in logits] == [(1, 7, 8)] * 3
        saved = model.heads[0].weight.data.copy()
        model.heads[0].weight.data = saved + 1.0
        after = model.forward(tokens)
        model.heads[0].weight.data = saved
        assert np.abs(after[0].data - logits[0].data).max() > 1e-9
        np.testing.assert_allclose(after[1].data, logits[1].data, atol=1e-12)

    def test_softmax_rows_normalized(self, model):
        from motok.autodiff import softmax

        tokens = np.random.default_rng(4).integers(0, 8, size=(1, 3, 5))
        rows = softmax(model.forward(tokens)[0]).data.sum(axis=-1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-6)


class TestMaskedCeLoss:
    def test_uniform_logits_value(self):
        # 3 streams over a codebook of 8 -> 3 * ln 8 per masked timestep
        t, C, S = 6, 8, 3
        logits = [Tensor(np.zeros((1, t, C))) for _ in range(S)]
        targets = np.zeros((1, S, t), dtype=np.int64)
        mask = np.zeros((1, t), dtype=bool)
        mask[0, :3] = True
        loss = masked_ce_loss(logits, targets, mask)
        assert loss.item() == pytest.approx(S * np.log(C), rel=1e-12)

    def test_perfect_prediction_is_zero(self):
        t, C = 4, 8
        strong = np.full((1, t, C), -1e9)
        strong[0, :, 2] = 0.0
        logits = [Tensor(strong.copy())]
        targets = np.full((1, 1, t), 2, dtype=np.int64)
        mask = np.ones((1, t), dtype=bool)
        assert masked_ce_loss(logits, targets, mask).item() < 1e-12

    def test_no_masked_positions_rejected(self):
        logits = [Tensor(np.zeros((1, 4, 8)))]
        targets = np.zeros((1, 1, 4), dtype=np.int64)
        with pytest.raises(GeneratorError, match="no masked"):
            masked_ce_loss(logits, targets, np.zeros((1, 4), dtype=bool))

    def test_loss_ignores_unmasked_logits(self):
        rng = np.random.default_rng(5)
        base = rng.normal(size=(1, 4, 8))
        targets = rng.integers(0, 8, size=(1, 1, 4))
        mask = np.array([[True, False, True, False]])
        l1 = masked_ce_loss([Tensor(base.copy())], targets, mask).item()
        noisy = base.copy()
        noisy[0, 1] += 100.0
        l2 = masked_ce_loss([Tensor(noisy)], targets, mask).item()
        assert l1 == pytest.approx(l2, rel=1e-12)

    def test_gradient_zero_at_unmasked_positions(self):
        from motok.autodiff import Parameter

        rng = np.random.default_rng(6)
        p = Parameter(rng.normal(size=(1, 4, 8)))
        targets = rng.integers(0, 8, size=(1, 1, 4))
        mask = np.array([[True, False, False, True]])
        masked_ce_loss([p], targets, mask).backward()
        np.testing.assert_array_equal(p.grad[0, 1], np.zeros(8))
        np.testing.assert_array_equal(p.grad[0, 2], np.zeros(8))
        assert np.abs(p.grad[0, 0]).max() > 0


class TestMaskRatioSchedule:
    def test_range(self):
        rng = np.random.default_rng(7)
        ratios = [sample_mask_ratio(rng) for _ in range(1000)]
        assert all(0.0 < r <= 1.0 for r in ratios)

    def test_cosine_density_favors_high_ratios(self):
        rng = np.random.default_rng(8)
        ratios = np.array([sample_mask_ratio(rng) for _ in range(4000)])
        assert (ratios > 0.7).mean() > (ratios < 0.3).mean()


class TestDecoding:
    COND = ConditionSet(text_features=np.random.default_rng(9).normal(size=(2, 6)))

    @pytest.mark.parametrize("strategy,expected", [
        ("ar_flatten", 3 * 16), ("mask_flatten", 10), ("mask_parallel", 10)])
    def test_pass_counts(self, model, strategy, expected):
        dec = DecodeConfig(strategy=strategy, iterations=10, temperature=1.0)
        res = generate(model, self.COND, 16, dec, np.random.default_rng(0))
        assert res.backbone_passes == expected

    @pytest.mark.parametrize("strategy", ["ar_flatten", "mask_flatten", "mask_parallel"])
    def test_output_mask_free(self, model, strategy):
        dec = DecodeConfig(strategy=strategy, iterations=5, temperature=1.0)
        res = generate(model, self.COND, 12, dec, np.random.default_rng(1))
        assert res.codes.shape == (3, 12)
        assert (res.codes != TINY.mask_id).all()
        assert (res.codes >= 0).all() and (res.codes < TINY.codebook).all()

    def test_unconditional_generation_runs(self, model):
        res = generate(model, None, 8, DecodeConfig(iterations=4),
                       np.random.default_rng(2))
        assert (res.codes != TINY.mask_id).all()

    def test_zero_temperature_deterministic(self, model):
        dec = DecodeConfig(strategy="mask_parallel", iterations=6, temperature=0.0)
        a = generate(model, self.COND, 10, dec, np.random.default_rng(3))
        b = generate(model, self.COND, 10, dec, np.random.default_rng(4))
        np.testing.assert_array_equal(a.codes, b.codes)

    def test_length_one(self, model):
        res = generate(model, None, 1, DecodeConfig(iterations=3),
                       np.random.default_rng(5))
        assert res.codes.shape == (3, 1)

    def test_bidirectional_influence(self, model):
        # committing a future timestep changes predictions at earlier ones
        state = np.full((1, 3, 8), TINY.mask_id, dtype=np.int64)
        base = model.forward(state)[0].data[0, 0]
        state2 = state.copy()
        state2[0, :, 7] = 3
        moved = model.forward(state2)[0].data[0, 0]
        assert np.abs(moved - base).max() > 1e-9


class TestCurriculumIntegration:
    def test_parameter_groups_cover_model(self, model):
        # build_stage raises if any parameter falls outside the known groups
        assert build_stage("III", model) == set(model.named_parameters())

    def test_stage2_excludes_backbone(self, model):
        trainable = build_stage("II", model)
        assert not any(n.startswith("backbone.") for n in trainable)
        assert any(n.startswith("cond.audio_proj.") for n in trainable)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    from motok.synth import SyntheticSpec, synthesize_dataset
    from motok.tokenizer import TokenizerConfig, train_tokenizer

    root = tmp_path_factory.mktemp("gen_ds")
    spec = SyntheticSpec(sequence_count=8, length_range=(64, 64), class_count=2,
                        audio_fraction=0.5, seed=5)
    manifest = synthesize_dataset(spec, root)
    tok, _ = train_tokenizer(manifest, TokenizerConfig(epochs=2, dither_epochs=1,
                                                       batch_size=8, seed=0))
    cfg = GenConfig(width=32, depth=1, heads=2, ff_hidden=64, streams=4,
                    codebook=2048, max_len=64, crop_tokens=16,
                    text_width=spec.text_width, epochs=3, batch_size=4,
                    lr=1e-3, seed=0)
    model, hist = train_generator(manifest, tok, cfg, CurriculumConfig(stage="I"))
    return manifest, tok, cfg, model, hist


class TestTraining:
    def test_history_recorded(self, trained):
        _, _, cfg, _, hist = trained
        assert len(hist) == cfg.epochs
        assert all(np.isfinite(h.loss) for h in hist)

    def test_stream_mismatch_rejected(self, trained):
        manifest, tok, cfg, _, _ = trained
        from dataclasses import replace

        bad = replace(cfg, streams=3)
        with pytest.raises(GeneratorError, match="streams"):
            train_generator(manifest, tok, bad)

    def test_stage2_keeps_backbone_bit_identical(self, trained):
        manifest, tok, cfg, model, _ = trained
        before = {n: p.data.copy() for n, p in model.named_parameters().items()
                  if not (n.startswith("cond.audio_proj.")
                          or n.startswith("cond.traj_enc."))}
        from dataclasses import replace

        cfg2 = replace(cfg, epochs=1)
        model, _ = train_generator(manifest, tok, cfg2,
                                   CurriculumConfig(stage="II"), model=model)
        for n, v in before.items():
            np.testing.assert_array_equal(model.named_parameters()[n].data, v)

    def test_save_load_round_trip(self, trained, tmp_path):
        _, _, _, model, _ = trained
        path = tmp_path / "gen.ckpt"
        save_generator(model, path, step=3)
        loaded = load_generator(path)
        tokens = np.random.default_rng(0).integers(0, 8, size=(1, 4, 8))
        np.testing.assert_allclose(loaded.forward(tokens)[0].data,
                                   model.forward(tokens)[0].data, atol=1e-12)
