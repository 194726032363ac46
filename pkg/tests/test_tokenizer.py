import numpy as np
import pytest

from motok.autodiff import Tensor
from motok.motion import read_motion
from motok.rfsq import FsqSpec, RfsqSpec, TokenGrid, rfsq_decode
from motok.synth import DatasetManifest, SyntheticSpec, read_manifest, synthesize_dataset
from motok.tokenizer import (
    TokenizerConfig,
    TokenizerError,
    TokenizerModel,
    eval_reconstruction,
    finetune_decoder,
    load_tokenizer,
    residual_cell_widths,
    save_tokenizer,
    train_tokenizer,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tok_ds")
    spec = SyntheticSpec(sequence_count=8, length_range=(64, 80), class_count=2, seed=3)
    return synthesize_dataset(spec, root)


@pytest.fixture(scope="module")
def model(dataset):
    m = read_motion(dataset.path(dataset.entries[0].motion))
    return TokenizerModel(TokenizerConfig(seed=0), m.skeleton, fps=m.fps)


class TestConfig:
    def test_crop_must_divide(self):
        with pytest.raises(TokenizerError, match="divisible"):
            TokenizerConfig(crop=30)

    def test_latent_dim_must_match_rfsq(self):
        with pytest.raises(TokenizerError, match="latent_dim"):
            TokenizerConfig(latent_dim=3)

    def test_negative_dither_rejected(self):
        with pytest.raises(TokenizerError, match="dither"):
            TokenizerConfig(dither_epochs=-1)


class TestModelShapes:
    def test_token_rate_is_quarter_frame_rate(self, dataset, model):
        m = read_motion(dataset.path(dataset.entries[0].motion))
        T = (m.frame_count // 4) * 4
        tokens = model.tokenize(m.slice(0, T))
        assert tokens.codes.shape == (4, T // 4)

    def test_indivisible_length_rejected(self, dataset, model):
        m = read_motion(dataset.path(dataset.entries[0].motion))
        bad = m.slice(0, (m.frame_count // 4) * 4 - 2)
        with pytest.raises(TokenizerError, match="crop or pad"):
            model.tokenize(bad)

    def test_latents_bounded_inside_grid(self, dataset, model):
        m = read_motion(dataset.path(dataset.entries[0].motion))
        z = model.encode(m.slice(0, 64))
        assert np.all(np.abs(z) < model._latent_bound)

    def test_round_trip_preserves_length_and_fps(self, dataset, model):
        m = read_motion(dataset.path(dataset.entries[0].motion)).slice(0, 64)
        recon = model.detokenize(model.tokenize(m))
        assert recon.frame_count == 64
        assert recon.fps == m.fps

    def test_detokenize_rejects_foreign_spec(self, model):
        other = RfsqSpec(base=FsqSpec(levels=(5, 5, 5, 5)), depth=4)
        grid = TokenGrid(codes=np.zeros((4, 4), dtype=np.int64), spec=other)
        with pytest.raises(TokenizerError, match="does not match"):
            model.detokenize(grid)

    def test_reconstruct_quantizes_encoder_output(self, dataset, model):
        m = read_motion(dataset.path(dataset.entries[0].motion)).slice(0, 64)
        x = Tensor(m.features()[None])
        via_graph = model.decode_latents(
            Tensor(rfsq_decode(model.tokenize(m))[None])).data
        direct = model.reconstruct(x).data
        np.testing.assert_allclose(direct, via_graph, atol=1e-12)


class TestCellWidths:
    def test_widths_match_scalar_scan(self):
        spec = RfsqSpec(base=FsqSpec(levels=(8, 8, 8, 4)), depth=4)
        bounds = np.log(2.0 * np.array([8, 8, 8, 4]) - 3.0)
        w = residual_cell_widths(spec, bounds)
        # central cell width equals the smallest representative magnitude:
        # log(L/(L-2)) for even level counts
        np.testing.assert_allclose(w[:3], np.log(8 / 6), atol=2e-3)
        np.testing.assert_allclose(w[3], np.log(4 / 2), atol=2e-3)


class TestTraining:
    def test_empty_manifest_rejected(self, dataset):
        empty = DatasetManifest(root=dataset.root, entries=())
        with pytest.raises(TokenizerError, match="empty"):
            train_tokenizer(empty, TokenizerConfig())

    def test_short_sequence_rejected(self, dataset):
        cfg = TokenizerConfig(crop=128)
        with pytest.raises(TokenizerError, match="shorter than crop"):
            train_tokenizer(dataset, cfg)

    def test_loss_decreases_and_history_shape(self, dataset):
        cfg = TokenizerConfig(epochs=8, dither_epochs=5, batch_size=8, seed=0)
        model, hist = train_tokenizer(dataset, cfg)
        assert len(hist) == 8
        assert hist[-1].loss < hist[0].loss

    def test_training_is_deterministic(self, dataset):
        cfg = TokenizerConfig(epochs=2, dither_epochs=1, batch_size=8, seed=5)
        _, h1 = train_tokenizer(dataset, cfg)
        _, h2 = train_tokenizer(dataset, cfg)
        assert [s.loss for s in h1] == [s.loss for s in h2]

    def test_overfit_single_sequence(self, dataset):
        one = DatasetManifest(root=dataset.root, entries=dataset.entries[:1])
        cfg = TokenizerConfig(epochs=900, dither_epochs=600, batch_size=1,
                              lr=2e-3, milestones=(700, 820), seed=0)
        model, hist = train_tokenizer(one, cfg)
        finetune_decoder(model, one, steps=2000)
        report = eval_reconstruction(model, one)
        assert report["mpjpe_mm_mean"] < 50.0

    def test_finetune_decoder_leaves_encoder_untouched(self, dataset):
        one = DatasetManifest(root=dataset.root, entries=dataset.entries[:1])
        cfg = TokenizerConfig(epochs=2, dither_epochs=2, batch_size=1, seed=0)
        model, _ = train_tokenizer(one, cfg)
        before = {n: p.data.copy() for n, p in model.named_parameters().items()
                  if not n.startswith("dec")}
        finetune_decoder(model, one, steps=5)
        for n, v in before.items():
            np.testing.assert_array_equal(model.named_parameters()[n].data, v)


class TestPersistence:
    def test_save_load_round_trip(self, dataset, tmp_path):
        cfg = TokenizerConfig(epochs=1, dither_epochs=0, batch_size=8, seed=0)
        model, _ = train_tokenizer(dataset, cfg)
        path = tmp_path / "tok.ckpt"
        save_tokenizer(model, path, step=1)
        loaded = load_tokenizer(path)
        m = read_motion(dataset.path(dataset.entries[0].motion)).slice(0, 64)
        np.testing.assert_array_equal(loaded.tokenize(m).codes,
                                      model.tokenize(m).codes)

    def test_load_rejects_wrong_kind(self, tmp_path):
        from motok.autodiff import Parameter
        from motok.optim import save_checkpoint

        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"w": Parameter(np.zeros(2))},
                        meta={"kind": "other"}, step=0)
        with pytest.raises(TokenizerError, match="not a tokenizer"):
            load_tokenizer(path)
