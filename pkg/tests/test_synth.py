import numpy as np
import pytest

from motok.features_io import read_features
from motok.motion import read_motion
from motok.synth import (
    SynthError,
    SyntheticSpec,
    class_text_row,
    read_manifest,
    synthesize_dataset,
)


def small_spec(**kw):
    defaults = dict(sequence_count=4, length_range=(40, 60), class_count=2,
                    beat_period_range=(8, 12), seed=7)
    defaults.update(kw)
    return SyntheticSpec(**defaults)


class TestSpecValidation:
    def test_rejects_empty_length_range(self):
        with pytest.raises(SynthError):
            small_spec(length_range=(60, 40))

    def test_rejects_bad_family(self):
        with pytest.raises(SynthError):
            small_spec(trajectory_family="zigzag")

    def test_rejects_negative_noise(self):
        with pytest.raises(SynthError):
            small_spec(noise=-0.1)


class TestGeneration:
    def test_noise_free_beats_match_grid(self, tmp_path):
        spec = small_spec(sequence_count=1, length_range=(60, 60), noise=0.0,
                          beat_period_range=(10, 10), class_count=1)
        manifest = synthesize_dataset(spec, tmp_path / "d")
        (entry,) = manifest.entries
        assert entry.frames == 60
        expected = tuple(f / spec.fps for f in range(0, 60, 10))
        assert entry.beat_times == expected

    def test_determinism_byte_identical(self, tmp_path):
        spec = small_spec()
        synthesize_dataset(spec, tmp_path / "a")
        synthesize_dataset(spec, tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes(), name

    def test_all_classes_present(self, tmp_path):
        spec = small_spec(sequence_count=512, class_count=8)
        manifest = synthesize_dataset(spec, tmp_path / "d")
        assert len(manifest.entries) == 512
        labels = {e.label for e in manifest.entries}
        assert labels == set(range(8))

    @pytest.mark.parametrize("family", ["line", "circle", "spline"])
    def test_families_produce_valid_motion(self, tmp_path, family):
        spec = small_spec(trajectory_family=family, noise=0.01)
        manifest = synthesize_dataset(spec, tmp_path / family)
        m = read_motion(manifest.path(manifest.entries[0].motion))
        assert m.frame_count == manifest.entries[0].frames

    def test_condition_files(self, tmp_path):
        spec = small_spec(sequence_count=3, class_count=3, audio_fraction=1.0)
        manifest = synthesize_dataset(spec, tmp_path / "d")
        e = manifest.entries[2]
        text = read_features(manifest.path(e.text), modality="text")
        np.testing.assert_array_equal(text[0], class_text_row(2, 3))
        audio = read_features(manifest.path(e.audio), modality="audio")
        assert audio.shape[0] == e.frames // 4
        traj = read_features(manifest.path(e.traj), modality="traj")
        m = read_motion(manifest.path(e.motion))
        np.testing.assert_array_equal(traj, m.root_translation)

    def test_audio_coverage_fraction(self, tmp_path):
        spec = small_spec(sequence_count=100, audio_fraction=0.3)
        manifest = synthesize_dataset(spec, tmp_path / "d")
        assert sum(e.has_audio for e in manifest.entries) == 30

    def test_audio_coverage_spreads_in_small_sets(self, tmp_path):
        spec = small_spec(sequence_count=20, audio_fraction=0.3)
        manifest = synthesize_dataset(spec, tmp_path / "d")
        assert sum(e.has_audio for e in manifest.entries) == 6
        assert any(not e.has_audio for e in manifest.entries[:10])


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        spec = small_spec()
        manifest = synthesize_dataset(spec, tmp_path / "d")
        back = read_manifest(tmp_path / "d" / "manifest.jsonl")
        assert back.entries == manifest.entries

    def test_missing_file_is_error(self, tmp_path):
        spec = small_spec()
        manifest = synthesize_dataset(spec, tmp_path / "d")
        manifest.path(manifest.entries[0].motion).unlink()
        with pytest.raises(SynthError, match="missing file"):
            read_manifest(tmp_path / "d" / "manifest.jsonl")
