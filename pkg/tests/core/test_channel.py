"""Tests for CSI generation, normalization, splitting and CSIBIN I/O."""
import json

import numpy as np
import pytest

from core.channel import (
    CSIBIN_HEADER,
    CsiDataset,
    correlation_matrix,
    decode_csibin,
    dominant_eigen_fraction,
    generate,
    ingest,
    make_config,
    mean_power,
    normalize,
    scene_stream,
    shift,
    split,
)
from core.errors import ConfigError, DataFormatError


class TestChannelConfig:
    """Test channel configuration validation."""

    def test_non_power_of_two_rejected(self):
        """Test that antenna and subcarrier counts must be powers of two."""
        with pytest.raises(ConfigError):
            make_config(n_tx=48)
        with pytest.raises(ConfigError):
            make_config(n_sub=0)

    def test_negative_spread_rejected(self):
        """Test that spreads must be non-negative."""
        with pytest.raises(ConfigError):
            make_config(angle_spread=-0.1)

    def test_zero_spread_allowed(self):
        """Test that a zero spread is a valid (degenerate) environment."""
        config = make_config(n_tx=8, n_sub=8, angle_spread=0.0, delay_spread=0.0)
        assert len(generate(config, 2)) == 2


class TestGenerate:
    """Test synthetic CSI generation."""

    def test_shape_and_determinism(self, channel_config):
        """Test sample layout and seed determinism."""
        a = generate(channel_config, 5)
        b = generate(channel_config, 5)
        assert a.samples.shape == (5, 2, 8, 8)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_prefix_stable_when_count_grows(self, channel_config):
        """Test that sample i does not depend on how many samples were drawn."""
        short = generate(channel_config, 3)
        long = generate(channel_config, 6)
        np.testing.assert_array_equal(short.samples, long.samples[:3])

    def test_different_seed_differs(self, channel_config):
        """Test that another seed gives another realization."""
        other = channel_config.model_copy(update={"seed": channel_config.seed + 1})
        assert not np.allclose(generate(channel_config, 2).samples, generate(other, 2).samples)

    def test_count_must_be_positive(self, channel_config):
        """Test that zero samples is a configuration error."""
        with pytest.raises(ConfigError):
            generate(channel_config, 0)

    def test_upa_layout_for_256_antennas(self):
        """Test that 256 antennas use the planar array response."""
        config = make_config(n_tx=256, n_sub=4, n_paths=2, seed=1)
        assert generate(config, 1).samples.shape == (1, 2, 256, 4)

    def test_scene_stream_drifts(self, channel_config):
        """Test that a drifting stream differs from the static one beyond the first scene."""
        static = generate(channel_config, 4)
        stream = scene_stream(channel_config, 4, drift_per_scene=0.2)
        assert stream.split == "eval-stream"
        np.testing.assert_allclose(stream.samples[0], static.samples[0])
        assert not np.allclose(stream.samples[3], static.samples[3])


class TestShiftAndStatistics:
    """Test environment shifts and correlation statistics."""

    def test_identity_shift_returns_same_config(self, channel_config):
        """Test that a no-op shift returns the config unchanged."""
        assert shift(channel_config) is channel_config

    def test_shift_changes_fields(self, channel_config):
        """Test the shifted angle, spreads and path count."""
        shifted = shift(channel_config, angle_shift=0.3, spread_scale=2.0, path_delta=1)
        assert shifted.mean_angle == pytest.approx(channel_config.mean_angle + 0.3)
        assert shifted.angle_spread == pytest.approx(2 * channel_config.angle_spread)
        assert shifted.n_paths == channel_config.n_paths + 1

    def test_shift_to_zero_paths_rejected(self, channel_config):
        """Test that a shift cannot remove every path."""
        with pytest.raises(ConfigError):
            shift(channel_config, path_delta=-channel_config.n_paths)

    def test_correlation_matrix_is_hermitian(self, csi_dataset):
        """Test the spatial correlation estimate."""
        r = correlation_matrix(csi_dataset)
        assert r.shape == (8, 8)
        np.testing.assert_allclose(r, r.conj().T, atol=1e-12)
        assert 0.0 < dominant_eigen_fraction(csi_dataset) <= 1.0

    def test_narrow_spread_is_more_concentrated(self):
        """Test that a narrow angular spread concentrates energy in one eigen-direction."""
        narrow = generate(make_config(n_tx=16, n_sub=8, angle_spread=0.001, seed=2), 40)
        wide = generate(make_config(n_tx=16, n_sub=8, angle_spread=0.8, seed=2), 40)
        assert dominant_eigen_fraction(narrow) > dominant_eigen_fraction(wide)


class TestNormalizeAndSplit:
    """Test global normalization and three-way splits."""

    def test_normalize_sets_mean_power(self, channel_config):
        """Test that the mean squared Frobenius norm becomes N_t * N_c."""
        data = normalize(generate(channel_config, 10))
        assert mean_power(data) == pytest.approx(64.0)
        assert data.normalized
        assert "normalization_scale" in data.meta

    def test_normalize_zero_power_is_skipped(self):
        """Test that an all-zero dataset is returned unscaled."""
        data = CsiDataset(np.zeros((2, 2, 4, 4)))
        assert normalize(data).normalized is False

    def test_split_partitions(self, csi_dataset):
        """Test that the parts are disjoint and cover the dataset."""
        train, val, test = split(csi_dataset, (0.4, 0.4, 0.2), seed=3)
        assert (len(train), len(val), len(test)) == (8, 8, 4)
        rows = np.concatenate([train.samples, val.samples, test.samples]).reshape(20, -1)
        assert len({r.tobytes() for r in rows}) == 20
        assert train.split == "train" and test.split == "test"

    def test_split_rejects_bad_fractions(self, csi_dataset):
        """Test validation of the split fractions."""
        with pytest.raises(ConfigError):
            split(csi_dataset, (0.5, 0.5, 0.5))


class TestCsibin:
    """Test CSIBIN writing and ingestion."""

    def test_write_and_ingest(self, csi_dataset, tmp_path):
        """Test that written files come back identical at f32 precision with their manifest."""
        path = csi_dataset.write(tmp_path / "d.csibin")
        loaded = ingest(path)
        np.testing.assert_array_equal(loaded.samples, csi_dataset.samples.astype(np.float32).astype(np.float64))
        assert loaded.normalized
        assert loaded.config == csi_dataset.config
        manifest = json.loads(path.with_suffix(".json").read_text())
        assert manifest["count"] == 20 and manifest["shape"] == [8, 8]
        assert loaded.fingerprint() == csi_dataset.fingerprint()

    def test_rewrite_is_bit_identical(self, csi_dataset, tmp_path):
        """Test that ingest followed by write reproduces the file byte for byte."""
        first = csi_dataset.write(tmp_path / "a.csibin")
        second = ingest(first).write(tmp_path / "b.csibin")
        assert first.read_bytes() == second.read_bytes()

    @pytest.mark.parametrize(
        "manifest",
        ["{not json", "[1, 2]", '{"config": {"n_tx": 3}}', '{"config": {"bogus": 1}}', '{"meta": [1]}'],
    )
    def test_malformed_manifest(self, csi_dataset, tmp_path, manifest):
        """Test that a broken companion manifest is a format error, not a crash."""
        path = csi_dataset.write(tmp_path / "d.csibin")
        path.with_suffix(".json").write_text(manifest)
        with pytest.raises(DataFormatError, match="bad manifest"):
            ingest(path)

    def test_bad_magic(self, csi_dataset, tmp_path):
        """Test that a wrong magic is reported at offset 0."""
        data = bytearray(csi_dataset.write(tmp_path / "d.csibin").read_bytes())
        data[:4] = b"XXXX"
        with pytest.raises(DataFormatError) as exc:
            decode_csibin(bytes(data))
        assert exc.value.offset == 0

    def test_truncated_and_trailing(self, csi_dataset, tmp_path):
        """Test truncated payloads and trailing bytes."""
        data = csi_dataset.write(tmp_path / "d.csibin").read_bytes()
        with pytest.raises(DataFormatError):
            decode_csibin(data[:-1])
        with pytest.raises(DataFormatError) as exc:
            decode_csibin(data + b"\x00")
        assert exc.value.offset == len(data)
        with pytest.raises(DataFormatError):
            decode_csibin(data[: CSIBIN_HEADER.size - 1])

    def test_unknown_flags(self, csi_dataset, tmp_path):
        """Test that reserved flag bits are rejected."""
        data = bytearray(csi_dataset.write(tmp_path / "d.csibin").read_bytes())
        data[6] |= 0x80
        with pytest.raises(DataFormatError):
            decode_csibin(bytes(data))

    def test_non_finite_values_rejected(self, tmp_path):
        """Test that NaN samples fail ingestion."""
        samples = np.zeros((1, 2, 2, 2))
        samples[0, 0, 0, 0] = np.nan
        path = CsiDataset(samples).write(tmp_path / "nan.csibin")
        with pytest.raises(DataFormatError):
            ingest(path)

    def test_missing_file(self, tmp_path):
        """Test that a missing file is a configuration error."""
        with pytest.raises(ConfigError):
            ingest(tmp_path / "missing.csibin")
