import numpy as np
import pytest
from numpy.testing import assert_allclose

from numerics import Rng
from sequence_data import (HEADER_SIZE, LatentProcessParams, ScanpathParams, SequenceDataset,
                           gen_latent_sequences, gen_scanpath_sequences, make_latent_params, make_splits,
                           read_dataset, split_counts, variance_drift_ratio, write_dataset)
from utils.errors import FormatError, ShapeError, ValidationError


def _scalar_process(tau=0.8, noise=None):
    sigma = 1.0 - tau * tau if noise is None else noise
    return LatentProcessParams(np.array([[tau]]), np.array([[sigma]]), np.array([[1.0]]), (1, 1, 1))


def test_ar1_autocorrelation_and_variance():
    ds = gen_latent_sequences(_scalar_process(0.8), count=50, T=200, seed=3)
    x = ds.data.reshape(50, 200).astype(np.float64)
    lag1 = np.sum(x[:, 1:] * x[:, :-1]) / np.sum(x[:, :-1] ** 2)
    assert lag1 == pytest.approx(0.8, abs=0.05)
    assert np.var(x) == pytest.approx(1.0, abs=0.15)


def test_zero_noise_gives_zero_sequences():
    ds = gen_latent_sequences(_scalar_process(0.5, noise=0.0), count=3, T=10, seed=0)
    assert not ds.data.any()


def test_generation_is_deterministic_and_split_disjoint():
    params = make_latent_params((2, 2, 1), 3, Rng(0).generator)
    a = gen_latent_sequences(params, 4, 8, seed=9)
    b = gen_latent_sequences(params, 4, 8, seed=9, threads=2)
    c = gen_latent_sequences(params, 4, 8, seed=9, split="test")
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_unstable_or_invalid_process_rejected():
    with pytest.raises(ValidationError):
        _scalar_process(1.0)
    with pytest.raises(ValidationError):
        LatentProcessParams(np.array([[0.5]]), np.array([[-1.0]]), np.array([[1.0]]), (1, 1, 1))
    with pytest.raises(ShapeError):
        LatentProcessParams(np.array([[0.5]]), np.array([[1.0]]), np.ones((2, 1)), (1, 1, 1))
    with pytest.raises(ValidationError):
        make_latent_params((2, 1, 1), 3, Rng(0).generator)


def test_scanpath_patches_come_from_the_image():
    params = ScanpathParams(image_size=16, blob_count=4)
    ds = gen_scanpath_sequences(params, count=2, T=5, patch_size=4, seed=1)
    assert ds.data.shape == (2, 5, 4, 4, 1)
    assert np.all(ds.data >= 0) and ds.data.any()
    with pytest.raises(ValidationError):
        gen_scanpath_sequences(params, count=1, T=5, patch_size=17, seed=1)


def test_write_read_round_trip(tmp_path):
    params = make_latent_params((2, 2, 1), 2, Rng(1).generator)
    ds = gen_latent_sequences(params, 3, 6, seed=4)
    path = str(tmp_path / "train.rjpa")
    write_dataset(ds, path)
    loaded = read_dataset(path)
    assert np.array_equal(loaded.data, ds.data)
    assert loaded.metadata["seed"] == 4
    assert loaded.metadata["generator"] == "latent"


def test_empty_dataset_round_trip(tmp_path):
    ds = SequenceDataset(np.zeros((0, 4, 2, 2, 1)))
    path = str(tmp_path / "empty.rjpa")
    write_dataset(ds, path, manifest=False)
    loaded = read_dataset(path)
    assert loaded.count == 0
    assert loaded.T == 4


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "bad.rjpa"
    path.write_bytes(b"NOPE!!" + b"\x00" * 40)
    with pytest.raises(FormatError) as info:
        read_dataset(str(path))
    assert info.value.offset == 0


def test_corruption_detected(tmp_path):
    ds = SequenceDataset(np.ones((1, 3, 1, 1, 1)))
    path = tmp_path / "data.rjpa"
    write_dataset(ds, str(path), manifest=False)
    raw = bytearray(path.read_bytes())
    raw[HEADER_SIZE] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_dataset(str(path))
    path.write_bytes(bytes(raw[:-2]))
    with pytest.raises(FormatError):
        read_dataset(str(path))


def test_dataset_shape_rules():
    with pytest.raises(ShapeError):
        SequenceDataset(np.zeros((2, 4, 3)))
    with pytest.raises(ValidationError):
        SequenceDataset(np.zeros((2, 1, 1, 1, 1)))
    ds = SequenceDataset(np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2, 1))
    assert ds.patch_dim == 4
    assert ds.flat(1).shape == (3, 4)
    assert len(ds.subset([1])) == 1


def test_split_counts_and_drift():
    assert split_counts("desk") == (64, 16)
    assert split_counts("full", 0.001) == (29, 7)
    with pytest.raises(ValidationError):
        split_counts("huge")
    params = make_latent_params((2, 2, 1), 2, Rng(2).generator, tau_low=0.3, tau_high=0.6)
    train, test = make_splits(lambda **kw: gen_latent_sequences(params, T=100, seed=0, **kw), 5, 2)
    assert (train.count, test.count) == (5, 2)
    assert variance_drift_ratio(train) == pytest.approx(1.0, abs=0.6)
    assert_allclose(variance_drift_ratio(SequenceDataset(np.zeros((1, 4, 1, 1, 1)))), 1.0)


def test_latent_offset_and_observation_noise():
    base = _scalar_process(0.5, noise=0.0)
    shifted = LatentProcessParams(base.u, base.sigma, base.emission, base.patch_shape, offset=2.0)
    ds = gen_latent_sequences(shifted, count=2, T=10, seed=0)
    assert_allclose(ds.data, 2.0)

    noisy = LatentProcessParams(base.u, base.sigma, base.emission, base.patch_shape, observation_noise=1.0)
    x = gen_latent_sequences(noisy, count=20, T=100, seed=0).data.astype(np.float64)
    assert np.var(x) == pytest.approx(1.0, abs=0.15)
    with pytest.raises(ValidationError):
        LatentProcessParams(base.u, base.sigma, base.emission, base.patch_shape, observation_noise=-1.0)


def test_make_latent_params_passes_offset_and_noise():
    params = make_latent_params((2, 2, 1), 3, Rng(0).generator, offset=1.5, observation_noise=0.5)
    assert (params.offset, params.observation_noise) == (1.5, 0.5)


def test_scanpath_walk_is_deterministic_and_moves():
    params = ScanpathParams(image_size=24, blob_count=32, saccade_prob=0.0, step_scale=2.0)
    a = gen_scanpath_sequences(params, count=1, T=12, patch_size=4, seed=5)
    b = gen_scanpath_sequences(params, count=1, T=12, patch_size=4, seed=5)
    assert np.array_equal(a.data, b.data)
    frames = a.data[0]
    assert any(not np.array_equal(frames[t], frames[t + 1]) for t in range(11))
