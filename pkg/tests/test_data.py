import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctkd.data import (
    AugmentPolicy,
    SyntheticSpec,
    augment,
    augment_rng,
    batch_iter,
    epoch_batches,
    load_cifar_binary,
    normalization_stats,
    normalize,
    read_cifar_records,
    synthetic_dataset,
    write_cifar_records,
)
from ctkd.errors import ConfigError, CorruptionError, DataError, FormatError


def fake_cifar(root, n_per_file=20, seed=0):
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        write_cifar_records(root / name, rng.integers(0, 256, size=(n_per_file, 3, 32, 32)),
                            rng.integers(0, 10, size=n_per_file))
    return root


# -- CIFAR codec -------------------------------------------------------------------

def test_record_round_trip_bit_identical(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(5, 3, 32, 32)).astype(np.uint8)
    labels = np.array([0, 9, 3, 3, 7])
    write_cifar_records(tmp_path / "b.bin", pixels, labels)
    got_pixels, got_labels = read_cifar_records(tmp_path / "b.bin", records=5)
    assert got_pixels.tobytes() == pixels.tobytes()
    np.testing.assert_array_equal(got_labels, labels)


def test_record_layout_is_channel_planar(tmp_path):
    pixels = np.zeros((1, 3, 32, 32), dtype=np.uint8)
    pixels[0, 1, 0, 1] = 200  # green plane, row 0, column 1
    write_cifar_records(tmp_path / "b.bin", pixels, [4])
    raw = (tmp_path / "b.bin").read_bytes()
    assert len(raw) == 3073 and raw[0] == 4 and raw[1 + 1024 + 1] == 200


def test_truncated_file_reports_byte_counts(tmp_path, rng):
    write_cifar_records(tmp_path / "b.bin", rng.integers(0, 256, size=(3, 3, 32, 32)), [1, 2, 3])
    data = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "b.bin").write_bytes(data[:-10])
    with pytest.raises(FormatError, match=f"expected {3 * 3073}.*got {3 * 3073 - 10}"):
        read_cifar_records(tmp_path / "b.bin", records=3)


def test_bad_label_is_corruption(tmp_path, rng):
    write_cifar_records(tmp_path / "b.bin", rng.integers(0, 256, size=(2, 3, 32, 32)), [1, 12])
    with pytest.raises(CorruptionError, match="record 1"):
        read_cifar_records(tmp_path / "b.bin", records=2)
    assert issubclass(CorruptionError, DataError)


def test_load_full_split_sizes(tmp_path):
    root = fake_cifar(tmp_path / "c", n_per_file=20)
    train = load_cifar_binary(root, "train", records_per_file=20)
    test = load_cifar_binary(root, "test", records_per_file=20)
    assert len(train) == 100 and len(test) == 20
    assert train.images.shape == (100, 3, 32, 32) and train.images.dtype == np.float32
    np.testing.assert_array_equal(test.mean, train.mean)


def test_load_standard_record_count_expects_10000(tmp_path):
    root = fake_cifar(tmp_path / "c", n_per_file=20)
    with pytest.raises(FormatError, match=f"expected {10000 * 3073}"):
        load_cifar_binary(root, "train")


def test_one_truncated_file_fails_whole_load(tmp_path):
    root = fake_cifar(tmp_path / "c", n_per_file=20)
    f = root / "data_batch_4.bin"
    f.write_bytes(f.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_cifar_binary(root, "train", records_per_file=20)


def test_missing_file_and_bad_split(tmp_path):
    with pytest.raises(FormatError):
        load_cifar_binary(tmp_path, "train", records_per_file=20)
    with pytest.raises(ConfigError):
        load_cifar_binary(tmp_path, "valid")


def test_cifar100_layout_uses_fine_label(tmp_path, rng):
    root = tmp_path / "c100"
    root.mkdir()
    for name, n in (("train.bin", 50000), ("test.bin", 10000)):
        # two label bytes per record: coarse then fine
        table = np.zeros((n, 3074), dtype=np.uint8)
        table[:, 0] = 19
        table[:, 1] = np.arange(n) % 100
        (root / name).write_bytes(table.tobytes())
    ds = load_cifar_binary(root, "test", layout="cifar100")
    assert ds.num_classes == 100 and ds.labels.max() == 99


def test_normalization_round_trip(rng):
    x = rng.uniform(0, 1, size=(8, 3, 4, 4))
    mean, std = normalization_stats(x)
    z = normalize(x, mean, std, dtype=np.float64)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-9)
    np.testing.assert_allclose(z * std.reshape(1, 3, 1, 1) + mean.reshape(1, 3, 1, 1), x, atol=1e-6)


def test_dataset_denormalize_inverts(tmp_path):
    root = fake_cifar(tmp_path / "c", n_per_file=20)
    ds = load_cifar_binary(root, "train", records_per_file=20)
    raw = np.concatenate([read_cifar_records(root / f"data_batch_{i}.bin", records=20)[0] for i in range(1, 6)])
    np.testing.assert_allclose(ds.denormalize(), raw / 255.0, atol=1e-6)


# -- synthetic ----------------------------------------------------------------------

def test_synthetic_is_deterministic():
    a = synthetic_dataset(SyntheticSpec(seed=3))
    b = synthetic_dataset(SyntheticSpec(seed=3))
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert synthetic_dataset(SyntheticSpec(seed=4)).images.tobytes() != a.images.tobytes()


def test_synthetic_balanced_and_labelled():
    ds = synthetic_dataset(SyntheticSpec(num_classes=4, train_samples=40), "train")
    assert np.bincount(ds.labels).tolist() == [10] * 4
    assert ds.images.shape == (40, 3, 32, 32)


def test_synthetic_needs_two_classes():
    with pytest.raises(ConfigError):
        synthetic_dataset(SyntheticSpec(num_classes=1))


def _nearest_mean_accuracy(spec):
    train, test = synthetic_dataset(spec, "train"), synthetic_dataset(spec, "test")
    flat = lambda d: d.images.reshape(len(d), -1).astype(np.float64)
    means = np.stack([flat(train)[train.labels == k].mean(axis=0) for k in range(spec.num_classes)])
    pred = (flat(test) @ means.T - 0.5 * (means ** 2).sum(axis=1)).argmax(axis=1)
    return (pred == test.labels).mean()


def test_high_separation_is_linearly_separable():
    assert _nearest_mean_accuracy(SyntheticSpec(num_classes=4, separation=3.0, train_samples=200, test_samples=200)) >= 0.95


def test_zero_separation_is_chance():
    acc = _nearest_mean_accuracy(SyntheticSpec(num_classes=4, separation=0.0, train_samples=400, test_samples=400))
    assert abs(acc - 0.25) < 0.08


# -- augmentation -------------------------------------------------------------------

def test_disabled_policy_is_identity(rng):
    x = rng.normal(size=(3, 3, 32, 32))
    assert augment(x, AugmentPolicy(enabled=False), np.random.default_rng(0)) is x


def test_flip_twice_is_identity(rng):
    x = rng.normal(size=(3, 3, 32, 32))
    pol = AugmentPolicy(pad=0, hflip_prob=1.0)
    once = augment(x, pol, np.random.default_rng(0))
    np.testing.assert_array_equal(once, x[:, :, :, ::-1])
    np.testing.assert_array_equal(augment(once, pol, np.random.default_rng(1)), x)


@given(st.integers(0, 2**31 - 1))
def test_augment_shape_and_reproducibility(seed):
    x = np.random.default_rng(seed).normal(size=(4, 3, 32, 32)).astype(np.float32)
    a = augment(x, AugmentPolicy(), np.random.default_rng(seed))
    b = augment(x, AugmentPolicy(), np.random.default_rng(seed))
    assert a.shape == x.shape and a.dtype == x.dtype and a.tobytes() == b.tobytes()


def test_crop_is_window_of_reflect_padding(rng):
    x = rng.normal(size=(6, 3, 32, 32))
    out = augment(x, AugmentPolicy(pad=4, hflip_prob=0.0), np.random.default_rng(5))
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)), mode="reflect")
    for i in range(6):
        assert any(np.array_equal(out[i], padded[i, :, a:a + 32, b:b + 32]) for a in range(9) for b in range(9))


@pytest.mark.parametrize("kwargs", [{"hflip_prob": 1.5}, {"pad": -1}])
def test_bad_policy(kwargs):
    with pytest.raises(ConfigError):
        AugmentPolicy(**kwargs)


def test_crop_larger_than_padded(rng):
    with pytest.raises(ConfigError):
        augment(rng.normal(size=(1, 3, 32, 32)), AugmentPolicy(pad=0, crop=(40, 40)), np.random.default_rng(0))


# -- batching -----------------------------------------------------------------------

def test_batch_partition_sizes():
    batches = list(batch_iter(10, 3, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_unshuffled_iteration_is_in_order():
    assert np.concatenate(list(batch_iter(7, 2))).tolist() == list(range(7))


@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 1000), st.integers(0, 50))
def test_epoch_is_permutation(n, bs, seed, epoch):
    order = np.concatenate(list(epoch_batches(n, bs, seed, epoch)))
    assert np.array_equal(np.sort(order), np.arange(n))


def test_same_epoch_seed_same_order():
    a = np.concatenate(list(epoch_batches(50, 8, 1, 3)))
    b = np.concatenate(list(epoch_batches(50, 8, 1, 3)))
    assert a.tolist() == b.tolist()
    assert a.tolist() != np.concatenate(list(epoch_batches(50, 8, 1, 4))).tolist()


def test_batch_and_augment_streams_are_separate():
    # drawing from the augmentation stream never moves the batch order, and vice versa
    order = np.concatenate(list(epoch_batches(64, 8, 2, 0)))
    aug_before = augment_rng(2, 0).random(5)
    augment_rng(2, 0).random(1000)
    assert np.concatenate(list(epoch_batches(64, 8, 2, 0))).tolist() == order.tolist()
    assert augment_rng(2, 0).random(5).tolist() == aug_before.tolist()
    assert augment_rng(3, 0).random(5).tolist() != aug_before.tolist()


def test_batch_size_must_be_positive():
    with pytest.raises(ConfigError):
        list(batch_iter(5, 0))
