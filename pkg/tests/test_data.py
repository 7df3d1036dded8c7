import numpy as np
import pytest

from marginlab.data import gen_gaussian_blobs, gen_two_moons, load_cifar10_subset, split


def test_two_moons_zero_noise_on_canonical_arcs():
    ds = gen_two_moons(4, noise=0.0, seed=0)
    outer = ds.inputs[ds.labels == 0]
    inner = ds.inputs[ds.labels == 1]
    # outer arc: unit circle upper half; inner arc: shifted reflected half
    np.testing.assert_allclose((outer**2).sum(axis=1), 1.0, atol=1e-12)
    shifted = inner - np.array([1.0, 0.5])
    np.testing.assert_allclose((shifted**2).sum(axis=1), 1.0, atol=1e-12)
    assert (outer[:, 1] >= -1e-12).all()
    assert (inner[:, 1] <= 0.5 + 1e-12).all()


def test_two_moons_determinism():
    a = gen_two_moons(50, noise=0.1, seed=7)
    b = gen_two_moons(50, noise=0.1, seed=7)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = gen_two_moons(50, noise=0.1, seed=8)
    assert not np.array_equal(a.inputs, c.inputs)


def test_two_moons_balance_odd_n():
    ds = gen_two_moons(101, noise=0.05, seed=1)
    counts = np.bincount(ds.labels)
    assert sorted(counts.tolist()) == [50, 51]


def test_two_moons_rejects_bad_args():
    with pytest.raises(ValueError):
        gen_two_moons(1, 0.0, 0)
    with pytest.raises(ValueError):
        gen_two_moons(10, -0.1, 0)


def test_blobs_zero_std_points_equal_centers():
    centers = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]
    ds = gen_gaussian_blobs(3, 9, centers, std=0.0, seed=2)
    for cls in range(3):
        np.testing.assert_array_equal(ds.inputs[ds.labels == cls],
                                      np.tile(centers[cls], (3, 1)))


def test_blobs_duplicate_centers_zero_std_fails():
    with pytest.raises(ValueError, match="degenerate"):
        gen_gaussian_blobs(2, 10, [[1.0, 1.0], [1.0, 1.0]], std=0.0, seed=0)


def test_blobs_class_means_near_centers():
    centers = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
    n, std = 900, 0.5
    ds = gen_gaussian_blobs(3, n, centers, std=std, seed=3)
    bound = 5 * std / np.sqrt(n / 3)
    for cls in range(3):
        mean = ds.inputs[ds.labels == cls].mean(axis=0)
        assert np.abs(mean - centers[cls]).max() < bound


def test_blobs_near_balanced():
    ds = gen_gaussian_blobs(3, 10, [[0, 0], [1, 0], [0, 1]], std=0.1, seed=4)
    counts = np.bincount(ds.labels)
    assert counts.max() - counts.min() <= 1
    assert counts.sum() == 10


def _write_fake_cifar(path, n_records, label_cycle, seed=0):
    rng = np.random.default_rng(seed)
    blob = bytearray()
    for i in range(n_records):
        blob.append(label_cycle[i % len(label_cycle)])
        blob.extend(rng.integers(0, 256, size=3072, dtype=np.uint8).tobytes())
    path.write_bytes(bytes(blob))


def test_cifar_record_parsing_layout(tmp_path):
    # one record: label 3, red channel all 200, green all 100, blue all 50
    record = bytes([3]) + bytes([200] * 1024) + bytes([100] * 1024) + bytes([50] * 1024)
    (tmp_path / "data_batch_1.bin").write_bytes(record)
    ds = load_cifar10_subset(tmp_path, n_per_class=1, classes=[3])
    assert ds.inputs.shape == (1, 3, 32, 32)
    np.testing.assert_allclose(ds.inputs[0, 0], 200 / 255)
    np.testing.assert_allclose(ds.inputs[0, 1], 100 / 255)
    np.testing.assert_allclose(ds.inputs[0, 2], 50 / 255)
    assert ds.labels[0] == 0


def test_cifar_subset_counts_and_remap(tmp_path):
    _write_fake_cifar(tmp_path / "data_batch_1.bin", 60, label_cycle=[0, 1, 2])
    ds = load_cifar10_subset(tmp_path, n_per_class=10, classes={0, 1}, flatten=True)
    assert len(ds) == 20
    assert ds.inputs.shape == (20, 3072)
    assert set(ds.labels.tolist()) == {0, 1}
    assert np.bincount(ds.labels).tolist() == [10, 10]
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0


def test_cifar_truncated_file_reports_offset(tmp_path):
    record = bytes([0]) + bytes(3072)
    (tmp_path / "data_batch_1.bin").write_bytes(record + record[:100])
    with pytest.raises(ValueError, match="byte offset 3073"):
        load_cifar10_subset(tmp_path, n_per_class=2, classes=[0])


def test_cifar_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10_subset(tmp_path, n_per_class=1, classes=[0])


def test_cifar_not_enough_records(tmp_path):
    _write_fake_cifar(tmp_path / "data_batch_1.bin", 4, label_cycle=[0])
    with pytest.raises(ValueError, match="ran out"):
        load_cifar10_subset(tmp_path, n_per_class=2, classes=[0, 1])


def test_split_sizes():
    ds = gen_two_moons(100, 0.1, seed=0)
    tr, va, te = split(ds, (0.8, 0.1, 0.1), seed=1)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)


def test_split_zero_fraction_fails():
    ds = gen_two_moons(100, 0.1, seed=0)
    with pytest.raises(ValueError):
        split(ds, (0.9, 0.1, 0.0), seed=1)


def test_split_bad_sum_fails():
    ds = gen_two_moons(100, 0.1, seed=0)
    with pytest.raises(ValueError, match="sum to 1"):
        split(ds, (0.5, 0.2, 0.2), seed=1)


def test_split_partition_multiset():
    ds = gen_two_moons(60, 0.1, seed=5)
    tr, va, te = split(ds, (0.5, 0.25, 0.25), seed=9)
    rebuilt = np.concatenate([tr.inputs, va.inputs, te.inputs])
    original = ds.inputs
    order_a = np.lexsort(rebuilt.T)
    order_b = np.lexsort(original.T)
    np.testing.assert_array_equal(rebuilt[order_a], original[order_b])
    assert len(tr) + len(va) + len(te) == len(ds)


def test_split_determinism():
    ds = gen_two_moons(60, 0.1, seed=5)
    a = split(ds, (0.5, 0.25, 0.25), seed=9)
    b = split(ds, (0.5, 0.25, 0.25), seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.inputs, y.inputs)


def test_two_moons_low_noise_learnable():
    # sanity gate for downstream experiments: a [2,16,16,2] MLP reaches
    # >= 99% clean test accuracy within 200 epochs at noise <= 0.05
    from marginlab.attacks import AttackSpec
    from marginlab.losses import LossConfig
    from marginlab.nets import InitSpec, build_mlp
    from marginlab.training import TrainConfig, train

    ds = gen_two_moons(400, 0.05, seed=21)
    tr, va, te = split(ds, (0.7, 0.15, 0.15), seed=21)
    net = build_mlp([2, 16, 16, 2], init=InitSpec(seed=21))
    cfg = TrainConfig(epochs=120, batch_size=64, lr0=0.1, lr_min=0.001, momentum=0.9,
                      weight_decay=5e-4, loss=LossConfig(variant="ce-only"),
                      adv_val=AttackSpec(kind="pgd", epsilon=0.1, steps=3, seed=0),
                      adv_val_size=16, seed=21)
    result = train(net, (tr, va), cfg)
    best = result.best_checkpoint
    acc = (np.argmax(best(te.inputs).data, axis=1) == te.labels).mean()
    assert acc >= 0.99


def test_dataset_csv_export(tmp_path):
    ds = gen_two_moons(6, 0.0, seed=0)
    path = tmp_path / "ds.csv"
    ds.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x0,x1,label"
    assert len(lines) == 7
