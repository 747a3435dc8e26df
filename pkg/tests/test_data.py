import numpy as np
import pytest

from ddpnopt.data import Dataset, batches, gaussian_clusters, blob_images, load_csv, split, standardize, write_csv
from ddpnopt.errors import DataError


def test_clusters_zero_spread_hits_centers():
    ds = gaussian_clusters(4, dim=6, n_per_cluster=5, sigma=0.0, center_scale=3.0, seed=2)
    for c in range(4):
        pts = ds.inputs[ds.labels == c]
        np.testing.assert_array_equal(pts, np.broadcast_to(pts[0], pts.shape))
        assert np.linalg.norm(pts[0]) == pytest.approx(3.0)


def test_clusters_balanced_and_reproducible():
    ds = gaussian_clusters(5, n_per_cluster=100, seed=7)
    assert len(ds) == 500 and ds.dim == 30
    np.testing.assert_array_equal(np.bincount(ds.labels), [100] * 5)
    np.testing.assert_array_equal(ds.inputs, gaussian_clusters(5, n_per_cluster=100, seed=7).inputs)
    with pytest.raises(ValueError):
        gaussian_clusters(1)


def test_well_separated_clusters_nearest_center():
    ds = gaussian_clusters(6, dim=30, n_per_cluster=50, sigma=0.5, center_scale=10.0, seed=1)
    centers = np.stack([ds.inputs[ds.labels == c].mean(axis=0) for c in range(6)])
    pred = np.argmin(((ds.inputs[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels) == 1.0


def test_blob_images():
    ds = blob_images(6, size=8, seed=0)
    assert ds.inputs.shape == (6, 64)
    np.testing.assert_array_equal(ds.labels, [0, 1, 0, 1, 0, 1])


def test_load_csv_label_mapping(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("f1,label,f2\n1,a,2\n3,b,4\n5,a,6\n", encoding="utf-8")
    ds = load_csv(p)
    np.testing.assert_array_equal(ds.labels, [0, 1, 0])
    assert ds.num_classes == 2 and ds.class_names == ("a", "b")
    np.testing.assert_array_equal(ds.inputs, [[1, 2], [3, 4], [5, 6]])


def test_constant_column_normalizes_to_zero(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,y,label\n7,1,0\n7,2,1\n7,6,0\n", encoding="utf-8")
    ds = load_csv(p, normalize=True)
    np.testing.assert_array_equal(ds.inputs[:, 0], 0.0)
    assert ds.inputs[:, 1].mean() == pytest.approx(0.0, abs=1e-15)
    assert ds.inputs[:, 1].std() == pytest.approx(1.0)
    assert standardize(ds) is ds


def test_csv_round_trip(tmp_path):
    ds = gaussian_clusters(3, dim=4, n_per_cluster=3, seed=9)
    p = tmp_path / "rt.csv"
    write_csv(ds, p)
    back = load_csv(p)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)


@pytest.mark.parametrize("text,row,column", [
    ("x,label\n1,a\nzz,b\n", 3, "x"),
    ("x,label\n1,a\n2\n", 3, None),
])
def test_csv_errors_carry_location(tmp_path, text, row, column):
    p = tmp_path / "bad.csv"
    p.write_text(text, encoding="utf-8")
    with pytest.raises(DataError) as ei:
        load_csv(p)
    assert ei.value.row == row and ei.value.column == column


def test_csv_missing_label_and_empty(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("x,y\n1,2\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_csv(p)
    p.write_text("", encoding="utf-8")
    with pytest.raises(DataError):
        load_csv(p)


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), np.array([0]), 1)
    with pytest.raises(DataError):
        Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 1)


def test_batches():
    (one,) = batches(5, 8, 0, 0)
    assert sorted(one) == list(range(5))
    sizes = [len(b) for b in batches(10, 3, 1, 0)]
    assert sizes == [3, 3, 3, 1]
    a, b = batches(10, 3, 1, 2), batches(10, 3, 1, 2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert sorted(np.concatenate(batches(23, 4, 3, 1))) == list(range(23))
    with pytest.raises(ValueError):
        batches(5, 0, 0, 0)


def test_split_partitions():
    ds = gaussian_clusters(2, dim=2, n_per_cluster=10, seed=0)
    a, b = split(ds, 0.3, seed=4)
    assert len(a) == 6 and len(b) == 14
    rows = {tuple(r) for r in np.vstack([a.inputs, b.inputs])}
    assert rows == {tuple(r) for r in ds.inputs}
