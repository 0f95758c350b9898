import hashlib
import json

import numpy as np
import pytest

from tacgraph import dataset_io as dio
from tacgraph import nn
from tacgraph import sensor_sim as ss
from tacgraph import servo as sv


@pytest.fixture(scope="module")
def big_dataset():
    return dio.generate_dataset(dio.CollectionSpec(sample_count=5000, graph_kind="knn", seed=4))


def _digest(ds):
    h = hashlib.sha256()
    for g in ds.graphs:
        h.update(np.ascontiguousarray(g.node_features, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(g.edge_index, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(ds.labels, dtype=np.float64).tobytes())
    return h.hexdigest()


def test_round331_five_thousand(big_dataset):
    assert len(big_dataset) == 5000
    assert big_dataset.labels.shape == (5000, 2)
    assert all(g.num_nodes == 331 for g in big_dataset.graphs[:50])


def test_five_thousand_round_trip_is_bitwise(big_dataset, tmp_path):
    dio.save_dataset(tmp_path / "d.jsonl", big_dataset)
    back = dio.load_dataset(tmp_path / "d.jsonl")
    assert _digest(back) == _digest(big_dataset)


def test_labels_are_depth_and_roll_only():
    spec = dio.CollectionSpec(sample_count=20, graph_kind="knn", seed=1)
    ds = dio.generate_dataset(spec)
    for i, lab in enumerate(ds.labels):
        pose, _ = dio.sample_pose(spec, i)
        assert tuple(lab) == pose.label()
        assert pose.shear_x != 0.0


def test_zero_width_ranges_at_origin():
    spec = dio.CollectionSpec(sample_count=6, graph_kind="knn", tap_depth=0.0, y_range=(0.0, 0.0),
                              theta_range=(0.0, 0.0), shear_x_range=(0.0, 0.0), shear_roll_range=(0.0, 0.0))
    ds = dio.generate_dataset(spec)
    assert np.all(ds.labels == 0.0)
    feats = np.stack([g.node_features for g in ds.graphs])
    noise = spec.deformation.noise_std
    assert np.abs(feats - feats[0]).max() < 12 * noise


def test_grid_sampling_is_cartesian():
    spec = dio.CollectionSpec(sample_count=25, sampling="grid", grid_shape=(5, 5), graph_kind="knn",
                              shear_x_range=(0.0, 0.0), shear_roll_range=(0.0, 0.0),
                              deformation=ss.DeformationParams(noise_std=0.0))
    ds = dio.generate_dataset(spec)
    got = {tuple(np.round(lab, 9)) for lab in ds.labels}
    ys = spec.tap_depth + np.linspace(*spec.y_range, 5)
    ts = np.linspace(*spec.theta_range, 5)
    assert got == {(round(y, 9), round(t, 9)) for y in ys for t in ts}


def test_generation_is_deterministic_and_worker_independent():
    spec = dio.CollectionSpec(sample_count=12, graph_kind="voronoi", seed=3)
    a = dio.generate_dataset(spec, workers=1)
    b = dio.generate_dataset(spec, workers=2)
    assert _digest(a) == _digest(b)


def test_uniform_labels_fill_quartiles():
    spec = dio.CollectionSpec(sample_count=5000, seed=9)
    labels = np.array([dio.sample_pose(spec, i)[0].label() for i in range(5000)])
    for col, (lo, hi) in ((0, (spec.tap_depth - 2, spec.tap_depth + 2)), (1, spec.theta_range)):
        counts = np.histogram(labels[:, col], bins=np.linspace(lo, hi, 5))[0]
        assert np.all(np.abs(counts / 5000 - 0.25) <= 0.05)


@pytest.mark.parametrize("change", [{"sample_count": 0}, {"y_range": (-3.0, 2.0)},
                                    {"theta_range": (10.0, -10.0)}, {"sampling": "spiral"},
                                    {"sampling": "grid", "grid_shape": (4, 4)}])
def test_invalid_specs(change):
    with pytest.raises(dio.ConfigError):
        dio.CollectionSpec(**change).validate()


def test_override_flag_allows_wider_envelope():
    dio.CollectionSpec(y_range=(-3.0, 2.0), allow_out_of_range=True).validate()


def test_empty_dataset_round_trip(tmp_path):
    empty = nn.Dataset([], np.zeros((0, 2)), 5)
    dio.save_dataset(tmp_path / "e.jsonl", empty)
    back = dio.load_dataset(tmp_path / "e.jsonl")
    assert len(back) == 0 and back.split_seed == 5


def test_truncated_file_names_the_line(tmp_path):
    ds = dio.generate_dataset(dio.CollectionSpec(sample_count=3, graph_kind="knn"))
    path = tmp_path / "d.jsonl"
    dio.save_dataset(path, ds)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(dio.FormatError, match=r"d\.jsonl:4"):
        dio.load_dataset(path)


def test_missing_field_is_reported(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"format": "tacgraph-dataset", "version": 1}) + "\n" + json.dumps({"label": [1, 2]}) + "\n")
    with pytest.raises(dio.FormatError, match="graph"):
        dio.load_dataset(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"format": "tacgraph-dataset", "version": 99}) + "\n")
    with pytest.raises(dio.VersionError):
        dio.load_dataset(path)
    m = nn.init_model(3, 0)
    data = dio.model_to_json(m)
    data["version"] = 2
    (tmp_path / "m.json").write_text(json.dumps(data))
    with pytest.raises(dio.VersionError):
        dio.load_model(tmp_path / "m.json")


def test_model_round_trip_is_bitwise(tmp_path):
    for dtype in (np.float32, np.float64):
        m = nn.init_model(2, 7, dtype)
        dio.save_model(tmp_path / "m.json", m)
        back = dio.load_model(tmp_path / "m.json")
        assert all(p.dtype == q.dtype and np.array_equal(p, q) for p, q in zip(m.params(), back.params()))


def test_trajectory_round_trip_keeps_errors(tmp_path):
    traj = sv.run_servo(sv.make_contour("square"), sv.OracleEstimator(), max_steps=30)
    dio.save_trajectory(tmp_path / "t.json", traj)
    back = dio.load_trajectory(tmp_path / "t.json")
    assert np.array_equal(back.errors(), traj.errors())


def test_split_determinism():
    a = nn.split_indices(300, 0.75, 11)
    b = nn.split_indices(300, 0.75, 11)
    c = nn.split_indices(300, 0.75, 12)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


def test_config_defaults_and_override(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[sensor]\ncontact_sigma = 4.5   # mm\nrasterize = yes\n[train]\nepochs = 7\n")
    cfg = dio.load_config(path)
    assert cfg["sensor"]["contact_sigma"] == 4.5 and cfg["sensor"]["rasterize"] is True
    assert cfg["train"]["epochs"] == 7
    assert cfg["train"]["batch_size"] == dio.DEFAULTS["train"]["batch_size"]
    assert dio.deformation_from_config(cfg).contact_sigma == 4.5
    again = tmp_path / "again.ini"
    again.write_text(dio.dump_config(cfg))
    assert dio.load_config(again) == cfg


@pytest.mark.parametrize("text", ["[train]\nepoch = 3\n", "[tuning]\nx = 1\n",
                                  "[train]\nepochs = many\n", "epochs = 3\n"])
def test_bad_config_is_rejected(tmp_path, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(dio.ConfigError):
        dio.load_config(path)
