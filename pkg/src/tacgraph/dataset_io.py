"""Tapping-protocol dataset generation, persistence and run configuration."""

from __future__ import annotations

import configparser
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import sensor_sim as ss
from .graph import GraphKind, TactileGraph, build_graph
from .nn import Dataset, GcnModel, NormStats

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed file; the message names the line or field at fault."""


class VersionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class CollectionSpec:
    layout: str = "round331"
    pitch: float = 1.0
    sample_count: int = 5000
    y_range: tuple[float, float] = ss.Y_OFFSET_RANGE          # offset around tap_depth, mm
    theta_range: tuple[float, float] = ss.THETA_RANGE
    shear_x_range: tuple[float, float] = ss.SHEAR_X_RANGE
    shear_roll_range: tuple[float, float] = ss.SHEAR_ROLL_RANGE
    tap_depth: float = ss.DEFAULT_TAP_DEPTH
    sampling: str = "uniform"                                 # uniform | grid
    grid_shape: tuple[int, int] | None = None                 # (depth steps, roll steps)
    seed: int = 0
    graph_kind: str = "voronoi"
    k: int = 6
    l_scale: float = 1.3
    deformation: ss.DeformationParams = field(default_factory=ss.DeformationParams)
    rasterize: bool = False
    image_size: int = 640
    dot_radius: float = 3.0
    allow_out_of_range: bool = False

    def validate(self) -> None:
        if self.sample_count < 1:
            raise ConfigError("sample_count must be at least 1")
        if self.sampling not in ("uniform", "grid"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.sampling == "grid":
            if self.grid_shape is None or self.grid_shape[0] * self.grid_shape[1] != self.sample_count:
                raise ConfigError("grid sampling needs grid_shape whose product equals sample_count")
        GraphKind.parse(self.graph_kind)
        if self.allow_out_of_range:
            return
        envelope = [("y_range", self.y_range, ss.Y_OFFSET_RANGE),
                    ("theta_range", self.theta_range, ss.THETA_RANGE),
                    ("shear_x_range", self.shear_x_range, ss.SHEAR_X_RANGE),
                    ("shear_roll_range", self.shear_roll_range, ss.SHEAR_ROLL_RANGE)]
        for name, (lo, hi), (elo, ehi) in envelope:
            if lo > hi or lo < elo or hi > ehi:
                raise ConfigError(f"{name}=({lo}, {hi}) leaves the training envelope [{elo}, {ehi}]")


def sample_pose(spec: CollectionSpec, index: int) -> tuple[ss.ContactPose, int]:
    """Pose and deformation noise seed for sample ``index``; depends only on (seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    if spec.sampling == "grid":
        gy, gt = spec.grid_shape
        iy, it = divmod(index, gt)
        y = np.linspace(*spec.y_range, gy)[iy]
        theta = np.linspace(*spec.theta_range, gt)[it]
    else:
        y = rng.uniform(*spec.y_range)
        theta = rng.uniform(*spec.theta_range)
    shear_x = rng.uniform(*spec.shear_x_range)
    shear_roll = rng.uniform(*spec.shear_roll_range)
    pose = ss.ContactPose(float(spec.tap_depth + y), float(theta), float(shear_x), float(shear_roll))
    return pose, int(rng.integers(2 ** 31))


def _make_sample(spec: CollectionSpec, layout: ss.SensorLayout, index: int):
    pose, noise_seed = sample_pose(spec, index)
    frame = ss.deform(layout, pose, spec.deformation, noise_seed)
    if spec.rasterize:
        img = ss.rasterize(frame, spec.image_size, spec.image_size, spec.dot_radius)
        frame = ss.frame_from_image(img, layout, pose)
    graph = build_graph(frame, spec.graph_kind, spec.k, spec.l_scale)
    return graph, pose.label()


def _make_chunk(spec: CollectionSpec, indices: list[int]):
    layout = ss.build_layout(spec.layout, spec.pitch)
    out = []
    for i in indices:
        try:
            out.append(_make_sample(spec, layout, i))
        except (ss.BlobCountError, ValueError) as exc:
            if not spec.rasterize:
                raise
            log.debug("sample %d skipped: %s", i, exc)
            out.append(None)
    return out


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TACGRAPH_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(spec: CollectionSpec, workers: int | None = None) -> Dataset:
    """Synthesise ``sample_count`` labelled graphs. Labels are (y_depth, theta_roll);
    shear only perturbs the frames."""
    spec.validate()
    workers = worker_count() if workers is None else max(1, workers)
    indices = list(range(spec.sample_count))
    if workers == 1:
        results = _make_chunk(spec, indices)
    else:
        chunks = [indices[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_make_chunk, [spec] * workers, chunks))
        results = [None] * len(indices)
        for chunk, part in zip(chunks, parts):
            for i, r in zip(chunk, part):
                results[i] = r
    kept = [r for r in results if r is not None]
    skipped = len(results) - len(kept)
    if skipped:
        log.warning("skipped %d of %d samples after blob-detection failures", skipped, len(results))
    return Dataset([g for g, _ in kept], np.array([lab for _, lab in kept]).reshape(-1, 2), spec.seed)


# -- persistence -----------------------------------------------------------------

def _check_header(obj, expected_format: str, where: str) -> None:
    if not isinstance(obj, dict) or obj.get("format") != expected_format:
        raise FormatError(f"{where}: not a {expected_format} file")
    if obj.get("version") != FORMAT_VERSION:
        raise VersionError(f"{where}: version {obj.get('version')!r}, expected {FORMAT_VERSION}")


def _parse_json(text: str, where: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{where}: {exc.msg} at column {exc.colno}") from None


def save_dataset(path, dataset: Dataset) -> None:
    header = {"format": "tacgraph-dataset", "version": FORMAT_VERSION, "split_seed": dataset.split_seed,
              "norm_stats": None if dataset.norm is None else dataset.norm.to_json()}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for g, lab in zip(dataset.graphs, dataset.labels):
            fh.write(json.dumps({"graph": g.to_json(), "label": [float(lab[0]), float(lab[1])]}) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = _parse_json(lines[0], f"{path}:1")
    _check_header(header, "tacgraph-dataset", f"{path}:1")
    graphs, labels = [], []
    for n, line in enumerate(lines[1:], start=2):
        obj = _parse_json(line, f"{path}:{n}")
        try:
            graphs.append(TactileGraph.from_json(obj["graph"]))
            lab = [float(v) for v in obj["label"]]
        except KeyError as exc:
            raise FormatError(f"{path}:{n}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{n}: {exc}") from None
        if len(lab) != 2:
            raise FormatError(f"{path}:{n}: label must have two entries")
        labels.append(lab)
    norm = header.get("norm_stats")
    return Dataset(graphs, np.array(labels).reshape(-1, 2), int(header.get("split_seed", 0)),
                   NormStats.from_json(norm) if norm else None)


def model_to_json(model: GcnModel) -> dict:
    return {
        "format": "tacgraph-model", "version": FORMAT_VERSION,
        "dtype": model.dtype.name, "f_in": model.f_in,
        "gcn": [{"w": w.tolist(), "b": b.tolist()} for w, b in model.gcn],
        "fc": [{"w": w.tolist(), "b": b.tolist()} for w, b in model.fc],
        "norm_stats": model.norm.to_json(),
    }


def model_from_json(data: dict, where: str = "model") -> GcnModel:
    _check_header(data, "tacgraph-model", where)
    try:
        dtype = np.dtype(data.get("dtype", "float64"))
        layers = {key: [(np.asarray(l["w"], dtype=dtype), np.asarray(l["b"], dtype=dtype))
                        for l in data[key]] for key in ("gcn", "fc")}
        return GcnModel(int(data["f_in"]), layers["gcn"], layers["fc"], NormStats.from_json(data["norm_stats"]))
    except KeyError as exc:
        raise FormatError(f"{where}: missing field {exc.args[0]!r}") from None


def save_model(path, model: GcnModel) -> None:
    Path(path).write_text(json.dumps(model_to_json(model)))


def load_model(path) -> GcnModel:
    return model_from_json(_parse_json(Path(path).read_text(), str(path)), str(path))


def save_trajectory(path, trajectory) -> None:
    data = {"format": "tacgraph-trajectory", "version": FORMAT_VERSION}
    data.update(trajectory.to_json())
    Path(path).write_text(json.dumps(data))


def load_trajectory(path):
    from .servo import Trajectory

    data = _parse_json(Path(path).read_text(), str(path))
    _check_header(data, "tacgraph-trajectory", str(path))
    try:
        return Trajectory.from_json(data)
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc.args[0]!r}") from None


# -- configuration -------------------------------------------------------------

DEFAULTS: dict[str, dict[str, object]] = {
    "sensor": {
        "layout": "round331", "pitch": 1.0, "dome_radius": 12.0, "push_gain": 0.25,
        "contact_sigma": 3.0, "roll_offset_gain": 8.0, "noise_std": 0.01,
        "compliance_gain": 1.0, "shear_gain": 0.05, "tap_depth": ss.DEFAULT_TAP_DEPTH,
        "rasterize": False, "image_size": 640, "dot_radius": 3.0,
    },
    "graph": {"kind": "voronoi", "k": 6, "l_scale": 1.3},
    "train": {
        "samples": 2000, "sampling": "uniform", "epochs": 100, "batch_size": 32,
        "learning_rate": 2e-3, "optimizer": "adam", "train_fraction": 0.85,
        "test_fraction": 0.25, "dtype": "float32", "lr_schedule": "cosine",
    },
    "servo": {
        "contour": "circle", "kp_r": 0.5, "ki_r": 0.05, "kp_t": 0.4, "ki_t": 0.02,
        "integral_clamp_r": 20.0, "integral_clamp_t": 200.0, "step_length": 1.0,
        "y_ref": 2.0, "theta_ref": 0.0, "max_steps": 600,
    },
}


def _coerce(default, raw: str, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return type(default)(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None


def default_config() -> dict[str, dict[str, object]]:
    return {sec: dict(vals) for sec, vals in DEFAULTS.items()}


def load_config(path=None) -> dict[str, dict[str, object]]:
    """Sections [sensor], [graph], [train], [servo] of key = value lines over the defaults."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in cfg:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in cfg[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            cfg[section][key] = _coerce(DEFAULTS[section][key], raw, f"{path} [{section}] {key}")
    return cfg


def dump_config(cfg: dict[str, dict[str, object]]) -> str:
    lines = []
    for section, vals in cfg.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in vals.items())
        lines.append("")
    return "\n".join(lines)


def deformation_from_config(cfg) -> ss.DeformationParams:
    s = cfg["sensor"]
    names = {f.name for f in fields(ss.DeformationParams)}
    return ss.DeformationParams(**{k: float(v) for k, v in s.items() if k in names})


def collection_from_config(cfg, graph_kind: str | None = None, seed: int = 0,
                           sample_count: int | None = None) -> CollectionSpec:
    s, g, t = cfg["sensor"], cfg["graph"], cfg["train"]
    return CollectionSpec(
        layout=s["layout"], pitch=s["pitch"], tap_depth=s["tap_depth"],
        sample_count=sample_count or t["samples"], sampling=t["sampling"], seed=seed,
        graph_kind=graph_kind or g["kind"], k=g["k"], l_scale=g["l_scale"],
        deformation=deformation_from_config(cfg), rasterize=s["rasterize"],
        image_size=s["image_size"], dot_radius=s["dot_radius"],
    )

