"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two learning criteria share one module-scoped comparison run (three seeds,
vanilla kNN and Voronoi models on the same 2000-sample datasets). It is the
slow part of the suite, bounded to 30 minutes of CPU.
"""

import math
import time

import numpy as np
import pytest

from tacgraph import dataset_io as dio
from tacgraph import graph as gr
from tacgraph import nn
from tacgraph import sensor_sim as ss
from tacgraph import servo as sv
from tacgraph.experiments import compare

SEEDS = (0, 1, 2)
COMPARE_BUDGET_S = 30 * 60


def _train_config() -> nn.TrainConfig:
    t = dio.DEFAULTS["train"]
    return nn.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
                          optimizer=t["optimizer"], train_fraction=t["train_fraction"], dtype=t["dtype"],
                          lr_schedule=t["lr_schedule"])


@pytest.fixture(scope="module")
def comparison():
    cfg = dio.default_config()
    spec = dio.collection_from_config(cfg, "voronoi", sample_count=2000)
    t0 = time.process_time()
    cmp = compare(spec, SEEDS, _train_config(), cfg["train"]["test_fraction"])
    return cmp, time.process_time() - t0


def test_criterion_1_graph_sizes(verdict):
    counts = {}
    for kind in ("hexagonal127", "round331"):
        rest = ss.rest_frame(ss.build_layout(kind))
        counts[kind] = {k: len(gr.build_graph(rest, k).edge_index) for k in ("knn", "delaunay", "voronoi")}
    ok = counts["hexagonal127"]["knn"] == 762 and counts["round331"]["knn"] == 1986
    for kind, ref in (("hexagonal127", 744), ("round331", 1860)):
        ok &= all(abs(counts[kind][k] - ref) <= 0.02 * ref for k in ("delaunay", "voronoi"))
    assert verdict(1, "graph sizes", ok, str(counts))


def test_criterion_2_voronoi_latency(verdict, monkeypatch):
    monkeypatch.setenv("TACGRAPH_THREADS", "1")
    layout = ss.build_layout("round331")
    rng = np.random.default_rng(0)
    frames = [ss.deform(layout, ss.ContactPose(2 + rng.uniform(-2, 2), rng.uniform(-30, 30),
                                               rng.uniform(-5, 5), rng.uniform(-5, 5)), seed=i)
              for i in range(100)]
    gr.build_graph(frames[0], "voronoi")
    gr.collect_timings(reset=True)
    for f in frames:
        gr.build_graph(f, "voronoi")
    mean_ms = 1e3 * float(np.mean(gr.collect_timings(reset=True)["voronoi"]))
    assert verdict(2, "voronoi latency", mean_ms < 50, f"mean {mean_ms:.2f} ms over 100 Round331 frames")


def test_criterion_3_layer_shapes(verdict):
    rng = np.random.default_rng(0)
    got = {}
    for n in (1, 127, 331):
        x = rng.normal(size=(n, 3))
        edges = gr.knn_edges(x[:, :2], 6) if n > 6 else np.zeros((0, 2), int)
        g = gr.TactileGraph(x, edges, gr.GraphKind.VORONOI)
        got[n] = nn.layer_shapes(nn.init_model(3, 0), g)
    ok = all(got[n] == [(n, 16), (n, 32), (n, 48), (n, 64), (n, 96), (96,), (96,), (64,), (2,)] for n in got)
    assert verdict(3, "layer shapes", ok, "; ".join(f"N={n}: {got[n]}" for n in got))


def _kink_free_pair(seed, step=1e-5):
    rng = np.random.default_rng(seed)
    f_in = 2 + seed % 2
    while True:
        m = nn.init_model(f_in, int(rng.integers(1 << 30)), np.float64)
        m.set_params([p if p.ndim == 2 else rng.normal(0.05, 0.1, p.shape) for p in m.params()])
        graphs = []
        for _ in range(3):
            n = int(rng.integers(3, 12))
            x = rng.normal(size=(n, f_in))
            kind = gr.GraphKind.VORONOI if f_in == 3 else gr.GraphKind.KNN
            graphs.append(gr.TactileGraph(x, gr.knn_edges(x[:, :2], 2), kind))
        batch = nn.make_batch(graphs, m, rng.normal(size=(3, 2)))
        _, cache = nn.forward(m, batch, keep=True)
        if min(np.abs(z).min() for z in cache["pre"][:-1]) > 10 * step:
            return m, batch


def test_criterion_4_gradients(verdict):
    worst = []
    for seed in range(5):
        m, batch = _kink_free_pair(seed)
        worst.append(max(nn.gradient_check(m, batch, 1e-5, max_entries=60, seed=seed)))
    ok = max(worst) < 1e-4
    assert verdict(4, "gradient check", ok, "max relative error per pair " + ", ".join(f"{w:.1e}" for w in worst))


def test_criterion_5_permutation_invariance(verdict):
    rng = np.random.default_rng(5)
    m = nn.init_model(3, 1, np.float64)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 80))
        x = rng.normal(size=(n, 3))
        g = gr.TactileGraph(x, gr.knn_edges(x[:, :2], min(4, n - 1)), gr.GraphKind.VORONOI)
        perm = rng.permutation(n)
        pg = gr.TactileGraph(x[perm], np.argsort(perm)[g.edge_index], g.kind)
        a = nn.forward(m, nn.make_batch([g], m))
        b = nn.forward(m, nn.make_batch([pg], m))
        worst = max(worst, float(np.abs(a - b).max()))
    assert verdict(5, "permutation invariance", worst < 1e-9, f"max |f(G) - f(pi G)| = {worst:.1e} over 50 graphs")


def test_criterion_6_directional_accuracy(verdict, comparison):
    cmp, cpu_s = comparison
    s = cmp.summary()
    per_seed = "; ".join(
        f"seed {seed}: vanilla {cmp.get(seed, 'vanilla').result.mae_y:.3f} mm "
        f"{cmp.get(seed, 'vanilla').result.mae_theta:.2f} deg, voronoi {cmp.get(seed, 'voronoi').result.mae_y:.3f} mm "
        f"{cmp.get(seed, 'voronoi').result.mae_theta:.2f} deg" for seed in cmp.seeds)
    ok = s["directional"] and s["accuracy_thresholds_met"] and cpu_s <= COMPARE_BUDGET_S
    detail = (f"voronoi no worse on depth in {s['voronoi_wins']} of {len(cmp.seeds)} seeds, "
              f"all under 0.3 mm and 3 deg: {s['accuracy_thresholds_met']}, {cpu_s / 60:.1f} CPU min; {per_seed}")
    assert verdict(6, "directional accuracy", ok, detail)


def test_criterion_7_oracle_servo(verdict):
    traj = sv.run_servo(sv.make_contour("circle"), sv.OracleEstimator())
    err = traj.errors()
    steady = np.abs(err[len(err) // 3:, 0]).max()
    s_turn, _ = sv.smoothness(traj)
    ok = traj.termination is sv.Termination.COMPLETED and steady < 0.1 and math.isfinite(s_turn)
    assert verdict(7, "oracle servo", ok, f"{traj.termination.value} in {len(traj.steps)} steps, "
                                          f"steady |y error| max {steady:.4f} mm, s_turn {s_turn:.3f} deg/mm")


def test_criterion_8_learned_servo(verdict, comparison):
    cmp, _ = comparison
    seed = cmp.seeds[0]
    cfg = dio.default_config()
    params = dio.deformation_from_config(cfg)
    g = cfg["graph"]
    voronoi = sv.ModelEstimator(cmp.get(seed, "voronoi").trained, "voronoi", g["k"], g["l_scale"])
    vanilla = sv.ModelEstimator(cmp.get(seed, "vanilla").trained, "knn", g["k"], g["l_scale"])
    ends = {kind: sv.run_servo(sv.make_contour(kind), voronoi, deform_params=params).termination
            for kind in ("circle", "square")}
    diverged = {"voronoi": 0, "vanilla": 0}
    for name, est in (("voronoi", voronoi), ("vanilla", vanilla)):
        for s in range(5):
            traj = sv.run_servo(sv.make_contour("compliant_circle"), est, deform_params=params, seed=s)
            diverged[name] += traj.termination is sv.Termination.DIVERGED
    completed = all(t is sv.Termination.COMPLETED for t in ends.values())
    ok = completed and diverged["voronoi"] <= diverged["vanilla"]
    detail = (", ".join(f"{k} {t.value}" for k, t in ends.items())
              + f"; compliant circle divergences over 5 seeds: voronoi {diverged['voronoi']}, "
                f"vanilla {diverged['vanilla']}")
    assert verdict(8, "learned servo", ok, detail)


def test_criterion_9_depth_signature(verdict):
    layout = ss.build_layout("round331")
    params = ss.DeformationParams()
    near = np.linalg.norm(layout.markers, axis=1) <= params.contact_sigma
    means = {}
    for depth in (2.0, 4.0):
        frame = ss.deform(layout, ss.ContactPose(depth, 0.0, 0.0, 0.0), params, seed=0)
        means[depth] = float(gr.voronoi_features(frame).areas[near].mean())
    ok = means[4.0] > means[2.0]
    assert verdict(9, "voronoi depth signature", ok,
                   f"mean cell area within sigma of centre: {means[2.0]:.4f} mm^2 at 2 mm, {means[4.0]:.4f} mm^2 at 4 mm")
