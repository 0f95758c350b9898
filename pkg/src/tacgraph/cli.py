"""Command-line entry point: ``tacgraph <subcommand> [options]``.

Every subcommand writes into a run directory (``--out``) holding the result
files, the SVG figures next to their CSV tables, the effective config and a
``manifest.json`` with the seed, the command line and library versions.
Logs go to stderr. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset_io as dio
from . import plotting
from . import sensor_sim as ss
from .graph import GraphKind, TactileGraph, build_graph, collect_timings, voronoi_features
from .nn import TrainConfig, TrainingDivergedError, evaluate, split_indices, train
from .servo import (ModelEstimator, NoisyEstimator, OracleEstimator, PiController, Termination,
                    make_contour, run_servo, smoothness)

log = logging.getLogger("tacgraph")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run directory ---------------------------------------------------------------

def _versions() -> dict:
    import matplotlib
    import PIL
    import scipy

    return {"tacgraph": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__, "pillow": PIL.__version__}


def _run_dir(args) -> Path:
    out = Path(args.out) if args.out else Path("runs") / f"{args.command}-seed{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, cfg, argv, extra: dict | None = None) -> None:
    (out / "config.ini").write_text(dio.dump_config(cfg))
    manifest = {
        "command": args.command, "argv": list(argv), "seed": args.seed,
        "config": cfg, "config_file": "config.ini",
        "threads": dio.worker_count(), "versions": _versions(),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _train_config(cfg, args) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=args.epochs if getattr(args, "epochs", None) else t["epochs"],
        batch_size=t["batch_size"], learning_rate=t["learning_rate"], optimizer=t["optimizer"],
        seed=args.seed, train_fraction=t["train_fraction"], dtype=t["dtype"], lr_schedule=t["lr_schedule"])


def _frame_from_args(args, cfg) -> ss.MarkerFrame:
    s = cfg["sensor"]
    layout = ss.build_layout(getattr(args, "layout", None) or s["layout"], s["pitch"])
    if getattr(args, "image", None):
        img = ss.read_pgm(_need_file(args.image))
        return ss.frame_from_image(img, layout)
    if getattr(args, "frame", None):
        return ss.load_frame(_need_file(args.frame), layout)
    pose = ss.ContactPose(args.depth, args.theta, args.shear_x, args.shear_roll)
    pose.validate(s["tap_depth"])
    return ss.deform(layout, pose, dio.deformation_from_config(cfg), seed=args.seed)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_dataset(args, cfg, out: Path) -> dict:
    spec = dio.collection_from_config(cfg, args.kind, args.seed, args.samples)
    if args.rasterize:
        spec = replace(spec, rasterize=True)
    if args.grid:
        gy, gt = (int(v) for v in args.grid.lower().split("x"))
        spec = replace(spec, sampling="grid", grid_shape=(gy, gt), sample_count=gy * gt)
    t0 = time.perf_counter()
    ds = dio.generate_dataset(spec)
    log.info("generated %d samples in %.1fs", len(ds), time.perf_counter() - t0)
    dio.save_dataset(out / "dataset.jsonl", ds)
    _write_csv(out / "labels.csv", [{"index": i, "y_depth": a, "theta_roll": b}
                                    for i, (a, b) in enumerate(ds.labels)])
    return {"samples": len(ds), "graph_kind": spec.graph_kind}


def cmd_build_graph(args, cfg, out: Path) -> dict:
    frame = _frame_from_args(args, cfg)
    g = cfg["graph"]
    kind = GraphKind.parse(args.kind or g["kind"])
    graph = build_graph(frame, kind, g["k"], g["l_scale"])
    _write_json(out / "graph.json", graph.to_json())
    ss.save_frame(out / "frame.json", frame)
    info = {"kind": kind.value, "num_nodes": graph.num_nodes, "num_features": graph.num_features,
            "num_edges": int(len(graph.edge_index))}
    if kind is GraphKind.VORONOI:
        res = voronoi_features(frame, g["l_scale"])
        _write_csv(out / "areas.csv", [{"node": i, "x": p[0], "y": p[1], "area": a}
                                       for i, (p, a) in enumerate(zip(frame.positions, res.areas))])
        plotting.area_heatmap(frame, out / "areas.svg", g["l_scale"], res)
    return info


def cmd_bench(args, cfg, out: Path) -> dict:
    g = cfg["graph"]
    rows = []
    params = dio.deformation_from_config(cfg)
    for layout_name in args.layout.split(","):
        layout = ss.build_layout(layout_name, cfg["sensor"]["pitch"])
        rest = ss.rest_frame(layout)
        rng = np.random.default_rng(args.seed)
        frames = []
        for i in range(args.frames):
            pose = ss.ContactPose(ss.DEFAULT_TAP_DEPTH + rng.uniform(*ss.Y_OFFSET_RANGE),
                                  rng.uniform(*ss.THETA_RANGE), rng.uniform(*ss.SHEAR_X_RANGE),
                                  rng.uniform(*ss.SHEAR_ROLL_RANGE))
            frames.append(ss.deform(layout, pose, params, seed=args.seed * 100_003 + i))
        for kind_name in args.kinds.split(","):
            kind = GraphKind.parse(kind_name)
            ref = build_graph(rest, kind, g["k"], g["l_scale"])
            collect_timings(reset=True)
            for f in frames:
                build_graph(f, kind, g["k"], g["l_scale"])
            ms = np.array(collect_timings(reset=True)[kind.value]) * 1e3
            rows.append({"layout": layout.kind.value, "kind": kind.value, "nodes": ref.num_nodes,
                         "edges": int(len(ref.edge_index)), "features": ref.num_features,
                         "frames": len(ms), "mean_ms": float(ms.mean()), "p95_ms": float(np.percentile(ms, 95)),
                         "max_ms": float(ms.max())})
            log.info("%s %s: %d edges, %.2f ms mean", layout.kind.value, kind.value,
                     rows[-1]["edges"], rows[-1]["mean_ms"])
    _write_csv(out / "bench.csv", rows)
    plotting.bench_bars(rows, out / "bench.svg")
    # timing columns vary between runs; the counts table alone is reproducible
    _write_csv(out / "counts.csv", rows, ["layout", "kind", "nodes", "edges", "features"])
    return {"rows": len(rows)}


def _load_or_generate(args, cfg, kind: str):
    if args.dataset:
        return dio.load_dataset(_need_file(args.dataset))
    spec = dio.collection_from_config(cfg, kind, args.seed, args.samples)
    return dio.generate_dataset(spec)


def cmd_train(args, cfg, out: Path) -> dict:
    ds = _load_or_generate(args, cfg, args.kind or cfg["graph"]["kind"])
    tcfg = _train_config(cfg, args)
    pool, test = split_indices(len(ds), 1.0 - cfg["train"]["test_fraction"], args.seed)
    fit = train(ds.subset(pool), tcfg)
    dio.save_model(out / "model.json", fit.model)
    _write_csv(out / "train_log.csv", fit.history, ["epoch", "lr", "train_loss", "val_loss", "seconds"])
    plotting.loss_curves(fit.history, out / "loss.svg")
    res = evaluate(fit.model, ds.subset(test))
    metrics = {"mae_y": res.mae_y, "mae_theta": res.mae_theta, "test_samples": len(test),
               "epochs": tcfg.epochs, "graph_kind": ds.graphs[0].kind.value}
    _write_json(out / "metrics.json", metrics)
    log.info("test mae_y %.3f mm, mae_theta %.2f deg", res.mae_y, res.mae_theta)
    return metrics


def cmd_eval(args, cfg, out: Path) -> dict:
    model = dio.load_model(_need_file(args.model))
    ds = dio.load_dataset(_need_file(args.dataset))
    res = evaluate(model, ds)
    rows = [{"index": i, "y_true": t[0], "theta_true": t[1], "y_pred": p[0], "theta_pred": p[1]}
            for i, (t, p) in enumerate(zip(ds.labels, res.predictions))]
    _write_csv(out / "residuals.csv", rows)
    plotting.residual_scatter({"model": res}, {"model": ds.labels}, out / "residuals.svg")
    metrics = {"mae_y": res.mae_y, "mae_theta": res.mae_theta, "samples": len(ds)}
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_compare(args, cfg, out: Path) -> dict:
    from .experiments import compare, comparison_rows

    seeds = [args.seed + i for i in range(args.seeds)]
    spec = dio.collection_from_config(cfg, "voronoi", args.seed, args.samples)
    cmp = compare(spec, seeds, _train_config(cfg, args), cfg["train"]["test_fraction"])
    rows = comparison_rows(cmp)
    _write_csv(out / "compare.csv", rows, ["seed", "model", "mae_y", "mae_theta", "epochs"])
    _write_csv(out / "compare_timing.csv", rows, ["seed", "model", "train_seconds"])
    plotting.compare_bars(rows, out / "compare.svg")
    last = cmp.seeds[-1]
    plotting.residual_scatter({m: cmp.get(last, m).result for m in ("vanilla", "voronoi")},
                              {m: cmp.test_labels[last] for m in ("vanilla", "voronoi")},
                              out / "residuals.svg")
    for run in cmp.runs:
        dio.save_model(out / f"model_{run.model}_seed{run.seed}.json", run.trained)
    summary = cmp.summary()
    _write_json(out / "report.json", summary)
    log.info("voronoi no worse than vanilla on depth in %d of %d seeds",
             summary["voronoi_wins"], len(seeds))
    return summary


def _estimator(args, cfg):
    g = cfg["graph"]
    if args.estimator == "oracle":
        base = OracleEstimator()
    else:
        if not args.model:
            raise UsageError("--estimator model needs --model PATH")
        model = dio.load_model(_need_file(args.model))
        kind = "voronoi" if model.f_in == 3 else "knn"
        base = ModelEstimator(model, kind, g["k"], g["l_scale"])
    if args.noise_y or args.noise_theta:
        return NoisyEstimator(base, args.noise_y, args.noise_theta, args.seed)
    return base


def cmd_servo(args, cfg, out: Path) -> dict:
    sv, s = cfg["servo"], cfg["sensor"]
    contour = make_contour(args.contour or sv["contour"])
    controller = PiController(sv["kp_r"], sv["ki_r"], sv["kp_t"], sv["ki_t"], sv["integral_clamp_r"],
                              sv["integral_clamp_t"], sv["step_length"], sv["y_ref"], sv["theta_ref"])
    layout = ss.build_layout(s["layout"], s["pitch"])
    traj = run_servo(contour, _estimator(args, cfg), controller, dio.deformation_from_config(cfg), layout,
                     args.max_steps or sv["max_steps"], args.seed)
    dio.save_trajectory(out / "trajectory.json", traj)
    rows = [{"step": st.step, "x": st.pose.position[0], "y": st.pose.position[1], "heading": st.pose.heading,
             "y_est": st.estimate[0], "theta_est": st.estimate[1], "y_true": st.truth.y_depth,
             "theta_true": st.truth.theta_roll, "penetration": st.penetration}
            for st in traj.steps]
    _write_csv(out / "trajectory.csv", rows)
    plotting.trajectory_plot(contour, {args.estimator: traj}, out / "trajectory.svg")
    plotting.error_trace(traj, out / "errors.svg", sv["y_ref"], sv["theta_ref"])
    info = {"termination": traj.termination.value, "steps": len(traj.steps), "contour": contour.kind.value}
    if len(traj.steps) >= 3:
        info["s_turn"], info["s_slope"] = smoothness(traj)
    _write_json(out / "summary.json", info)
    log.info("servo %s on %s: %s after %d steps", args.estimator, contour.kind.value,
             traj.termination.value, len(traj.steps))
    if traj.termination is not Termination.COMPLETED:
        log.warning("trajectory did not complete")
    return info


def cmd_plot(args, cfg, out: Path) -> dict:
    made = []
    if args.trajectory:
        trajs = {Path(p).parent.name or Path(p).stem: dio.load_trajectory(_need_file(p)) for p in args.trajectory}
        contour = make_contour(args.contour or next(iter(trajs.values())).contour or cfg["servo"]["contour"])
        made.append(plotting.trajectory_plot(contour, trajs, out / "trajectories.svg"))
    else:
        frame = _frame_from_args(args, cfg)
        res = voronoi_features(frame, cfg["graph"]["l_scale"])
        _write_csv(out / "areas.csv", [{"node": i, "area": a} for i, a in enumerate(res.areas)])
        made.append(plotting.area_heatmap(frame, out / "areas.svg", cfg["graph"]["l_scale"], res,
                                          title=f"depth {frame.source_pose.y_depth:g} mm"
                                          if frame.source_pose else None))
    return {"figures": [p.name for p in made]}


COMMANDS = {
    "gen-dataset": cmd_gen_dataset, "build-graph": cmd_build_graph, "bench": cmd_bench,
    "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "servo": cmd_servo, "plot": cmd_plot,
}


def _add_pose_flags(p) -> None:
    p.add_argument("--layout", help="round331, hexagonal127")
    p.add_argument("--frame", help="marker frame JSON")
    p.add_argument("--image", help="PGM tactile image to run blob detection on")
    p.add_argument("--depth", type=float, default=ss.DEFAULT_TAP_DEPTH, help="synthetic contact depth, mm")
    p.add_argument("--theta", type=float, default=0.0, help="synthetic roll, deg")
    p.add_argument("--shear-x", type=float, default=0.0)
    p.add_argument("--shear-roll", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [sensor], [graph], [train], [servo] overrides")
    common.add_argument("--out", help="run directory (default runs/<command>-seed<N>)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tacgraph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-dataset", parents=[common], help="synthesise a labelled graph dataset")
    p.add_argument("--kind", choices=[k.value for k in GraphKind])
    p.add_argument("--samples", type=int)
    p.add_argument("--grid", help="grid sampling as DEPTHxROLL steps, e.g. 5x5")
    p.add_argument("--rasterize", action="store_true", help="go through rendered images and blob detection")

    p = sub.add_parser("build-graph", parents=[common], help="one frame to one graph")
    p.add_argument("--kind", choices=[k.value for k in GraphKind])
    _add_pose_flags(p)

    p = sub.add_parser("bench", parents=[common], help="graph sizes and build latency")
    p.add_argument("--layout", default="hexagonal127,round331")
    p.add_argument("--kinds", default="knn,delaunay,voronoi")
    p.add_argument("--frames", type=int, default=100)

    p = sub.add_parser("train", parents=[common], help="fit a pose regressor")
    p.add_argument("--dataset", help="dataset JSONL; generated from the config when omitted")
    p.add_argument("--kind", choices=[k.value for k in GraphKind])
    p.add_argument("--samples", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="MAE of a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("compare", parents=[common], help="vanilla kNN vs. Voronoi models over seeds")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--samples", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("servo", parents=[common], help="closed-loop contour following")
    p.add_argument("--contour", help="circle, textured_circle, square, beveled_prism, compliant_circle")
    p.add_argument("--estimator", choices=["oracle", "model"], default="oracle")
    p.add_argument("--model", help="saved model JSON for --estimator model")
    p.add_argument("--noise-y", type=float, default=0.0)
    p.add_argument("--noise-theta", type=float, default=0.0)
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("plot", parents=[common], help="area heat map or trajectory overlay")
    p.add_argument("--trajectory", nargs="+", help="trajectory JSON files to overlay")
    p.add_argument("--contour")
    _add_pose_flags(p)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:        # --help, --version and usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = dio.load_config(_need_file(args.config) if args.config else None)
        out = _run_dir(args)
        info = COMMANDS[args.command](args, cfg, out)
        _write_manifest(out, args, cfg, argv, {"outputs": sorted(p.name for p in out.iterdir()
                                                                 if p.name != "manifest.json")})
        print(json.dumps({"out": str(out), **(info or {})}, sort_keys=True, default=str))
        return EXIT_OK
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        log.error("missing input: %s", exc)
    except (dio.ConfigError, dio.FormatError, dio.VersionError) as exc:
        log.error("bad input: %s", exc)
    except TrainingDivergedError as exc:
        log.error("training diverged: %s", exc)
    except (ss.ConfigurationError, ss.BlobCountError, ValueError) as exc:
        log.error("%s", exc)
    return EXIT_RUNTIME


if __name__ == "__main__":
    os.environ.setdefault("TACGRAPH_THREADS", "1")
    sys.exit(main())
