"""Vanilla-vs-Voronoi comparison shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset_io import CollectionSpec, generate_dataset
from .graph import knn_graph
from .nn import Dataset, EvalResult, GcnModel, TrainConfig, evaluate, split_indices, train

log = logging.getLogger(__name__)

MODELS = ("vanilla", "voronoi")


def vanilla_view(dataset: Dataset, k: int = 6) -> Dataset:
    """Same samples as kNN graphs on the marker positions only (two features)."""
    graphs = [knn_graph(g.node_features[:, :2], k) for g in dataset.graphs]
    return Dataset(graphs, dataset.labels.copy(), dataset.split_seed)


@dataclass
class CompareRun:
    seed: int
    model: str
    result: EvalResult
    trained: GcnModel
    history: list[dict]
    train_seconds: float

    def row(self) -> dict:
        return {"seed": self.seed, "model": self.model, "mae_y": self.result.mae_y,
                "mae_theta": self.result.mae_theta, "epochs": len(self.history),
                "train_seconds": self.train_seconds}


@dataclass
class Comparison:
    runs: list[CompareRun] = field(default_factory=list)
    test_labels: dict = field(default_factory=dict)     # seed -> (n, 2)

    def get(self, seed: int, model: str) -> CompareRun:
        return next(r for r in self.runs if r.seed == seed and r.model == model)

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.runs})

    def wins(self) -> int:
        """Seeds where the Voronoi model's depth MAE is no worse than vanilla's."""
        return sum(self.get(s, "voronoi").result.mae_y <= self.get(s, "vanilla").result.mae_y
                   for s in self.seeds)

    def summary(self, max_y: float = 0.3, max_theta: float = 3.0) -> dict:
        accurate = all(r.result.mae_y < max_y and r.result.mae_theta < max_theta for r in self.runs)
        need = len(self.seeds) // 2 + 1
        return {"seeds": self.seeds, "voronoi_wins": self.wins(), "wins_needed": need,
                "directional": self.wins() >= need, "accuracy_thresholds_met": accurate,
                "mae_y_threshold": max_y, "mae_theta_threshold": max_theta}


def compare(spec: CollectionSpec, seeds, config: TrainConfig, test_fraction: float = 0.25,
            workers: int | None = None) -> Comparison:
    """One synthetic dataset per seed, split train/test, both models trained on the
    same frames with the same seed."""
    out = Comparison()
    for seed in seeds:
        t0 = time.perf_counter()
        vor = generate_dataset(replace(spec, seed=seed, graph_kind="voronoi"), workers)
        views = {"vanilla": vanilla_view(vor, spec.k), "voronoi": vor}
        log.info("seed %d: %d samples generated in %.1fs", seed, len(vor), time.perf_counter() - t0)
        pool, test = split_indices(len(vor), 1.0 - test_fraction, seed)
        out.test_labels[seed] = vor.labels[test]
        for name in MODELS:
            ds = views[name]
            t0 = time.perf_counter()
            fit = train(ds.subset(pool), replace(config, seed=seed))
            secs = time.perf_counter() - t0
            res = evaluate(fit.model, ds.subset(test))
            log.info("seed %d %s: mae_y %.3f mm, mae_theta %.2f deg (%.0fs)",
                     seed, name, res.mae_y, res.mae_theta, secs)
            out.runs.append(CompareRun(seed, name, res, fit.model, fit.history, secs))
    return out


def comparison_rows(cmp: Comparison) -> list[dict]:
    return [r.row() for r in cmp.runs]


def mean_abs(values) -> float:
    return float(np.mean(np.abs(values)))
