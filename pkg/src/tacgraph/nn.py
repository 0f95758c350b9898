"""Graph convolutional pose regressor written directly in numpy.

Five GCN layers (16, 32, 48, 64, 96 filters) with ReLU, global mean pooling,
then fully-connected layers 96 -> 96 -> 64 -> 2. Each GCN layer computes
``relu(A_hat @ H @ W + b)`` with the symmetric-normalised self-looped
adjacency ``A_hat = D^-1/2 (A + I) D^-1/2``. Gradients are accumulated by hand
in reverse order; batches are block-diagonal sparse matrices so a whole
mini-batch goes through one sparse product per layer.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import TactileGraph

log = logging.getLogger(__name__)

GCN_WIDTHS = (16, 32, 48, 64, 96)
FC_WIDTHS = (96, 64, 2)


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    def __init__(self, layer: int, where: str = "forward"):
        super().__init__(f"non-finite values in {where} pass at layer {layer}")
        self.layer = layer


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class NormStats:
    feat_mean: np.ndarray
    feat_std: np.ndarray
    label_mean: np.ndarray
    label_std: np.ndarray

    @classmethod
    def identity(cls, f_in: int) -> "NormStats":
        return cls(np.zeros(f_in), np.ones(f_in), np.zeros(2), np.ones(2))

    @classmethod
    def fit(cls, graphs: list[TactileGraph], labels: np.ndarray) -> "NormStats":
        feats = np.concatenate([g.node_features for g in graphs])
        labels = np.asarray(labels, dtype=float)
        return cls(feats.mean(axis=0), _safe_std(feats), labels.mean(axis=0), _safe_std(labels))

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feat_mean", "feat_std", "label_mean", "label_std")}

    @classmethod
    def from_json(cls, data: dict) -> "NormStats":
        return cls(*(np.asarray(data[k], dtype=float)
                     for k in ("feat_mean", "feat_std", "label_mean", "label_std")))


def _safe_std(x: np.ndarray) -> np.ndarray:
    s = x.std(axis=0)
    return np.where(s > 0, s, 1.0)


@dataclass
class GcnModel:
    f_in: int
    gcn: list[tuple[np.ndarray, np.ndarray]]
    fc: list[tuple[np.ndarray, np.ndarray]]
    norm: NormStats

    @property
    def dtype(self):
        return self.gcn[0][0].dtype

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.gcn + self.fc for p in layer]

    def set_params(self, flat: list[np.ndarray]) -> None:
        it = iter(flat)
        self.gcn = [(next(it), next(it)) for _ in self.gcn]
        self.fc = [(next(it), next(it)) for _ in self.fc]

    def astype(self, dtype) -> "GcnModel":
        m = copy.deepcopy(self)
        m.set_params([p.astype(dtype) for p in self.params()])
        return m


def init_model(f_in: int, seed: int = 0, dtype=np.float64, norm: NormStats | None = None) -> GcnModel:
    """Glorot-uniform weights, zero biases."""
    if f_in not in (2, 3):
        raise ShapeError(f"input dimension must be 2 or 3, got {f_in}")
    rng = np.random.default_rng(seed)

    def glorot(n_in, n_out):
        lim = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_in, n_out)).astype(dtype), np.zeros(n_out, dtype=dtype)

    widths = (f_in,) + GCN_WIDTHS
    gcn = [glorot(a, b) for a, b in zip(widths[:-1], widths[1:])]
    fc_widths = (GCN_WIDTHS[-1],) + FC_WIDTHS
    fc = [glorot(a, b) for a, b in zip(fc_widths[:-1], fc_widths[1:])]
    return GcnModel(f_in, gcn, fc, norm or NormStats.identity(f_in))


# -- batching ----------------------------------------------------------------

def normalized_adjacency_coo(edge_index: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """COO triplets of D^-1/2 (A + I) D^-1/2 with A symmetrised from the edge list."""
    e = np.asarray(edge_index, dtype=np.int64).reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    pairs = np.concatenate([e, e[:, ::-1], np.repeat(np.arange(n), 2).reshape(-1, 2)])
    pairs = np.unique(pairs, axis=0)
    deg = np.bincount(pairs[:, 0], minlength=n).astype(float)
    inv = 1.0 / np.sqrt(deg)
    return pairs[:, 0], pairs[:, 1], inv[pairs[:, 0]] * inv[pairs[:, 1]]


def normalized_adjacency(edge_index: np.ndarray, n: int) -> sp.csr_matrix:
    r, c, v = normalized_adjacency_coo(edge_index, n)
    return sp.csr_matrix((v, (r, c)), shape=(n, n))


@dataclass
class GraphBatch:
    x: np.ndarray               # standardised node features, all graphs stacked
    adj: sp.csr_matrix          # block-diagonal A_hat
    pool: sp.csr_matrix         # (B, N_total) mean-pooling operator
    labels: np.ndarray | None   # (B, 2) physical units

    @property
    def size(self) -> int:
        return self.pool.shape[0]


class _Prepared:
    """Per-graph adjacency triplets cached across epochs."""

    def __init__(self, graphs: list[TactileGraph]):
        self.graphs = graphs
        self.coo = [normalized_adjacency_coo(g.edge_index, g.num_nodes) for g in graphs]

    def batch(self, idx, norm: NormStats, labels: np.ndarray | None, dtype) -> GraphBatch:
        return _assemble([self.graphs[i] for i in idx], [self.coo[i] for i in idx], norm,
                         None if labels is None else labels[idx], dtype)


def _assemble(graphs, coos, norm: NormStats, labels, dtype) -> GraphBatch:
    sizes = np.array([g.num_nodes for g in graphs])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    total = int(sizes.sum())
    rows = np.concatenate([r + o for (r, _, _), o in zip(coos, offsets)])
    cols = np.concatenate([c + o for (_, c, _), o in zip(coos, offsets)])
    vals = np.concatenate([v for _, _, v in coos])
    adj = sp.csr_matrix((vals.astype(dtype), (rows, cols)), shape=(total, total))
    gid = np.repeat(np.arange(len(graphs)), sizes)
    pool = sp.csr_matrix(((1.0 / sizes[gid]).astype(dtype), (gid, np.arange(total))),
                         shape=(len(graphs), total))
    x = np.concatenate([g.node_features for g in graphs])
    x = ((x - norm.feat_mean) / norm.feat_std).astype(dtype)
    lab = None if labels is None else np.asarray(labels, dtype=float).reshape(-1, 2)
    return GraphBatch(x, adj, pool, lab)


def make_batch(graphs: list[TactileGraph], model: GcnModel, labels=None) -> GraphBatch:
    for g in graphs:
        if g.num_features != model.f_in:
            raise ShapeError(f"graph has {g.num_features} features, model expects {model.f_in}")
    coos = [normalized_adjacency_coo(g.edge_index, g.num_nodes) for g in graphs]
    return _assemble(graphs, coos, model.norm, labels, model.dtype)


# -- forward / backward --------------------------------------------------------

def _check(arr: np.ndarray, layer: int, where: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(layer, where)


def forward(model: GcnModel, batch: GraphBatch, keep: bool = False):
    """Standardised outputs (B, 2); with ``keep`` also the activation cache."""
    if batch.x.shape[1] != model.f_in:
        raise ShapeError(f"batch has {batch.x.shape[1]} features, model expects {model.f_in}")
    cache = {"agg": [], "pre": [], "act": [batch.x]}
    h = batch.x
    for i, (w, b) in enumerate(model.gcn):
        agg = batch.adj @ h
        z = agg @ w + b
        _check(z, i)
        h = np.maximum(z, 0)
        cache["agg"].append(agg)
        cache["pre"].append(z)
        cache["act"].append(h)
    h = batch.pool @ h
    cache["pooled"] = h
    n_fc = len(model.fc)
    for j, (w, b) in enumerate(model.fc):
        z = h @ w + b
        _check(z, len(model.gcn) + j)
        h = np.maximum(z, 0) if j < n_fc - 1 else z
        cache["pre"].append(z)
        cache["act"].append(h)
    return (h, cache) if keep else h


def layer_shapes(model: GcnModel, graph: TactileGraph) -> list[tuple[int, ...]]:
    """Activation shapes after every layer, pooling included."""
    _, cache = forward(model, make_batch([graph], model), keep=True)
    acts = cache["act"][1:]
    n_gcn = len(model.gcn)
    shapes = [a.shape for a in acts[:n_gcn]]
    shapes.append(cache["pooled"].shape[1:])
    shapes.extend(a.shape[1:] for a in acts[n_gcn:])
    return shapes


def predict(model: GcnModel, graphs: list[TactileGraph], batch_size: int = 256) -> np.ndarray:
    """Pose predictions (n, 2) in physical units: mm and deg."""
    out = []
    for s in range(0, len(graphs), batch_size):
        out.append(forward(model, make_batch(graphs[s:s + batch_size], model)))
    if not out:
        return np.zeros((0, 2))
    y = np.concatenate(out).astype(float)
    return y * model.norm.label_std + model.norm.label_mean


def gcn_forward(model: GcnModel, graph: TactileGraph) -> tuple[float, float]:
    y, theta = predict(model, [graph])[0]
    return float(y), float(theta)


def loss_and_grad(model: GcnModel, batch: GraphBatch) -> tuple[float, list[np.ndarray]]:
    """Mean squared error on standardised labels and its gradient per parameter."""
    if batch.labels is None or batch.size == 0:
        raise ValueError("loss needs a non-empty labelled batch")
    out, cache = forward(model, batch, keep=True)
    target = ((batch.labels - model.norm.label_mean) / model.norm.label_std).astype(out.dtype)
    diff = out - target
    loss = float(np.mean(diff.astype(float) ** 2))
    grads: list[np.ndarray] = []

    d = 2.0 * diff / diff.size
    n_gcn, n_fc = len(model.gcn), len(model.fc)
    acts, pres = cache["act"], cache["pre"]
    for j in reversed(range(n_fc)):
        w, _ = model.fc[j]
        if j < n_fc - 1:
            d = d * (pres[n_gcn + j] > 0)
        inp = cache["pooled"] if j == 0 else acts[n_gcn + j]
        grads.append(d.sum(axis=0))
        grads.append(inp.T @ d)
        d = d @ w.T
        _check(d, n_gcn + j, "backward")
    d = batch.pool.T @ d
    for i in reversed(range(n_gcn)):
        w, _ = model.gcn[i]
        d = d * (pres[i] > 0)
        grads.append(d.sum(axis=0))
        grads.append(cache["agg"][i].T @ d)
        if i:
            d = batch.adj.T @ (d @ w.T)
            _check(d, i, "backward")
    grads.reverse()
    return loss, grads


def gradient_check(model: GcnModel, batch: GraphBatch, step: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0) -> list[float]:
    """Central-difference check of every parameter tensor.

    Returns one relative error per tensor: max |analytic - numeric| divided by
    the larger of the two gradients' max magnitudes (1e-12 floor). Run it on a
    float64 model. ``max_entries`` checks a seeded sample of entries per
    tensor (always including the largest analytic entry) instead of all.
    """
    _, grads = loss_and_grad(model, batch)
    params = [p.copy() for p in model.params()]
    rng = np.random.default_rng(seed)
    errors = []
    for p, g in zip(params, grads):
        flat = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat = np.unique(np.append(rng.choice(p.size, max_entries - 1, replace=False),
                                       np.argmax(np.abs(g))))
        num = np.zeros_like(p)
        ana = np.zeros_like(p)
        for idx in (np.unravel_index(i, p.shape) for i in flat):
            ana[idx] = g[idx]
            orig = p[idx]
            p[idx] = orig + step
            model.set_params(params)
            up = loss_value(model, batch)
            p[idx] = orig - step
            model.set_params(params)
            down = loss_value(model, batch)
            p[idx] = orig
            num[idx] = (up - down) / (2 * step)
        scale = max(np.abs(g).max(), np.abs(num).max(), 1e-12)
        errors.append(float(np.abs(ana - num).max() / scale))
    model.set_params(params)
    return errors


def loss_value(model: GcnModel, batch: GraphBatch) -> float:
    """Loss only, same definition as loss_and_grad."""
    out = forward(model, batch)
    target = (batch.labels - model.norm.label_mean) / model.norm.label_std
    return float(np.mean((out.astype(float) - target) ** 2))


# -- training --------------------------------------------------------------------

@dataclass
class Dataset:
    graphs: list[TactileGraph]
    labels: np.ndarray                  # (n, 2): y_depth mm, theta_roll deg
    split_seed: int = 0
    norm: NormStats | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1, 2)
        if len(self.graphs) != len(self.labels):
            raise ValueError("graphs and labels differ in length")
        if self.graphs:
            kinds = {g.kind for g in self.graphs}
            dims = {g.num_features for g in self.graphs}
            if len(kinds) > 1 or len(dims) > 1:
                raise ValueError("all graphs in a dataset must share kind and feature count")
        if not np.isfinite(self.labels).all():
            raise ValueError("labels must be finite")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def samples(self) -> list[tuple[TactileGraph, tuple[float, float]]]:
        return [(g, (float(a), float(b))) for g, (a, b) in zip(self.graphs, self.labels)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset([self.graphs[i] for i in idx], self.labels[idx], self.split_seed, self.norm)

    def split(self, fraction: float, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        return split_indices(len(self), fraction, self.split_seed if seed is None else seed)


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random split; the first part holds round(fraction * n) indices."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    seed: int = 0
    train_fraction: float = 0.85        # of the samples handed to train(); the rest picks the checkpoint
    dtype: str = "float32"
    lr_schedule: str = "cosine"         # constant | cosine (anneals to 5% of the initial rate)

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def rate(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        floor = 0.05 * self.learning_rate
        return floor + 0.5 * (self.learning_rate - floor) * (1 + math.cos(math.pi * epoch / (self.epochs - 1)))


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            out.append(p - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype))
        return out


class Sgd:
    def __init__(self, params, lr=1e-2):
        self.lr = lr

    def step(self, params, grads):
        return [p - (self.lr * g).astype(p.dtype) for p, g in zip(params, grads)]


@dataclass
class TrainResult:
    model: GcnModel
    history: list[dict] = field(default_factory=list)  # epoch, train_loss, val_loss, seconds
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None

    @property
    def epoch_seconds(self) -> list[float]:
        return [h["seconds"] for h in self.history]


def _mean_loss(model, prepared, idx, labels, chunk=256) -> float:
    total = 0.0
    for s in range(0, len(idx), chunk):
        part = idx[s:s + chunk]
        batch = prepared.batch(part, model.norm, labels, model.dtype)
        out = forward(model, batch)
        target = (batch.labels - model.norm.label_mean) / model.norm.label_std
        total += float(np.sum((out - target) ** 2))
    return total / (2 * len(idx))


def train(dataset: Dataset, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit a model; returns the parameters with the best validation loss."""
    if len(dataset) < 2:
        raise ValueError("training needs at least two samples")
    dtype = np.dtype(config.dtype)
    train_idx, val_idx = dataset.split(config.train_fraction)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("split left an empty train or validation part")
    norm = NormStats.fit([dataset.graphs[i] for i in train_idx], dataset.labels[train_idx])
    model = init_model(dataset.graphs[0].num_features, config.seed, dtype, norm)
    prepared = _Prepared(dataset.graphs)
    opt = Adam(model.params(), config.learning_rate) if config.optimizer == "adam" \
        else Sgd(model.params(), config.learning_rate)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model, [], train_idx, val_idx)
    best = (math.inf, model.params())

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        opt.lr = config.rate(epoch)
        order = rng.permutation(train_idx)
        seen, acc = 0, 0.0
        for s in range(0, len(order), config.batch_size):
            part = order[s:s + config.batch_size]
            batch = prepared.batch(part, norm, dataset.labels, dtype)
            try:
                loss, grads = loss_and_grad(model, batch)
            except NumericalError as exc:
                raise TrainingDivergedError(f"{exc}; lower the learning rate") from exc
            if not math.isfinite(loss) or loss > 1e6:
                raise TrainingDivergedError(
                    f"loss {loss:.3g} at epoch {epoch}; lower the learning rate")
            model.set_params(opt.step(model.params(), grads))
            acc += loss * len(part)
            seen += len(part)
        val = _mean_loss(model, prepared, val_idx, dataset.labels)
        entry = {"epoch": epoch, "lr": opt.lr, "train_loss": acc / seen, "val_loss": val,
                 "seconds": time.perf_counter() - t0}
        result.history.append(entry)
        log.debug("epoch %d train %.5f val %.5f (%.2fs)", epoch, entry["train_loss"], val, entry["seconds"])
        if val < best[0]:
            best = (val, [p.copy() for p in model.params()])
    model.set_params(best[1])
    return result


@dataclass
class EvalResult:
    mae_y: float
    mae_theta: float
    predictions: np.ndarray     # (n, 2)
    residuals: np.ndarray       # prediction - label, (n, 2)


def evaluate(model, dataset: Dataset) -> EvalResult:
    """Mean absolute error in mm and deg. ``model`` may be a GcnModel or any
    callable mapping a list of graphs to (n, 2) predictions."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(model, dataset.graphs) if isinstance(model, GcnModel) else np.asarray(model(dataset.graphs))
    res = pred - dataset.labels
    mae = np.abs(res).mean(axis=0)
    return EvalResult(float(mae[0]), float(mae[1]), pred, res)
