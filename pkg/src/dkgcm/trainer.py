"""Training with the clipped group-relative policy term, evaluation and
experiment drivers (ablation, sensitivity)."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import GrpoConfig, RunConfig
from .dataio import (AdjacencyMatrix, NormStats, SampleSet, make_windows, split_chronological,
                     zscore_apply, zscore_fit, zscore_invert)
from .model import ForecastModel
from .simgraph import ClusterAssignment, build_cluster_subgraphs, cluster_nodes, dtw_matrix

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


# -- metrics ---------------------------------------------------------------------

def compute_metrics(pred, truth, selector=None):
    """(MAE, RMSE) over every selected entry; ``selector`` indexes the last
    (node) axis."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    err = pred - truth
    if selector is not None:
        err = err[..., selector]
    if err.size == 0:
        raise ValueError("empty selection")
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    count: int
    per_horizon: list          # [(step, mae, rmse)]
    at: dict                   # {h: (mae, rmse)} over the first h steps
    clusters: list             # [{cluster, nodes, mae, rmse, count}] or None entries
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "pooled": {"mae": self.mae, "rmse": self.rmse, "count": self.count},
            "per_horizon": [{"step": s, "mae": a, "rmse": r} for s, a, r in self.per_horizon],
            "at": {str(h): {"mae": a, "rmse": r} for h, (a, r) in sorted(self.at.items())},
            "clusters": self.clusters,
            **self.meta,
        }


# -- GRPO pieces -------------------------------------------------------------------

def group_advantage(batch_errors):
    """Standardized advantage of each sample against its batch: lower error
    gives a positive value. Returns None for groups smaller than two."""
    e = np.asarray(batch_errors, dtype=np.float64)
    if e.size < 2:
        return None
    return (e.mean() - e) / (e.std() + 1e-8)


def policy_ratio(pred_new, pred_old, target, sigma=1.0):
    """exp(log pi_new - log pi_old) per sample for isotropic Gaussians centred
    on the predictions, using the per-element mean log-density."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pred_new = pred_new if isinstance(pred_new, dc.Tensor) else dc.Tensor(pred_new)
    target = np.asarray(target, dtype=pred_new.dtype)
    old = np.asarray(pred_old.data if isinstance(pred_old, dc.Tensor) else pred_old,
                     dtype=pred_new.dtype)
    axes = tuple(range(1, pred_new.ndim))
    n_elems = int(np.prod(pred_new.shape[1:])) if axes else 1
    old_sq = ((old - target) ** 2).sum(axis=axes) if axes else (old - target) ** 2
    diff = pred_new - target
    new_sq = dc.tsum(dc.square(diff), axis=axes) if axes else dc.square(diff)
    return dc.exp((old_sq - new_sq) / (2.0 * sigma * sigma * n_elems))


def policy_surrogate(r, advantage, epsilon):
    """-mean(min(r A, clip(r, 1 - eps, 1 + eps) A)) with A held constant."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    r = r if isinstance(r, dc.Tensor) else dc.Tensor(r)
    A = np.asarray(advantage, dtype=r.dtype)
    return -dc.mean(dc.minimum(r * A, dc.clip(r, 1 - epsilon, 1 + epsilon) * A))


def grpo_loss(mae, r, advantage, epsilon=0.3, tau=0.1):
    return mae + tau * policy_surrogate(r, advantage, epsilon)


# -- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ForecastModel
    loss_log: list  # [(epoch, loss)] sample-weighted mean over sub-models
    cluster_logs: dict


def _swap_in(store, values):
    current = {k: p.data for k, p in store.items()}
    for k, p in store.items():
        p.data = values[k]
    return current


def _old_predictions(model, k, store, snapshot, X):
    saved = _swap_in(store, snapshot)
    try:
        with dc.no_grad():
            return model.forward_cluster(k, X, train=False).data
    finally:
        _swap_in(store, saved)


class _GroupState:
    """Optimizer-side state of one parameter store and the clusters it serves."""

    def __init__(self, store, members, seed, grpo: GrpoConfig):
        self.store = store
        self.members = members
        self.shuffle_rng = np.random.default_rng([seed, members[0], 2])
        self.drop_rng = np.random.default_rng([seed, members[0], 3])
        self.snapshot = store.snapshot()
        self.snapshot_epoch = 0
        self.grpo = grpo
        self.log = []

    def batches(self, n, batch_size):
        out = []
        for k in self.members:
            perm = self.shuffle_rng.permutation(n)
            out += [(k, perm[i:i + batch_size]) for i in range(0, n, batch_size)]
        if len(self.members) > 1:
            out = [out[i] for i in self.shuffle_rng.permutation(len(out))]
        return out

    def run_epoch(self, epoch, model, inputs, targets, tc):
        gc, store = self.grpo, self.store
        if gc.enabled and (epoch - 1) % gc.snapshot_cadence == 0:
            self.snapshot = store.snapshot()
            self.snapshot_epoch = epoch
        total, count = 0.0, 0
        for bi, (k, idx) in enumerate(self.batches(len(inputs), tc.batch_size)):
            cols = model.blocks[k].members
            X = inputs[idx][:, :, cols]
            Y = targets[idx][:, :, cols]
            store.zero_grad()
            pred = model.forward_cluster(k, X, train=True, rng=self.drop_rng)
            loss = dc.mean(dc.tabs(pred - Y))
            if gc.enabled and len(idx) >= 2:
                old = _old_predictions(model, k, store, self.snapshot, X)
                errs = np.abs(pred.data - Y).reshape(len(idx), -1).mean(axis=1)
                r = policy_ratio(pred, old, Y, gc.sigma)
                loss = grpo_loss(loss, r, group_advantage(errs), gc.epsilon, gc.tau)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {bi} (cluster {k})")
            loss.backward()
            dc.adam_step(store, lr=tc.lr, skip_missing=True)
            total += value * len(idx)
            count += len(idx)
        self.log.append((total, count))


def train(cfg: RunConfig, samples: SampleSet, model: ForecastModel, epochs=None,
          on_epoch=None):
    """Fit every sub-model on normalized windows.

    ``samples`` holds all node columns; each cluster trains on its own
    members. Loss is MAE plus ``tau`` times the clipped policy term; the old
    policy is a parameter snapshot refreshed every ``snapshot_cadence``
    epochs. Sub-models share nothing, so they advance one epoch at a time
    side by side; ``on_epoch(epoch, loss)`` runs after each epoch and may
    return True to stop early.
    """
    tc = cfg.training
    epochs = tc.epochs if epochs is None else epochs
    if len(samples) == 0:
        raise ValueError("no training samples")
    by_store = {}
    for k, block in enumerate(model.blocks):
        by_store.setdefault(id(block.store), (block.store, []))[1].append(k)
    groups = [_GroupState(store, members, tc.seed, cfg.grpo)
              for store, members in by_store.values()]
    inputs = samples.inputs.astype(model.dtype)
    targets = samples.targets.astype(model.dtype)
    loss_log = []
    for epoch in range(1, epochs + 1):
        for g in groups:
            g.run_epoch(epoch, model, inputs, targets, tc)
        total = sum(g.log[-1][0] for g in groups)
        count = sum(g.log[-1][1] for g in groups)
        loss_log.append((epoch, total / count))
        if on_epoch is not None and on_epoch(epoch, loss_log[-1][1]):
            break
    cluster_logs = {i: [t / c for t, c in g.log] for i, g in enumerate(groups)}
    return TrainResult(model, loss_log, cluster_logs)


def training_mae(model, samples):
    """MAE on the normalized scale with dropout off."""
    pred = model.predict(samples.inputs)
    return compute_metrics(pred, samples.targets)[0]


# -- evaluation -------------------------------------------------------------------

def evaluate(model, samples: SampleSet, stats: NormStats, assignment, horizons=(3, 6, 12),
             normalized=True):
    """Flow-scale metrics: pooled, per horizon step, over the first h steps,
    and per cluster. ``samples`` are normalized windows unless
    ``normalized`` is false (then targets are taken as flow values)."""
    if len(samples) == 0:
        return MetricsReport(math.nan, math.nan, 0, [], {}, [
            {"cluster": k, "nodes": int(n), "mae": None, "rmse": None, "count": 0,
             "absent": True} for k, n in enumerate(assignment.sizes())])
    pred = zscore_invert(model.predict(samples.inputs), stats)
    truth = zscore_invert(samples.targets, stats) if normalized else np.asarray(samples.targets)
    F = pred.shape[1]
    mae, rmse = compute_metrics(pred, truth)
    per_h = []
    for s in range(F):
        a, r = compute_metrics(pred[:, s], truth[:, s])
        per_h.append((s + 1, a, r))
    at = {}
    for h in horizons:
        if 1 <= h <= F:
            at[int(h)] = compute_metrics(pred[:, :h], truth[:, :h])
    clusters = []
    labels = np.asarray(assignment.labels)
    for k in range(assignment.K):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            clusters.append({"cluster": k, "nodes": 0, "mae": None, "rmse": None,
                             "count": 0, "absent": True})
            continue
        a, r = compute_metrics(pred, truth, idx)
        clusters.append({"cluster": k, "nodes": int(idx.size), "mae": a, "rmse": r,
                         "count": int(pred[..., idx].size)})
    return MetricsReport(mae, rmse, int(pred.size), per_h, at, clusters)


# -- end-to-end pipeline -------------------------------------------------------------

@dataclass
class PreparedData:
    series: object
    adjacency: AdjacencyMatrix
    stats: NormStats
    train: SampleSet
    val: SampleSet
    test: SampleSet
    train_norm: object  # normalized training partition (TrafficSeries)
    data_hash: str
    split_hash: str


def prepare_data(cfg: RunConfig, series, adjacency=None):
    H, F = cfg.model.seq_len, cfg.model.horizon
    train_p, val_p, test_p = split_chronological(series, cfg.data.split, min_length=H + F)
    stats = zscore_fit(train_p)
    train_n = zscore_apply(train_p, stats)
    val_n = zscore_apply(val_p, stats)
    test_n = zscore_apply(test_p, stats)
    adjacency = adjacency if adjacency is not None else AdjacencyMatrix.empty(series.node_ids)
    sizes = f"{train_p.T},{val_p.T},{test_p.T}"
    return PreparedData(
        series, adjacency, stats,
        make_windows(train_n, H, F), make_windows(val_n, H, F), make_windows(test_n, H, F),
        train_n, series.content_hash(),
        hashlib.sha256((series.content_hash() + sizes).encode()).hexdigest()[:16])


@dataclass
class RunResult:
    config: RunConfig
    model: ForecastModel
    assignment: ClusterAssignment
    data: PreparedData
    loss_log: list
    report: MetricsReport | None = None


def cluster_training_partition(cfg, data, dist=None):
    if dist is None:
        dist = dtw_matrix(data.train_norm, window=cfg.clustering.dtw_window)
    return cluster_nodes(data.train_norm, cfg.clustering.k, seed=cfg.clustering.seed,
                         max_iter=cfg.clustering.max_iter, tol=cfg.clustering.tol, dist=dist)


def fit(cfg: RunConfig, data: PreparedData, dist=None, assignment=None, epochs=None,
        evaluate_on="test", on_epoch=None):
    """Cluster (unless ``assignment`` is given), build the per-cluster model,
    train it and evaluate on the chosen partition."""
    if assignment is None:
        assignment = cluster_training_partition(cfg, data, dist)
    subgraphs = build_cluster_subgraphs(data.adjacency, assignment)
    model = ForecastModel(cfg.model, subgraphs, seed=cfg.training.seed,
                          dtype=np.dtype(cfg.training.precision))
    result = train(cfg, data.train, model, epochs=epochs, on_epoch=on_epoch)
    report = None
    if evaluate_on:
        part = {"test": data.test, "val": data.val, "train": data.train}[evaluate_on]
        report = evaluate(model, part, data.stats, assignment)
        report.meta.update({"config_hash": cfg.model_hash(), "seed": cfg.training.seed,
                            "data_hash": data.data_hash, "split_hash": data.split_hash})
    return RunResult(cfg, model, assignment, data, result.loss_log, report)


ABLATION_VARIANTS = ("full", "no-clustering", "no-fbmamba", "no-grpo")


def variant_config(cfg: RunConfig, variant):
    if variant == "full":
        return cfg.copy()
    if variant == "no-clustering":
        return cfg.replace(clustering__k=1)
    if variant == "no-fbmamba":
        return cfg.replace(model__temporal="linear")
    if variant == "no-grpo":
        return cfg.replace(grpo__tau=0.0)
    raise ValueError(f"unknown ablation variant {variant!r}")


def run_ablation(cfg: RunConfig, data: PreparedData, variants=ABLATION_VARIANTS, epochs=None):
    """Train each variant on the same split and seeds; one row per variant."""
    dist = dtw_matrix(data.train_norm, window=cfg.clustering.dtw_window)
    rows, runs = [], {}
    for v in variants:
        vcfg = variant_config(cfg, v)
        run = fit(vcfg, data, dist=dist, epochs=epochs)
        runs[v] = run
        rows.append({"variant": v, "mae": run.report.mae, "rmse": run.report.rmse,
                     **{f"mae@{h}": a for h, (a, _) in run.report.at.items()},
                     **{f"rmse@{h}": r for h, (_, r) in run.report.at.items()},
                     "split_hash": data.split_hash, "config_hash": vcfg.model_hash()})
    return rows, runs


SENSITIVITY_PARAMS = {
    "k": "clustering__k",
    "seq_len": "model__seq_len",
    "hidden_dim": "model__hidden_dim",
    "epsilon": "grpo__epsilon",
}


def run_sensitivity(cfg: RunConfig, series, adjacency, param, values, epochs=None):
    """Sweep one setting; returns metric rows and the per-epoch loss logs."""
    if param not in SENSITIVITY_PARAMS:
        raise ValueError(f"unknown sensitivity parameter {param!r}")
    key = SENSITIVITY_PARAMS[param]
    rows, loss_rows = [], []
    shared = None
    dist = None
    for v in values:
        vcfg = cfg.replace(**{key: v})
        if param == "seq_len" or shared is None:
            shared = prepare_data(vcfg, series, adjacency)
            dist = None
        if dist is None:
            dist = dtw_matrix(shared.train_norm, window=vcfg.clustering.dtw_window)
        run = fit(vcfg, shared, dist=dist, epochs=epochs)
        rows.append({"param": param, "value": v, "mae": run.report.mae,
                     "rmse": run.report.rmse})
        for epoch, loss in run.loss_log:
            loss_rows.append({"epoch": epoch, "variant": f"{param}={v}",
                              "epsilon": vcfg.grpo.epsilon, "loss": loss})
    return rows, loss_rows


def losslog_rows(loss_log, variant, grpo: GrpoConfig):
    return [{"epoch": e, "variant": variant, "epsilon": grpo.epsilon, "loss": l}
            for e, l in loss_log]


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Bundle:
    config: RunConfig
    model: ForecastModel
    assignment: ClusterAssignment
    stats: NormStats
    adjacency: AdjacencyMatrix
    meta: dict

    @property
    def node_ids(self):
        return self.adjacency.node_ids


def save_bundle(path, run: RunResult, extra=None):
    """Checkpoint a trained run with everything needed to rebuild it."""
    data = run.data
    meta = {
        "config": run.config.to_dict(),
        "config_hash": run.config.model_hash(),
        "node_ids": list(data.series.node_ids),
        "labels": [int(v) for v in run.assignment.labels],
        "K": int(run.assignment.K),
        "norm": data.stats.to_dict(),
        "adjacency": data.adjacency.weights.tolist(),
        "data_hash": data.data_hash,
        "split_hash": data.split_hash,
        "epochs_run": len(run.loss_log),
        **(extra or {}),
    }
    return dc.save_checkpoint(path, run.model.named_values(), meta)


class CheckpointMismatch(ValueError):
    pass


def load_bundle(path, expect_config: RunConfig | None = None):
    values, meta = dc.load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    if cfg.model_hash() != meta.get("config_hash"):
        raise CheckpointMismatch(
            f"checkpoint config hash {meta.get('config_hash')} does not match its "
            f"embedded config ({cfg.model_hash()})")
    if expect_config is not None and expect_config.model_hash() != cfg.model_hash():
        raise CheckpointMismatch(
            f"config hash {expect_config.model_hash()} does not match checkpoint "
            f"hash {cfg.model_hash()}")
    adjacency = AdjacencyMatrix(np.asarray(meta["adjacency"]), meta["node_ids"])
    assignment = ClusterAssignment.from_labels(meta["labels"], K=meta["K"],
                                               seed=cfg.clustering.seed)
    model = ForecastModel(cfg.model, build_cluster_subgraphs(adjacency, assignment),
                          seed=cfg.training.seed, dtype=np.dtype(cfg.training.precision))
    model.load_values(values)
    return Bundle(cfg, model, assignment, NormStats.from_dict(meta["norm"]), adjacency, meta)
