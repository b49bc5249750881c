"""Traffic series ingestion, normalization, chronological splits and windowing."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from datetime import datetime, timedelta
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class IngestionError(ValueError):
    """Raised for malformed input files; the message names row and column."""


@dataclass(frozen=True)
class TrafficSeries:
    values: np.ndarray  # T x N
    node_ids: tuple
    interval_seconds: int = 300
    start_timestamp: str = "1970-01-01T00:00:00"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("values must be a T x N matrix")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "node_ids", tuple(str(n) for n in self.node_ids))
        if values.shape[1] != len(self.node_ids):
            raise ValueError(
                f"{values.shape[1]} columns but {len(self.node_ids)} node ids")
        if len(set(self.node_ids)) != len(self.node_ids):
            raise ValueError("node ids must be unique")
        if not np.all(np.isfinite(values)):
            raise ValueError("series contains NaN or Inf")
        if self.interval_seconds <= 0:
            raise ValueError("interval_seconds must be positive")

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    def rows(self, start, stop):
        """Contiguous sub-series; the start timestamp is not shifted."""
        return TrafficSeries(self.values[start:stop], self.node_ids,
                             self.interval_seconds, self.start_timestamp)

    def with_values(self, values):
        return TrafficSeries(values, self.node_ids, self.interval_seconds,
                             self.start_timestamp)

    def content_hash(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        h.update("\x00".join(self.node_ids).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class AdjacencyMatrix:
    weights: np.ndarray
    node_ids: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("adjacency must be square")
        if w.shape[0] != len(self.node_ids):
            raise ValueError("adjacency size does not match node ids")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("adjacency weights must be finite and non-negative")
        if not np.array_equal(w, w.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(w) != 0):
            raise ValueError("adjacency diagonal must be zero")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "node_ids", tuple(str(n) for n in self.node_ids))

    @classmethod
    def empty(cls, node_ids):
        n = len(node_ids)
        return cls(np.zeros((n, n)), tuple(node_ids))


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64))


@dataclass
class SampleSet:
    inputs: np.ndarray   # S x H x N
    targets: np.ndarray  # S x F x N
    origin_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return self.inputs.shape[0]

    def columns(self, idx):
        """Restrict every sample to the node columns ``idx``."""
        return SampleSet(self.inputs[:, :, idx], self.targets[:, :, idx],
                         self.origin_indices)


# -- loading -----------------------------------------------------------------

def _parse_float(cell, row, col):
    try:
        v = float(cell)
    except ValueError:
        raise IngestionError(f"non-numeric cell {cell!r} at row {row}, column {col}") from None
    return v


def _forward_fill(values):
    out = values.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        bad = ~np.isfinite(col)
        if bad[0]:
            raise IngestionError(f"cannot forward-fill leading missing value in column {j + 1}")
        if bad.any():
            idx = np.where(bad, 0, np.arange(col.size))
            np.maximum.accumulate(idx, out=idx)
            out[:, j] = col[idx]
    return out


def _read_csv(path, forward_fill):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0] != "timestamp":
            raise IngestionError(f"{path}: header must be 'timestamp,<node_id>,...'")
        node_ids = header[1:]
        if len(set(node_ids)) != len(node_ids) or any(not n for n in node_ids):
            raise IngestionError(f"{path}: node ids in header must be unique and non-empty")
        stamps, rows = [], []
        for r, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise IngestionError(
                    f"ragged row {r}: expected {len(header)} cells, got {len(rec)}")
            vals = []
            for c, cell in enumerate(rec[1:], start=2):
                cell = cell.strip()
                if cell == "" and forward_fill:
                    vals.append(math.nan)
                    continue
                v = _parse_float(cell, r, c)
                if not math.isfinite(v):
                    if forward_fill:
                        v = math.nan
                    else:
                        raise IngestionError(f"missing or non-finite value at row {r}, column {c}")
                vals.append(v)
            stamps.append(rec[0].strip())
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    if forward_fill:
        values = _forward_fill(values)
    interval = 300
    if len(stamps) >= 2:
        try:
            t0 = datetime.fromisoformat(stamps[0])
            t1 = datetime.fromisoformat(stamps[1])
            if (t1 - t0).total_seconds() > 0:
                interval = int((t1 - t0).total_seconds())
        except ValueError:
            pass
    return TrafficSeries(values, node_ids, interval, stamps[0])


def _read_raw_f32(path, forward_fill):
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if sidecar == path or not sidecar.exists():
        raise IngestionError(f"{path}: missing JSON sidecar")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    for key in ("T", "N", "node_ids"):
        if key not in meta:
            raise IngestionError(f"{sidecar}: missing key {key!r}")
    T, N = int(meta["T"]), int(meta["N"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != T * N:
        raise IngestionError(f"{path}: expected {T * N} float32 values, found {raw.size}")
    values = raw.reshape(T, N).astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        if not forward_fill:
            r, c = np.argwhere(bad)[0]
            raise IngestionError(f"non-finite value at row {r + 1}, column {c + 1}")
        values = _forward_fill(values)
    if len(meta["node_ids"]) != N:
        raise IngestionError(f"{sidecar}: node_ids has {len(meta['node_ids'])} entries, N={N}")
    return TrafficSeries(values, meta["node_ids"], int(meta.get("interval_seconds", 300)),
                         str(meta.get("start_timestamp", "1970-01-01T00:00:00")))


def load_series(path, format="csv", forward_fill=False):
    """Read a T x N traffic series from ``csv`` or ``raw-f32`` files.

    Missing values are rejected unless ``forward_fill`` is set.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    if format == "csv":
        return _read_csv(path, forward_fill)
    if format in ("raw-f32", "raw"):
        return _read_raw_f32(path, forward_fill)
    raise IngestionError(f"unknown series format {format!r}")


def save_series_csv(series, path):
    try:
        t0 = datetime.fromisoformat(series.start_timestamp)
    except ValueError:
        t0 = datetime(1970, 1, 1)
    step = timedelta(seconds=series.interval_seconds)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *series.node_ids])
        for t, row in enumerate(series.values):
            w.writerow([(t0 + t * step).isoformat(), *(repr(float(v)) for v in row)])


def save_series_raw(series, path):
    path = Path(path)
    np.ascontiguousarray(series.values, dtype="<f4").tofile(path)
    meta = {"T": series.T, "N": series.N, "node_ids": list(series.node_ids),
            "interval_seconds": series.interval_seconds,
            "start_timestamp": series.start_timestamp}
    path.with_suffix(".json").write_text(json.dumps(meta), encoding="utf-8")


def load_adjacency(path, node_ids):
    """Read a ``from,to,weight`` edge list and close it symmetrically.

    Self-edges are dropped; duplicate edges keep the larger weight.
    """
    index = {n: i for i, n in enumerate(node_ids)}
    w = np.zeros((len(node_ids), len(node_ids)))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:3] != ["from", "to", "weight"]:
            raise IngestionError(f"{path}: header must be 'from,to,weight'")
        for r, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 3:
                raise IngestionError(f"ragged row {r}: expected 3 cells, got {len(rec)}")
            a, b = rec[0].strip(), rec[1].strip()
            for c, n in ((1, a), (2, b)):
                if n not in index:
                    raise IngestionError(f"unknown node {n!r} at row {r}, column {c}")
            weight = _parse_float(rec[2].strip(), r, 3)
            if not math.isfinite(weight) or weight < 0:
                raise IngestionError(f"invalid weight at row {r}, column 3")
            i, j = index[a], index[b]
            if i == j:
                continue
            v = max(w[i, j], weight)
            w[i, j] = w[j, i] = v
    return AdjacencyMatrix(w, tuple(node_ids))


def save_adjacency(adj, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "weight"])
        iu, ju = np.nonzero(np.triu(adj.weights, 1))
        for i, j in zip(iu, ju):
            w.writerow([adj.node_ids[i], adj.node_ids[j], repr(float(adj.weights[i, j]))])


# -- normalization -------------------------------------------------------------

def zscore_fit(train):
    values = train.values if isinstance(train, TrafficSeries) else np.asarray(train, dtype=np.float64)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return NormStats(mean, std)


def _check_dims(x, stats):
    if x.shape[-1] != stats.mean.shape[0]:
        raise ValueError(
            f"data has {x.shape[-1]} nodes but stats cover {stats.mean.shape[0]}")


def zscore_apply(x, stats):
    if isinstance(x, TrafficSeries):
        return x.with_values(zscore_apply(x.values, stats))
    x = np.asarray(x, dtype=np.float64)
    _check_dims(x, stats)
    return (x - stats.mean) / stats.std


def zscore_invert(x, stats):
    if isinstance(x, TrafficSeries):
        return x.with_values(zscore_invert(x.values, stats))
    x = np.asarray(x, dtype=np.float64)
    _check_dims(x, stats)
    return x * stats.std + stats.mean


# -- splitting and windowing -----------------------------------------------------

def split_sizes(T, ratios=(0.8, 0.1, 0.1)):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    n_train = math.floor(ratios[0] * T + 1e-9)
    n_val = math.floor(ratios[1] * T + 1e-9)
    return n_train, n_val, T - n_train - n_val


def split_chronological(series, ratios=(0.8, 0.1, 0.1), min_length=0):
    """Contiguous train/val/test partitions; the remainder goes to test.

    ``min_length`` (typically H + F) is enforced on every partition.
    """
    n_train, n_val, n_test = split_sizes(series.T, ratios)
    if min(n_train, n_val, n_test) < min_length:
        raise ValueError(
            f"T={series.T} too small: partitions {(n_train, n_val, n_test)} "
            f"need at least {min_length} rows each")
    return (series.rows(0, n_train), series.rows(n_train, n_train + n_val),
            series.rows(n_train + n_val, series.T))


def make_windows(partition, H, F):
    """Stride-1 supervised windows: H input rows then the next F rows."""
    if H <= 0 or F <= 0:
        raise ValueError("H and F must be positive")
    values = partition.values if isinstance(partition, TrafficSeries) else np.asarray(partition)
    T = values.shape[0]
    if T < H + F:
        raise ValueError(f"partition of length {T} is shorter than H+F={H + F}")
    count = T - H - F + 1
    view = np.lib.stride_tricks.sliding_window_view(values, H + F, axis=0)  # count x N x (H+F)
    view = np.moveaxis(view, -1, 1)
    return SampleSet(np.ascontiguousarray(view[:, :H]), np.ascontiguousarray(view[:, H:]),
                     np.arange(count))
