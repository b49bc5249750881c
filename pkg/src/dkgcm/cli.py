"""Command-line entry point: ``dkgcm <command> ...``.

Every command writes into an output directory that stays locked for the
lifetime of the process and finishes by writing ``manifest.json``, which
lists every emitted file with its SHA-256.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__, plots, trainer
from .config import ConfigError, RunConfig
from .dataio import (IngestionError, load_adjacency, load_series,
                     save_adjacency, save_series_csv, split_chronological, zscore_apply,
                     zscore_fit, zscore_invert)
from .simgraph import (cluster_nodes, cosine_similarity_matrix, dtw_matrix,
                       write_matrix_csv)
from .synthetic import chain_adjacency, two_group_series

log = logging.getLogger("dkgcm")

LOCK_NAME = ".dkgcm.lock"


class CommandError(Exception):
    pass


# -- helpers -------------------------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class OutputDir:
    """Locked output directory that tracks the files written into it."""

    def __init__(self, path):
        self.path = Path(path)
        self.files = []
        self._lock = None

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.path / LOCK_NAME))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise CommandError(f"output directory {self.path} is locked by another process") \
                from None
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False

    def file(self, name):
        p = self.path / name
        if name not in self.files:
            self.files.append(name)
        return p

    def write_json(self, name, obj):
        with open(self.file(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, name, header, rows):
        with open(self.file(name), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                vals = [r[h] for h in header] if isinstance(r, dict) else r
                w.writerow([_cell(v) for v in vals])

    def finish(self, command, config=None, data_hash=None, seed=None):
        manifest = {
            "command": command,
            "version": __version__,
            "config": config.to_dict() if config is not None else None,
            "config_hash": config.model_hash() if config is not None else None,
            "data_hash": data_hash,
            "seed": seed,
            "started": self.started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "files": {n: _sha256(self.path / n) for n in self.files},
        }
        manifest["artifact_hash"] = hashlib.sha256(
            json.dumps(manifest["files"], sort_keys=True).encode()).hexdigest()[:16]
        with open(self.path / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _load_config(path, overrides=()):
    cfg = RunConfig.load(path)
    if overrides:
        cfg = cfg.replace(**dict(overrides))
    return cfg


def _load_data(cfg, data=None, adjacency=None):
    path = data or cfg.data.path
    if path is None:
        raise CommandError("no data file: set data.path in the config or pass --data")
    series = load_series(path, cfg.data.format, cfg.data.forward_fill)
    adj_path = adjacency or cfg.data.adjacency
    adj = load_adjacency(adj_path, series.node_ids) if adj_path else None
    return series, adj


def _epoch_override(args):
    return [("training__epochs", args.epochs)] if getattr(args, "epochs", None) else []


def _losslog_plot(out, rows, name="losslog.svg", title="Training loss"):
    series = {}
    for r in rows:
        series.setdefault(r["variant"], []).append((r["epoch"], r["loss"]))
    plots.line_plot(out.file(name), series, title=title, xlabel="epoch", ylabel="loss")


LOSSLOG_HEADER = ("epoch", "variant", "epsilon", "loss")


# -- commands ---------------------------------------------------------------------

def cmd_cluster(args):
    cfg = RunConfig().replace(clustering__k=args.k, clustering__seed=args.seed,
                              clustering__dtw_window=args.window,
                              data__format=args.format)
    series = load_series(args.data, args.format, args.forward_fill)
    if args.adjacency:
        load_adjacency(args.adjacency, series.node_ids)  # validated, not used for clustering
    if cfg.clustering.k > series.N:
        raise CommandError(f"--k {cfg.clustering.k} exceeds the node count {series.N}")
    train_p = split_chronological(series, cfg.data.split)[0]
    train_n = zscore_apply(train_p, zscore_fit(train_p))
    with OutputDir(args.out) as out:
        dist = dtw_matrix(train_n, window=cfg.clustering.dtw_window)
        assignment = cluster_nodes(train_n, cfg.clustering.k, seed=cfg.clustering.seed,
                                   max_iter=cfg.clustering.max_iter, tol=cfg.clustering.tol,
                                   dist=dist)
        dist.to_csv(out.file("dtw.csv"))
        write_matrix_csv(out.file("cosine.csv"), cosine_similarity_matrix(train_n))
        body = assignment.to_json()
        body["node_ids"] = list(series.node_ids)
        out.write_json("clusters.json", body)
        out.finish("cluster", data_hash=series.content_hash(), seed=args.seed)
    for k, n in enumerate(assignment.sizes()):
        print(f"cluster {k}: {n} nodes")
    print(f"total: {int(assignment.sizes().sum())} nodes in {assignment.K} clusters")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config, _epoch_override(args))
    series, adj = _load_data(cfg, args.data, args.adjacency)
    data = trainer.prepare_data(cfg, series, adj)
    with OutputDir(args.out) as out:
        run = trainer.fit(cfg, data, evaluate_on="val")
        trainer.save_bundle(out.file("checkpoint.json"), run)
        out.file("checkpoint.bin")
        rows = trainer.losslog_rows(run.loss_log, "full", cfg.grpo)
        out.write_csv("losslog.csv", LOSSLOG_HEADER, rows)
        _losslog_plot(out, rows)
        body = run.assignment.to_json()
        body["node_ids"] = list(series.node_ids)
        out.write_json("clusters.json", body)
        out.write_json("val_metrics.json", run.report.to_dict())
        out.finish("train", cfg, data.data_hash, cfg.training.seed)
    print(f"trained {run.model.n_parameters()} parameters for {len(run.loss_log)} epochs; "
          f"final loss {run.loss_log[-1][1]:.6g}; val MAE {run.report.mae:.6g}")
    return 0


def cmd_eval(args):
    expect = _load_config(args.config) if args.config else None
    bundle = trainer.load_bundle(args.checkpoint, expect)
    cfg = bundle.config
    data_path = args.data or cfg.data.path
    if data_path is None:
        raise CommandError("no data file: pass --data")
    series = load_series(data_path, args.format or cfg.data.format, cfg.data.forward_fill)
    if tuple(series.node_ids) != tuple(bundle.node_ids):
        raise CommandError("data node ids do not match the checkpoint")
    data = trainer.prepare_data(cfg, series, bundle.adjacency)
    F = cfg.model.horizon
    if args.horizons:
        horizons = sorted(set(args.horizons))
        bad = [h for h in horizons if h > F]
        if bad:
            raise CommandError(f"horizon slice {bad[0]} outside 1..{F}")
    else:
        horizons = sorted({h for h in (3, 6, F) if h <= F})
    report = trainer.evaluate(bundle.model, data.test, bundle.stats, bundle.assignment,
                              horizons=horizons)
    report.meta.update({"config_hash": cfg.model_hash(), "seed": cfg.training.seed,
                        "data_hash": data.data_hash, "split_hash": data.split_hash,
                        "horizons": horizons})
    with OutputDir(args.out) as out:
        out.write_json("metrics.json", report.to_dict())
        out.finish("eval", cfg, data.data_hash, cfg.training.seed)
    at = " ".join(f"@{h} MAE {a:.4f} RMSE {r:.4f}" for h, (a, r) in sorted(report.at.items()))
    print(f"pooled MAE {report.mae:.4f} RMSE {report.rmse:.4f}; {at}")
    return 0


def cmd_predict(args):
    bundle = trainer.load_bundle(args.checkpoint)
    cfg = bundle.config
    window = load_series(args.window_csv, "csv")
    if tuple(window.node_ids) != tuple(bundle.node_ids):
        raise CommandError("window node ids do not match the checkpoint")
    H = cfg.model.seq_len
    if window.T < H:
        raise CommandError(f"window has {window.T} rows, need at least {H}")
    x = zscore_apply(window.values[-H:], bundle.stats)[None]
    pred = zscore_invert(bundle.model.predict(x)[0], bundle.stats)
    out_path = Path(args.out)
    with OutputDir(out_path.parent if out_path.suffix else out_path) as out:
        name = out_path.name if out_path.suffix else "forecast.csv"
        out.write_csv(name, ("step", *bundle.node_ids),
                      [(s + 1, *row) for s, row in enumerate(pred)])
        out.finish("predict", cfg, bundle.meta.get("data_hash"), cfg.training.seed)
    print(f"wrote {pred.shape[0]}x{pred.shape[1]} forecast")
    return 0


def cmd_ablate(args):
    cfg = _load_config(args.config, _epoch_override(args))
    series, adj = _load_data(cfg, args.data, args.adjacency)
    data = trainer.prepare_data(cfg, series, adj)
    variants = args.variants or list(trainer.ABLATION_VARIANTS)
    with OutputDir(args.out) as out:
        rows, runs = trainer.run_ablation(cfg, data, variants)
        header = ["variant", "mae", "rmse"] + sorted(
            {k for r in rows for k in r if k.startswith(("mae@", "rmse@"))},
            key=lambda k: (k.split("@")[0], int(k.split("@")[1]))) + ["split_hash",
                                                                       "config_hash"]
        out.write_csv("ablation.csv", header, rows)
        plots.bar_plot(out.file("ablation.svg"), [r["variant"] for r in rows],
                       [r["mae"] for r in rows], title="Ablation", ylabel="test MAE")
        loss_rows = []
        for v, run in runs.items():
            loss_rows += trainer.losslog_rows(run.loss_log, v, run.config.grpo)
        out.write_csv("losslog.csv", LOSSLOG_HEADER, loss_rows)
        _losslog_plot(out, loss_rows)
        out.finish("ablate", cfg, data.data_hash, cfg.training.seed)
    for r in rows:
        print(f"{r['variant']:>14}: MAE {r['mae']:.4f} RMSE {r['rmse']:.4f}")
    return 0


def _parse_values(param, raw):
    cast = float if param == "epsilon" else int
    try:
        return [cast(v) for v in raw]
    except ValueError:
        raise CommandError(f"invalid value for {param}: {raw}") from None


def cmd_sensitivity(args):
    cfg = _load_config(args.config, _epoch_override(args))
    series, adj = _load_data(cfg, args.data, args.adjacency)
    values = _parse_values(args.param, args.values)
    with OutputDir(args.out) as out:
        rows, loss_rows = trainer.run_sensitivity(cfg, series, adj, args.param, values)
        out.write_csv("sensitivity.csv", ("param", "value", "mae", "rmse"), rows)
        plots.line_plot(out.file("sensitivity.svg"),
                        {"MAE": [(r["value"], r["mae"]) for r in rows],
                         "RMSE": [(r["value"], r["rmse"]) for r in rows]},
                        title=f"Sensitivity to {args.param}", xlabel=args.param,
                        ylabel="test error")
        out.write_csv("losslog.csv", LOSSLOG_HEADER, loss_rows)
        _losslog_plot(out, loss_rows)
        out.finish("sensitivity", cfg, series.content_hash(), cfg.training.seed)
    for r in rows:
        print(f"{args.param}={r['value']}: MAE {r['mae']:.4f} RMSE {r['rmse']:.4f}")
    return 0


def cmd_synth(args):
    series, labels = two_group_series(args.nodes, args.length, seed=args.seed)
    adj = chain_adjacency(series.node_ids, labels)
    with OutputDir(args.out) as out:
        save_series_csv(series, out.file("series.csv"))
        save_adjacency(adj, out.file("adjacency.csv"))
        out.write_json("labels.json", {"node_ids": list(series.node_ids),
                                       "labels": [int(v) for v in labels]})
        out.finish("synth", data_hash=series.content_hash(), seed=args.seed)
    print(f"wrote {series.T} steps x {series.N} nodes to {args.out}")
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dkgcm", description="Clustered graph/state-space "
                                "traffic forecaster.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cluster", help="DTW distance matrix and K-means node clusters")
    c.add_argument("--data", required=True)
    c.add_argument("--adjacency")
    c.add_argument("--format", default="csv", choices=("csv", "raw-f32"))
    c.add_argument("--forward-fill", action="store_true")
    c.add_argument("--k", type=_positive_int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--window", type=int, default=None, help="Sakoe-Chiba band half-width")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    def common_run(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--data")
        sp.add_argument("--adjacency")
        sp.add_argument("--epochs", type=_positive_int, help="override training.epochs")
        sp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model per cluster")
    common_run(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test partition")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="reject the checkpoint unless its config hash matches")
    e.add_argument("--data")
    e.add_argument("--format", choices=("csv", "raw-f32"))
    e.add_argument("--horizons", type=_positive_int, nargs="+",
                   help="report metrics over the first h steps for each h")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="forecast from the last window of a CSV")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--window-csv", required=True)
    pr.add_argument("--out", required=True, help="output CSV path (or directory)")
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    common_run(a)
    a.add_argument("--variants", nargs="+", choices=trainer.ABLATION_VARIANTS)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sensitivity", help="sweep one setting")
    common_run(s)
    s.add_argument("--param", required=True, choices=tuple(trainer.SENSITIVITY_PARAMS))
    s.add_argument("--values", required=True, nargs="+")
    s.set_defaults(func=cmd_sensitivity)

    y = sub.add_parser("synth", help="write the two-group synthetic dataset")
    y.add_argument("--nodes", type=_positive_int, default=20)
    y.add_argument("--length", type=_positive_int, default=2000)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, IngestionError, trainer.CheckpointMismatch,
            trainer.DivergenceError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dkgcm {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
