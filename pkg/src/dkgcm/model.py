"""Per-cluster forecaster: spatial convolution -> temporal stack -> horizon head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import fbmamba as fb
from . import gcn
from .config import ModelConfig


@dataclass
class ClusterBlock:
    members: np.ndarray
    op: gcn.NormalizedOperator
    basis: list | None
    store: dc.ParameterStore
    prefix: str

    @property
    def m(self):
        return len(self.members)


class SubModelParams:
    """Names of one sub-model's parameter groups inside a store."""

    def __init__(self, store, prefix, cfg, rng):
        H, F, d_h = cfg.seq_len, cfg.horizon, cfg.hidden_dim
        self.gcn = gcn.init_gcn(store, f"{prefix}.gcn", H, cfg.gcn_mode, cfg.gcn_layers,
                                cfg.cheb_k, rng)
        self.temporal = cfg.temporal
        if cfg.temporal == "fbmamba":
            width = 1 if cfg.scan_axis == "embedding" else d_h
            self.embed = fb.init_fft_embed(store, f"{prefix}.embed", H, d_h, cfg.dropout, rng)
            self.fwd = fb.init_ssm(store, f"{prefix}.ssm_f", width, cfg.d_inner, cfg.d_state, rng)
            self.bwd = fb.init_ssm(store, f"{prefix}.ssm_b", width, cfg.d_inner, cfg.d_state, rng)
            self.head = fb.init_output_head(store, f"{prefix}.head", d_h, F, rng=rng)
        else:
            store.add(f"{prefix}.linear_W", np.zeros((H, F)) + 1.0 / H)
            store.add(f"{prefix}.linear_b", np.zeros(F))
        self.prefix = prefix


class ForecastModel:
    """One sub-model per cluster (or one shared set of weights).

    ``forward_cluster`` maps a batch of normalized windows (B, H, m) for the
    cluster's member nodes to forecasts (B, F, m).
    """

    def __init__(self, cfg: ModelConfig, subgraphs, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.blocks = []
        self.params = []
        shared_store = shared_params = None
        if cfg.shared_weights:
            shared_store = dc.ParameterStore(np.float64)
            shared_params = SubModelParams(shared_store, "shared", cfg,
                                           np.random.default_rng([seed, 0]))
        for k, sg in enumerate(subgraphs):
            op = gcn.normalized_laplacian(sg.adjacency)
            basis = gcn.cheb_basis(op, cfg.cheb_k) if cfg.gcn_mode == "chebyshev" else None
            if cfg.shared_weights:
                store, params = shared_store, shared_params
            else:
                store = dc.ParameterStore(np.float64)
                params = SubModelParams(store, f"c{k}", cfg, np.random.default_rng([seed, k]))
            self.blocks.append(ClusterBlock(np.asarray(sg.member_nodes), op, basis, store,
                                            params.prefix))
            self.params.append(params)
        for store in self.stores():
            store.astype(self.dtype)

    @property
    def n_clusters(self):
        return len(self.blocks)

    def stores(self):
        seen, out = set(), []
        for b in self.blocks:
            if id(b.store) not in seen:
                seen.add(id(b.store))
                out.append(b.store)
        return out

    def forward_cluster(self, k, X, train=False, rng=None):
        block, params, cfg = self.blocks[k], self.params[k], self.cfg
        store = block.store
        if not isinstance(X, dc.Tensor):
            X = dc.Tensor(np.asarray(X, dtype=self.dtype))
        if X.ndim != 3 or X.shape[1] != cfg.seq_len or X.shape[2] != block.m:
            raise ValueError(f"cluster {k} expects (B, {cfg.seq_len}, {block.m}), got {X.shape}")
        x = dc.swapaxes(X, 1, 2)  # B, m, H
        s = x + gcn.apply_gcn(store, params.gcn, x, block.op, block.basis)
        if params.temporal == "fbmamba":
            z = fb.fft_embed(store, params.embed, s, train=train, rng=rng)
            y = fb.bidirectional_mamba(store, params.fwd, params.bwd, z, cfg.scan_axis)
            out = fb.output_head(store, params.head, y)
        else:
            out = s @ store[f"{params.prefix}.linear_W"] + store[f"{params.prefix}.linear_b"]
        return dc.swapaxes(out, 1, 2)  # B, F, m

    def predict(self, inputs, batch_size=256):
        """Forecasts (S, F, N) in the normalized scale for windows (S, H, N)."""
        inputs = np.asarray(inputs)
        S, _, N = inputs.shape
        out = np.zeros((S, self.cfg.horizon, N))
        with dc.no_grad():
            for k, block in enumerate(self.blocks):
                cols = inputs[:, :, block.members]
                for lo in range(0, S, batch_size):
                    pred = self.forward_cluster(k, cols[lo:lo + batch_size])
                    out[lo:lo + batch_size][:, :, block.members] = pred.data
        return out

    # -- (de)serialization ---------------------------------------------------
    def named_values(self):
        values = {}
        for store in self.stores():
            for name, p in store.items():
                values[name] = p.data
        return values

    def load_values(self, values):
        for store in self.stores():
            store.load_values({k: values[k] for k in store.names()})

    def n_parameters(self):
        return sum(s.n_values() for s in self.stores())
