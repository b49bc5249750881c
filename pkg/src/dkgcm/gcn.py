"""Graph operators and spatial convolutions for one cluster subgraph."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

LAMBDA_MAX = 2.0


@dataclass(frozen=True)
class NormalizedOperator:
    l_sym: np.ndarray
    l_scaled: np.ndarray
    a_hat: np.ndarray

    @property
    def m(self):
        return self.l_sym.shape[0]


def _inv_sqrt_degree(deg):
    out = np.zeros_like(deg)
    nz = deg > 0
    out[nz] = 1.0 / np.sqrt(deg[nz])
    return out


def normalized_laplacian(adj):
    """Symmetric normalized Laplacian, its [-1, 1] rescaling, and the
    self-loop renormalized adjacency.

    Zero-degree nodes get a zero entry in D^{-1/2}.
    """
    a = np.asarray(adj, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("adjacency must be square")
    if np.any(a < 0):
        raise ValueError("adjacency must be non-negative")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12):
        raise ValueError("adjacency must be symmetric")
    m = a.shape[0]
    eye = np.eye(m)
    deg = a.sum(axis=1)
    d = _inv_sqrt_degree(deg)
    # D^-1/2 (D - A) D^-1/2 so isolated nodes get an all-zero row
    l_sym = d[:, None] * (np.diag(deg) - a) * d[None, :]
    l_scaled = (2.0 / LAMBDA_MAX) * l_sym - eye
    at = a + eye
    dt = _inv_sqrt_degree(at.sum(axis=1))
    a_hat = dt[:, None] * at * dt[None, :]
    return NormalizedOperator(l_sym, l_scaled, a_hat)


def cheb_basis(op, K):
    """[T_0(L~), ..., T_{K-1}(L~)] via T_k = 2 L~ T_{k-1} - T_{k-2}."""
    if K <= 0:
        raise ValueError("Chebyshev order K must be >= 1")
    ls = op.l_scaled if isinstance(op, NormalizedOperator) else np.asarray(op, dtype=np.float64)
    basis = [np.eye(ls.shape[0])]
    if K > 1:
        basis.append(ls.copy())
    for _ in range(2, K):
        basis.append(2.0 * ls @ basis[-1] - basis[-2])
    return basis


def cheb_gconv(X, basis, theta):
    """sum_k T_k X theta_k for X of shape (..., m, d_in)."""
    if len(basis) != len(theta):
        raise ValueError(f"{len(basis)} basis matrices but {len(theta)} weights")
    X = dc._lift(X)
    out = None
    for Tk, th in zip(basis, theta):
        th = dc._lift(th, X)
        if th.ndim != 2 or th.shape[0] != X.shape[-1]:
            raise ValueError(f"theta shape {th.shape} does not fit input width {X.shape[-1]}")
        if Tk.shape != (X.shape[-2], X.shape[-2]):
            raise ValueError(f"operator {Tk.shape} does not fit {X.shape[-2]} nodes")
        term = dc.matmul(dc.Tensor(Tk.astype(X.dtype)), X) @ th
        out = term if out is None else out + term
    return out


def gcn_layer(X, op, W, activation="relu"):
    """activation(A_hat X W) with the self-loop normalized operator."""
    X = dc._lift(X)
    W = dc._lift(W, X)
    a_hat = op.a_hat if isinstance(op, NormalizedOperator) else np.asarray(op)
    if a_hat.shape != (X.shape[-2], X.shape[-2]):
        raise ValueError(f"operator {a_hat.shape} does not fit {X.shape[-2]} nodes")
    if W.ndim != 2 or W.shape[0] != X.shape[-1]:
        raise ValueError(f"weight shape {W.shape} does not fit input width {X.shape[-1]}")
    h = dc.matmul(dc.Tensor(a_hat.astype(X.dtype)), X) @ W
    if activation == "relu":
        return dc.relu(h)
    if activation is None:
        return h
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class GcnParams:
    mode: str
    names: list  # per-layer parameter names in the store
    K: int = 1

    @property
    def layers(self):
        return len(self.names)


def init_gcn(store, prefix, width, mode="first-order", layers=1, K=3, rng=None):
    """Register spatial weights in ``store``; initialised near identity so the
    layer starts as a smoothing filter rather than noise."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if mode not in ("first-order", "chebyshev"):
        raise ValueError(f"unknown gcn mode {mode!r}")
    if layers < 1 or K < 1:
        raise ValueError("layers and K must be >= 1")
    names = []
    scale = 0.1 / np.sqrt(width)
    for layer in range(layers):
        if mode == "first-order":
            name = f"{prefix}.W{layer}"
            store.add(name, np.eye(width) + scale * rng.standard_normal((width, width)))
            names.append([name])
        else:
            group = []
            for k in range(K):
                name = f"{prefix}.theta{layer}_{k}"
                init = (np.eye(width) if k == 0 else np.zeros((width, width)))
                store.add(name, init + scale * rng.standard_normal((width, width)))
                group.append(name)
            names.append(group)
    return GcnParams(mode, names, K)


def apply_gcn(store, params, X, op, basis=None):
    """Run every configured layer; each layer ends in ReLU."""
    h = X
    for group in params.names:
        if params.mode == "first-order":
            h = gcn_layer(h, op, store[group[0]])
        else:
            if basis is None:
                basis = cheb_basis(op, params.K)
            h = dc.relu(cheb_gconv(h, basis, [store[n] for n in group]))
    return h
