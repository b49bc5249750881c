"""Temporal stack: Fourier embedding, bidirectional selective scan, output head.

Tensors follow the (batch, nodes, features) layout throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

# -- Fourier decomposition --------------------------------------------------------


def n_bins(L):
    return L // 2 + 1


def fft_decompose(X):
    """Amplitude and phase of the real FFT along the last axis.

    Unnormalized forward transform; phase lies in (-pi, pi].
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] < 1:
        raise ValueError("need at least one sample along the last axis")
    spec = np.fft.rfft(X, axis=-1)
    return np.abs(spec), np.arctan2(spec.imag + 0.0, spec.real)


def fft_reconstruct(amplitude, phase, L):
    """Inverse of :func:`fft_decompose` (1/L normalization)."""
    spec = np.asarray(amplitude) * np.exp(1j * np.asarray(phase))
    return np.fft.irfft(spec, n=L, axis=-1)


def dft_matrices(L, dtype=np.float64):
    """Real and imaginary DFT matrices (L x K) with ``re = x @ C``,
    ``im = x @ S``. Angles are reduced modulo L first and sines that are
    analytically zero are stored as exact zeros, so the DC and Nyquist
    phases never flicker across the branch cut."""
    K = n_bins(L)
    t = np.arange(L)[:, None]
    k = np.arange(K)[None, :]
    red = (t * k) % L
    ang = 2.0 * np.pi * red / L
    C = np.cos(ang)
    S = -np.sin(ang)
    S[(2 * red) % L == 0] = 0.0
    return C.astype(dtype), S.astype(dtype)


def spectrum_tensors(X):
    """Differentiable amplitude and phase of ``X`` (..., L)."""
    C, S = dft_matrices(X.shape[-1], X.dtype)
    re = dc.matmul(X, dc.Tensor(C))
    im = dc.matmul(X, dc.Tensor(S))
    return dc.hypot(re, im), dc.atan2(im, re)


# -- parameter initialisation -------------------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class FftEmbedParams:
    prefix: str
    L: int
    d_h: int
    dropout: float = 0.1

    @property
    def K(self):
        return n_bins(self.L)


def init_fft_embed(store, prefix, L, d_h, dropout=0.1, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    K = n_bins(L)
    store.add(f"{prefix}.time_W", _uniform(rng, L, (L, d_h)))
    store.add(f"{prefix}.time_b", np.zeros(d_h))
    store.add(f"{prefix}.freq_W", _uniform(rng, 2 * K, (2 * K, d_h)))
    store.add(f"{prefix}.freq_b", np.zeros(d_h))
    store.add(f"{prefix}.gate_W", _uniform(rng, 2 * d_h, (2 * d_h, 2)))
    store.add(f"{prefix}.gate_b", np.zeros(2))
    store.add(f"{prefix}.ln_g", np.ones(d_h))
    store.add(f"{prefix}.ln_b", np.zeros(d_h))
    return FftEmbedParams(prefix, L, d_h, dropout)


def fft_embed(store, params, X, train=False, rng=None, return_gate=False):
    """Fuse a time-domain projection with a projection of [amplitude; phase]
    through a softmax gate over the two branches, then dropout + layer norm."""
    p = params.prefix
    X = dc._lift(X)
    if X.shape[-1] != params.L:
        raise ValueError(f"expected windows of length {params.L}, got {X.shape[-1]}")
    T = X @ store[f"{p}.time_W"] + store[f"{p}.time_b"]
    amp, phase = spectrum_tensors(X)
    F = dc.concat([amp, phase], axis=-1) @ store[f"{p}.freq_W"] + store[f"{p}.freq_b"]
    logits = dc.concat([T, F], axis=-1) @ store[f"{p}.gate_W"] + store[f"{p}.gate_b"]
    alpha = dc.softmax(logits, axis=-1)
    Z = alpha[..., 0:1] * T + alpha[..., 1:2] * F
    Z = dc.dropout(Z, params.dropout, train, rng)
    out = dc.layer_norm(Z, axis=-1) * store[f"{p}.ln_g"] + store[f"{p}.ln_b"]
    if return_gate:
        return out, alpha
    return out


# -- state-space discretization and scan ------------------------------------------

_SMALL = 1e-6


def ssm_discretize(delta, A, B):
    """Zero-order hold for diagonal A: (exp(dA), (exp(dA) - 1) / (dA) * d * B)."""
    delta = np.asarray(delta, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("step size must be positive")
    z = delta * A
    a_bar = np.exp(z)
    small = np.abs(z) < _SMALL
    safe = np.where(small, 1.0, z)
    rel = np.where(small, 1.0, np.expm1(safe) / safe)
    return a_bar, rel * delta * B


def exprel(z):
    """(exp(z) - 1) / z as a differentiable op, with its z -> 0 limit."""
    x = z.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.expm1(x) / x
    small = np.abs(x) < _SMALL
    if small.any():
        out[small] = 1.0 + x[small] / 2

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = (1.0 + x * out - out) / x  # (exp(x) - out) / x
        mid = np.abs(x) < 1e-3
        if mid.any():
            xm = x[mid]
            d[mid] = 0.5 + xm / 3.0 + xm * xm / 8.0
        return (g * d,)
    return dc._make(out, (z,), bw, "exprel")


@dataclass
class SsmParams:
    prefix: str
    width: int
    d_inner: int
    d_state: int


def init_ssm(store, prefix, width, d_inner, d_state, rng=None, dt_range=(0.01, 0.1)):
    """One scan direction: input/output projections, A_log, and the
    selective projections for the step size, B and C."""
    rng = rng if rng is not None else np.random.default_rng(0)
    store.add(f"{prefix}.in_W", _uniform(rng, width, (width, d_inner)))
    store.add(f"{prefix}.A_log", np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)),
                                         (d_inner, 1)))
    store.add(f"{prefix}.dt_W", _uniform(rng, d_inner, (d_inner, d_inner)) * 0.1)
    dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), size=d_inner))
    store.add(f"{prefix}.dt_b", dt + np.log(-np.expm1(-dt)))  # softplus inverse
    store.add(f"{prefix}.B_W", _uniform(rng, d_inner, (d_inner, d_state)))
    store.add(f"{prefix}.C_W", _uniform(rng, d_inner, (d_inner, d_state)))
    store.add(f"{prefix}.out_W", _uniform(rng, d_inner, (d_inner, width)))
    return SsmParams(prefix, width, d_inner, d_state)


def _scan_forward(U, A_neg, delta, Bs, Cs):
    """Core recurrence on U (batch, S, d_inner) with per-step delta (batch, S,
    d_inner) and Bs, Cs (batch, S, d_state); A_neg is (d_inner, d_state)."""
    dA = dc.expand_dims(delta, -1) * A_neg
    a_bar = dc.exp(dA)
    b_bar = exprel(dA) * dc.expand_dims(delta, -1) * dc.expand_dims(Bs, -2)
    h = dc.linear_scan(a_bar, b_bar * dc.expand_dims(U, -1), axis=1)
    return dc.tsum(h * dc.expand_dims(Cs, -2), axis=-1)


def selective_scan(U, store, params, direction="forward"):
    """Selective SSM over axis 1 of U (batch, S, d_inner).

    Step size, B and C are functions of each token; ``direction="backward"``
    is reverse -> scan -> reverse.
    """
    U = dc._lift(U)
    if U.ndim != 3 or U.shape[-1] != params.d_inner:
        raise ValueError(f"expected (batch, S, {params.d_inner}) input, got {U.shape}")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    p = params.prefix
    if direction == "backward":
        U = dc.reverse(U, 1)
    delta = dc.softplus(U @ store[f"{p}.dt_W"] + store[f"{p}.dt_b"])
    A_neg = -dc.exp(store[f"{p}.A_log"])
    Y = _scan_forward(U, A_neg, delta, U @ store[f"{p}.B_W"], U @ store[f"{p}.C_W"])
    if direction == "backward":
        Y = dc.reverse(Y, 1)
    return Y


def fixed_scan(u, a, delta, b, c):
    """Non-selective scalar-parameter scan used as a reference: constant
    (a, delta, b, c) over a 1-D input sequence."""
    a_bar, b_bar = ssm_discretize(delta, a, b)
    h = 0.0
    out = []
    for x in np.asarray(u, dtype=np.float64):
        h = a_bar * h + b_bar * x
        out.append(c * h)
    return np.array(out)


def _to_sequences(Z, scan_axis):
    B, N, d = Z.shape
    if scan_axis == "embedding":
        return dc.reshape(Z, (B * N, d, 1))
    if scan_axis == "node":
        return Z
    raise ValueError(f"unknown scan axis {scan_axis!r}")


def _from_sequences(Y, shape, scan_axis):
    if scan_axis == "embedding":
        return dc.reshape(Y, shape)
    return Y


def mamba_direction(store, params, Z, scan_axis="embedding", direction="forward"):
    """Project Z (B, N, d_h) into scan channels, scan, project back."""
    seq = _to_sequences(Z, scan_axis)
    U = seq @ store[f"{params.prefix}.in_W"]
    Y = selective_scan(U, store, params, direction)
    return _from_sequences(Y @ store[f"{params.prefix}.out_W"], Z.shape, scan_axis)


def bidirectional_mamba(store, fwd, bwd, Z, scan_axis="embedding", return_parts=False):
    """Sum of a forward scan and a reversed scan of the reversed input."""
    Z = dc._lift(Z)
    axis = 2 if scan_axis == "embedding" else 1
    y_f = mamba_direction(store, fwd, Z, scan_axis, "forward")
    y_r = dc.reverse(mamba_direction(store, bwd, dc.reverse(Z, axis), scan_axis, "forward"), axis)
    if return_parts:
        return y_f + y_r, y_f, y_r
    return y_f + y_r


# -- output head ----------------------------------------------------------------


@dataclass
class OutputHeadParams:
    prefix: str
    d_h: int
    horizon: int
    d_ff: int


def init_output_head(store, prefix, d_h, horizon, d_ff=None, rng=None, identity=False):
    rng = rng if rng is not None else np.random.default_rng(0)
    d_ff = d_ff or d_h
    if identity:
        if d_ff != d_h:
            raise ValueError("identity init needs d_ff == d_h")
        w1 = np.eye(d_h)[:, :, None]
        w2 = np.eye(d_h)[:, :, None]
    else:
        w1 = _uniform(rng, d_h, (d_ff, d_h, 1))
        w2 = _uniform(rng, d_ff, (d_h, d_ff, 1))
    store.add(f"{prefix}.ln1_g", np.ones(d_h))
    store.add(f"{prefix}.ln1_b", np.zeros(d_h))
    store.add(f"{prefix}.conv1_w", w1)
    store.add(f"{prefix}.conv1_b", np.zeros(d_ff))
    store.add(f"{prefix}.conv2_w", w2)
    store.add(f"{prefix}.conv2_b", np.zeros(d_h))
    store.add(f"{prefix}.ln2_g", np.ones(d_h))
    store.add(f"{prefix}.ln2_b", np.zeros(d_h))
    store.add(f"{prefix}.proj_W", _uniform(rng, d_h, (d_h, horizon)))
    store.add(f"{prefix}.proj_b", np.zeros(horizon))
    return OutputHeadParams(prefix, d_h, horizon, d_ff)


def output_head(store, params, Y):
    """LayerNorm -> 1x1 conv -> GeLU -> 1x1 conv -> LayerNorm -> linear to
    the horizon. Y is (B, N, d_h); the convolutions mix the d_h channels at
    each node."""
    p = params.prefix
    Y = dc._lift(Y)
    if Y.ndim != 3 or Y.shape[-1] != params.d_h:
        raise ValueError(f"expected (B, N, {params.d_h}) input, got {Y.shape}")
    x = dc.layer_norm(Y, axis=-1) * store[f"{p}.ln1_g"] + store[f"{p}.ln1_b"]
    x = dc.swapaxes(x, 1, 2)  # B, d_h, N
    x = dc.gelu(dc.conv1d(x, store[f"{p}.conv1_w"], store[f"{p}.conv1_b"]))
    x = dc.conv1d(x, store[f"{p}.conv2_w"], store[f"{p}.conv2_b"])
    x = dc.swapaxes(x, 1, 2)  # B, N, d_h
    x = dc.layer_norm(x, axis=-1) * store[f"{p}.ln2_g"] + store[f"{p}.ln2_b"]
    return x @ store[f"{p}.proj_W"] + store[f"{p}.proj_b"]
