"""Layer dynamics of a feedforward network viewed as a discrete-time system.

A layer maps a state batch ``x`` (sample-major, shape ``(B, n)``) and a
control vector ``u`` to the pre-activation ``h = g(x, u)`` and the next state
``sigma(h)``.  The control vector stores the weight matrix in column-major
order followed by the bias.  For a convolution the "weight matrix" is the
``out_channels x (in_channels * 9)`` kernel matrix acting on im2col patches,
so both layer kinds share one control layout and one Kronecker convention.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


class Activation(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


def _sigmoid(h):
    # split by sign to avoid overflow in exp
    out = np.empty_like(h)
    pos = h >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
    e = np.exp(h[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activate(kind, h):
    kind = Activation(kind)
    if kind is Activation.IDENTITY:
        return h.copy()
    if kind is Activation.RELU:
        return np.maximum(h, 0.0)
    if kind is Activation.TANH:
        return np.tanh(h)
    return _sigmoid(h)


def activation_derivs(kind, h):
    """Elementwise first and second derivatives of the activation at ``h``.

    ReLU uses the subgradient 0 at exactly ``h == 0``.
    """
    kind = Activation(kind)
    h = np.asarray(h, dtype=float)
    if kind is Activation.IDENTITY:
        return np.ones_like(h), np.zeros_like(h)
    if kind is Activation.RELU:
        return (h > 0).astype(h.dtype), np.zeros_like(h)
    if kind is Activation.TANH:
        t = np.tanh(h)
        d = 1.0 - t * t
        return d, -2.0 * t * d
    s = _sigmoid(h)
    d = s * (1.0 - s)
    return d, d * (1.0 - 2.0 * s)


@dataclass(frozen=True)
class Affine:
    in_dim: int
    out_dim: int

    @property
    def n_in(self) -> int:
        return self.in_dim

    @property
    def n_out(self) -> int:
        return self.out_dim

    @property
    def fan_in(self) -> int:
        return self.in_dim

    @property
    def out_channels(self) -> int:
        return self.out_dim

    @property
    def num_params(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim

    def unvec(self, u):
        k = self.out_dim * self.in_dim
        W = u[:k].reshape(self.in_dim, self.out_dim).T
        return W, u[k:]

    def vec(self, W, b):
        return np.concatenate([np.asarray(W).T.reshape(-1), np.asarray(b)])

    def pre(self, x, u):
        W, b = self.unvec(u)
        return x @ W.T + b

    def gx_T(self, u, v):
        W, _ = self.unvec(u)
        return v @ W

    def gu_T(self, x, v):
        B = x.shape[0]
        w = (x[:, :, None] * v[:, None, :]).reshape(B, -1)
        return np.concatenate([w, v], axis=1)

    def gu_T_sum(self, x, v):
        G = v.T @ x  # out x in, sum over the batch
        return self.vec(G, v.sum(axis=0))

    def gu_T_cols(self, x, P):
        """Apply ``g_u^T`` to every column of ``P`` (shape ``(B, out, c)``)."""
        B, _, c = P.shape
        w = (x[:, :, None, None] * P[:, None, :, :]).reshape(B, -1, c)
        return np.concatenate([w, P], axis=1)

    def gx_matrix(self, u):
        return self.unvec(u)[0]

    def vh_dot_gux(self, vh):
        """Contract ``V_h`` with the bilinear tensor ``g_ux``: shape ``(B, m, n_in)``.

        Column ``k`` carries ``V_h`` in the rows of ``W``'s k-th column; the bias
        rows are zero.
        """
        B = vh.shape[0]
        eye = np.eye(self.in_dim)
        w = (eye[None, :, None, :] * vh[:, None, :, None]).reshape(B, -1, self.in_dim)
        return np.concatenate([w, np.zeros((B, self.out_dim, self.in_dim))], axis=1)

    def kron_inputs(self, x):
        B = x.shape[0]
        return np.concatenate([x, np.ones((B, 1))], axis=1)[:, None, :]

    def kron_outputs(self, v):
        return v[:, None, :]


@dataclass(frozen=True)
class Conv:
    """3x3 convolution, stride 1, zero padding 1. States are flattened ``(C, H, W)``."""

    in_channels: int
    out_channels: int
    height: int
    width: int
    kernel: int = 3

    def __post_init__(self):
        if self.kernel != 3:
            raise ValueError("only 3x3 kernels are supported")

    @property
    def n_in(self) -> int:
        return self.in_channels * self.height * self.width

    @property
    def n_out(self) -> int:
        return self.out_channels * self.height * self.width

    @property
    def fan_in(self) -> int:
        return self.in_channels * 9

    @property
    def num_params(self) -> int:
        return self.out_channels * self.fan_in + self.out_channels

    def unvec(self, u):
        k = self.out_channels * self.fan_in
        Wm = u[:k].reshape(self.fan_in, self.out_channels).T
        return Wm, u[k:]

    def vec(self, Wm, b):
        return np.concatenate([np.asarray(Wm).T.reshape(-1), np.asarray(b)])

    def kernel_tensor(self, u):
        Wm, _ = self.unvec(u)
        return Wm.reshape(self.out_channels, self.in_channels, 3, 3)

    def patches(self, x):
        """im2col: ``(B, C_in*9, H*W)`` with row index ``c*9 + di*3 + dj``."""
        B = x.shape[0]
        img = x.reshape(B, self.in_channels, self.height, self.width)
        padded = np.pad(img, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(padded, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
        return win.transpose(0, 1, 4, 5, 2, 3).reshape(B, self.fan_in, self.height * self.width)

    def col2im(self, cols):
        B = cols.shape[0]
        H, W = self.height, self.width
        c = cols.reshape(B, self.in_channels, 3, 3, H, W)
        out = np.zeros((B, self.in_channels, H + 2, W + 2))
        for di in range(3):
            for dj in range(3):
                out[:, :, di:di + H, dj:dj + W] += c[:, :, di, dj]
        return out[:, :, 1:H + 1, 1:W + 1].reshape(B, -1)

    def pre(self, x, u):
        Wm, b = self.unvec(u)
        h = np.einsum("ok,bkp->bop", Wm, self.patches(x)) + b[None, :, None]
        return h.reshape(x.shape[0], -1)

    def _maps(self, v):
        return v.reshape(v.shape[0], self.out_channels, self.height * self.width)

    def gx_T(self, u, v):
        Wm, _ = self.unvec(u)
        return self.col2im(np.einsum("ok,bop->bkp", Wm, self._maps(v)))

    def gu_T(self, x, v):
        V = self._maps(v)
        dW = np.einsum("bop,bkp->bko", V, self.patches(x))
        return np.concatenate([dW.reshape(x.shape[0], -1), V.sum(axis=2)], axis=1)

    def gu_T_sum(self, x, v):
        V = self._maps(v)
        dW = np.einsum("bop,bkp->ok", V, self.patches(x))
        return self.vec(dW, V.sum(axis=(0, 2)))

    def gu_T_cols(self, x, P):
        c = P.shape[2]
        return np.stack([self.gu_T(x, P[:, :, j]) for j in range(c)], axis=2)

    def gx_matrix(self, u):
        return self.gx_T(u, np.eye(self.n_out))  # row j = D^T e_j = D[j, :]

    def vh_dot_gux(self, vh):
        B = vh.shape[0]
        basis = self.patches(np.eye(self.n_in))  # n_in, K, HW
        w = np.einsum("bop,jkp->bkoj", self._maps(vh), basis).reshape(B, -1, self.n_in)
        return np.concatenate([w, np.zeros((B, self.out_channels, self.n_in))], axis=1)

    def kron_inputs(self, x):
        p = self.patches(x).transpose(0, 2, 1)
        return np.concatenate([p, np.ones(p.shape[:2] + (1,))], axis=2)

    def kron_outputs(self, v):
        return self._maps(v).transpose(0, 2, 1)


Transform = Union[Affine, Conv]


@dataclass(frozen=True)
class LayerSpec:
    transform: Transform
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_in(self) -> int:
        return self.transform.n_in

    @property
    def n_out(self) -> int:
        return self.transform.n_out

    @property
    def num_params(self) -> int:
        return self.transform.num_params


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("network needs at least one layer")
        for t in range(1, len(layers)):
            if layers[t - 1].n_out != layers[t].n_in:
                raise ShapeError(
                    f"input dim {layers[t].n_in} != previous output dim {layers[t - 1].n_out}", layer=t
                )
        object.__setattr__(self, "layers", layers)

    def __len__(self):
        return len(self.layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out


def mlp(dims: Sequence[int], activation="tanh", output_activation="identity") -> NetworkSpec:
    """Fully connected network with layer widths ``dims`` (input first)."""
    layers = []
    for t in range(len(dims) - 1):
        act = output_activation if t == len(dims) - 2 else activation
        layers.append(LayerSpec(Affine(dims[t], dims[t + 1]), act))
    return NetworkSpec(tuple(layers))


@dataclass(frozen=True)
class Trajectory:
    """Nominal states ``xs[0..T]`` and pre-activations ``hs[0..T-1]`` for one batch."""

    xs: tuple
    hs: tuple

    @property
    def batch_size(self) -> int:
        return self.xs[0].shape[0]

    @property
    def horizon(self) -> int:
        return len(self.hs)


def _check_layer(x, u, spec: LayerSpec, index):
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ShapeError(f"state has shape {x.shape}, expected (B, {spec.n_in})", layer=index)
    if u.ndim != 1 or u.shape[0] != spec.num_params:
        raise ShapeError(f"control has shape {u.shape}, expected ({spec.num_params},)", layer=index)


def forward_layer(x, u, spec: LayerSpec, index=None):
    """Return ``(h, x_next)`` for one layer; a 1-D ``x`` is treated as a single sample."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    _check_layer(xb, u, spec, index)
    h = spec.transform.pre(xb, u)
    xn = activate(spec.activation, h)
    if single:
        return h[0], xn[0]
    return h, xn


def simulate(net: NetworkSpec, weights, x0) -> Trajectory:
    x = np.asarray(x0, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if len(weights) != len(net):
        raise ShapeError(f"got {len(weights)} control vectors for {len(net)} layers")
    xs, hs = [x], []
    for t, spec in enumerate(net.layers):
        h, x = forward_layer(x, weights[t], spec, index=t)
        hs.append(h)
        xs.append(x)
    return Trajectory(tuple(xs), tuple(hs))


def _vec_args(spec, first, v, index):
    first = np.asarray(first, dtype=float)
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    vb = v[None, :] if single else v
    if vb.shape[1] != spec.n_out:
        raise ShapeError(f"vector has length {vb.shape[1]}, expected {spec.n_out}", layer=index)
    return first, vb, single


def gx_T_vec(spec: LayerSpec, u, x, v, index=None):
    """``g_x^T v``: W^T v for affine layers, transposed convolution for conv layers."""
    u, vb, single = _vec_args(spec, u, v, index)
    if u.shape != (spec.num_params,):
        raise ShapeError(f"control has shape {u.shape}", layer=index)
    out = spec.transform.gx_T(u, vb)
    return out[0] if single else out


def gu_T_vec(spec: LayerSpec, x, v, index=None):
    """``g_u^T v`` laid out like the control vector: ``[x (x) v ; v]`` for affine layers."""
    x, vb, single = _vec_args(spec, x, v, index)
    xb = x[None, :] if x.ndim == 1 else x
    if xb.shape[1] != spec.n_in or xb.shape[0] != vb.shape[0]:
        raise ShapeError(f"state has shape {x.shape}", layer=index)
    out = spec.transform.gu_T(xb, vb)
    return out[0] if single else out
