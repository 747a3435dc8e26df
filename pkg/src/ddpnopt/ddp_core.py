"""Dense DDP backward and forward passes over network layers.

Batch conventions: the per-sample loss is averaged over the batch, gains are
built from batch-mean ``Q_u`` / ``Q_ux`` (the weights are shared), and the
value recursion stays per sample so ``V_x`` keeps its per-sample gradient
meaning.  The feedback scale ``gamma`` multiplies ``Q_ux`` wherever it
appears, so ``gamma = 0`` is exactly back-propagation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalError, ShapeError
from .losses import TerminalExpansion
from .network import NetworkSpec, Trajectory, activation_derivs, forward_layer


@dataclass(frozen=True)
class DDPOptions:
    second_order_dynamics: bool = False
    tikhonov_lambda: float = 1e-3
    feedback_scale: float = 1.0
    open_gain_scale: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.tikhonov_lambda < 0:
            raise ValueError("tikhonov_lambda must be >= 0")
        if not 0.0 <= self.feedback_scale <= 1.0:
            raise ValueError("feedback_scale must lie in [0, 1]")
        if not 0.0 < self.open_gain_scale <= 1.0:
            raise ValueError("open_gain_scale must lie in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass(frozen=True)
class ValueExpansion:
    v_x: np.ndarray
    v_xx: Optional[np.ndarray] = None


@dataclass(frozen=True)
class QExpansion:
    """Per-sample Q derivatives of one layer.

    ``q_u`` holds per-sample vectors only when the mixed term is active;
    ``q_u_mean`` always holds the batch mean (the weight gradient).
    """

    q_x: np.ndarray
    q_u_mean: np.ndarray
    v_h: np.ndarray
    q_u: Optional[np.ndarray] = None
    q_xx: Optional[np.ndarray] = None
    q_ux: Optional[np.ndarray] = None


class DenseGain:
    def __init__(self, matrix):
        self.matrix_ = np.asarray(matrix, dtype=float)

    @property
    def shape(self):
        return self.matrix_.shape

    def apply(self, dx):
        return self.matrix_ @ dx

    def matrix(self):
        return self.matrix_


class RankOneGain:
    """``K = a b^T`` without materialising the matrix."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)

    @property
    def shape(self):
        return (self.a.shape[0], self.b.shape[0])

    def apply(self, dx):
        return (self.b @ dx) * self.a

    def matrix(self):
        return np.outer(self.a, self.b)


@dataclass
class FeedbackPolicy:
    k: np.ndarray
    K: object  # DenseGain | RankOneGain | factorized.FactoredGain


@dataclass
class BackwardResult:
    policies: list
    preconds: list
    grad_norms: list
    grads: Optional[list] = None
    values: Optional[list] = None
    qs: Optional[list] = field(default=None, repr=False)


def terminal_value(term: TerminalExpansion, with_hessian=True) -> ValueExpansion:
    return ValueExpansion(term.phi_x, term.dense_hessian() if with_hessian else None)


def q_expansion(layer, u, x_t, h_t, value_next: ValueExpansion, opts: DDPOptions,
                index=None, mixed=True) -> QExpansion:
    """Q derivatives at one layer; set ``mixed=False`` to skip ``Q_xx``/``Q_ux``."""
    T = layer.transform
    vx = value_next.v_x
    if vx.shape != h_t.shape:
        raise ShapeError(f"V_x has shape {vx.shape}, expected {h_t.shape}", layer=index)
    B = x_t.shape[0]
    sh, shh = activation_derivs(layer.activation, h_t)
    vh = sh * vx
    q_x = T.gx_T(u, vh)
    q_u_mean = T.gu_T_sum(x_t, vh) / B
    c = opts.weight_decay
    if c:
        q_u_mean = q_u_mean + c * u
    if not mixed or value_next.v_xx is None:
        return QExpansion(q_x, q_u_mean, vh)

    q_u = T.gu_T(x_t, vh)
    if c:
        q_u = q_u + c * u
    vxx = value_next.v_xx
    vhh = sh[:, :, None] * vxx * sh[:, None, :]
    if opts.second_order_dynamics:
        i = np.arange(vhh.shape[1])
        vhh = vhh.copy()
        vhh[:, i, i] += vx * shh
    G = T.gx_matrix(u)
    P = vhh @ G
    q_xx = G.T @ P
    q_ux = T.gu_T_cols(x_t, P)
    if opts.second_order_dynamics:
        q_ux = q_ux + T.vh_dot_gux(vh)
    return QExpansion(q_x, q_u_mean, vh, q_u, q_xx, q_ux)


def gains(q: QExpansion, precond, opts: DDPOptions, index=None) -> FeedbackPolicy:
    """``k = -alpha M^-1 mean(Q_u)``, ``K = -gamma M^-1 mean(Q_ux)``."""
    try:
        k = -(opts.open_gain_scale * precond.apply_inverse(q.q_u_mean))
        m, n = q.q_u_mean.shape[0], q.q_x.shape[1]
        if q.q_ux is None or opts.feedback_scale == 0.0:
            K = DenseGain(np.zeros((m, n)))
        else:
            K = DenseGain(-(opts.feedback_scale * precond.apply_inverse(q.q_ux.mean(axis=0))))
    except NumericalError as exc:
        raise exc.located(layer=index) from None
    return FeedbackPolicy(k, K)


def _apply_per_sample(precond, arr):
    """``M^-1`` applied to each sample's vector (``(B, m)``) or matrix (``(B, m, n)``)."""
    if arr.ndim == 2:
        return precond.apply_inverse(arr.T).T
    B, m, n = arr.shape
    flat = arr.transpose(1, 0, 2).reshape(m, B * n)
    return precond.apply_inverse(flat).reshape(m, B, n).transpose(1, 0, 2)


def value_recursion(q: QExpansion, precond, opts: DDPOptions) -> ValueExpansion:
    if q.q_ux is None:
        if q.q_xx is None:
            return ValueExpansion(q.q_x)
        v_xx = q.q_xx
    else:
        g = opts.feedback_scale
        qs = g * q.q_ux
        qsT = qs.transpose(0, 2, 1)
        v_x = q.q_x - (qsT @ _apply_per_sample(precond, q.q_u)[:, :, None])[:, :, 0]
        v_xx = q.q_xx - qsT @ _apply_per_sample(precond, qs)
        v_xx = 0.5 * (v_xx + v_xx.transpose(0, 2, 1))
        lam = opts.tikhonov_lambda
        if lam:
            v_xx = v_xx + lam * np.eye(v_xx.shape[1])
        return ValueExpansion(v_x, v_xx)
    lam = opts.tikhonov_lambda
    if lam:
        v_xx = v_xx + lam * np.eye(v_xx.shape[1])
    return ValueExpansion(q.q_x, v_xx)


def backward_pass(net: NetworkSpec, weights, traj: Trajectory, terminal: TerminalExpansion,
                  preconds, opts: DDPOptions, record=False) -> BackwardResult:
    """Run the backward sweep from the last layer to the first.

    Each layer's preconditioner statistics are refreshed with this batch before
    its gains are formed; the refreshed states are returned in the result.
    """
    T = len(net)
    mixed = opts.feedback_scale != 0.0
    value = terminal_value(terminal, with_hessian=mixed)
    policies = [None] * T
    new_pre = list(preconds)
    grad_norms = [0.0] * T
    grads = [None] * T
    values = [None] * (T + 1) if record else None
    qs = [None] * T if record else None
    if record:
        values[T] = value
    for t in range(T - 1, -1, -1):
        layer = net.layers[t]
        u, x, h = weights[t], traj.xs[t], traj.hs[t]
        q = q_expansion(layer, u, x, h, value, opts, index=t, mixed=mixed)
        pre = new_pre[t].update_stats(layer.transform, x, q.v_h, q.q_u_mean)
        new_pre[t] = pre
        policies[t] = gains(q, pre, opts, index=t)
        grads[t] = q.q_u_mean
        grad_norms[t] = float(np.linalg.norm(q.q_u_mean))
        if t > 0 or record:
            try:
                value = value_recursion(q, pre, opts)
            except NumericalError as exc:
                raise exc.located(layer=t) from None
        if record:
            values[t] = value
            qs[t] = q
    return BackwardResult(policies, new_pre, grad_norms, grads, values, qs)


@dataclass
class ForwardResult:
    weights: list
    trajectory: Trajectory
    k_norms: list
    feedback_norms: list
    du_norms: list


def forward_pass(net: NetworkSpec, weights, nominal: Trajectory, policies, x0,
                 open_scale=1.0) -> ForwardResult:
    """Apply ``du_t = k_t + K_t mean(dx_t)`` layer by layer while re-simulating."""
    x = np.asarray(x0, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    dx = np.zeros_like(x)
    new_w, xs, hs = [], [x], []
    k_norms, fb_norms, du_norms = [], [], []
    for t, layer in enumerate(net.layers):
        pol = policies[t]
        k = pol.k if open_scale == 1.0 else open_scale * pol.k
        fb = pol.K.apply(dx.mean(axis=0))
        du = k + fb
        u = weights[t] + du
        h, x = forward_layer(x, u, layer, index=t)
        dx = x - nominal.xs[t + 1]
        new_w.append(u)
        xs.append(x)
        hs.append(h)
        k_norms.append(float(np.linalg.norm(k)))
        fb_norms.append(float(np.linalg.norm(fb)))
        du_norms.append(float(np.linalg.norm(du)))
    return ForwardResult(new_w, Trajectory(tuple(xs), tuple(hs)), k_norms, fb_norms, du_norms)
