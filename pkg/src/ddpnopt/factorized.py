"""Rank-1 factored backward pass.

With a rank-1 terminal Hessian ``z z^T`` and stage costs that ignore the
state, every ``Q_ux``, ``Q_xx`` and ``V_xx`` stays a signed outer product
``s z z^T`` (``s`` in {-1, +1} per sample), so the sweep only propagates
vectors.  The sign matters: a large ``M^-1`` can turn ``V_xx`` negative.
The batch-mean feedback gain is a sum of per-sample rank-1 terms; it is kept
as per-sample factors and applied lazily.
Tikhonov regularisation is not applied here (it would break the rank-1 form).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ddp_core import BackwardResult, DDPOptions, FeedbackPolicy
from .errors import NumericalError, ShapeError, UnsupportedModeError
from .losses import TerminalExpansion
from .network import NetworkSpec, Trajectory, activation_derivs


@dataclass(frozen=True)
class FactoredValue:
    """``V_x``, the factor ``z`` and sign ``s`` with ``V_xx = s z z^T`` (all per sample)."""

    v_x: np.ndarray
    z: np.ndarray
    sign: np.ndarray = None

    def signs(self):
        return np.ones(self.z.shape[0]) if self.sign is None else self.sign


@dataclass(frozen=True)
class FactoredQ:
    """Per-sample ``qx`` (``Q_xx = s qx qx^T``) and ``qu`` (``Q_ux = s qu qx^T``).

    ``w = sigma_h * z_next`` is kept so ``qu`` can be rebuilt from the nominal
    input without storing it; ``qu`` itself may be ``None``.
    """

    qx: np.ndarray
    w: np.ndarray
    q_x_grad: np.ndarray
    q_u_grad_mean: np.ndarray
    v_h: np.ndarray
    sign: np.ndarray
    qu: np.ndarray = None


class AllocationTracker:
    """Test hook recording the size (in floats) of auxiliary arrays per layer."""

    def __init__(self):
        self.sizes = {}

    def record(self, layer, *arrays):
        lst = self.sizes.setdefault(layer, [])
        for a in arrays:
            lst.append(int(np.asarray(a).size))

    def peak(self, layer):
        return max(self.sizes.get(layer, [0]))


class FactoredGain:
    """``K = -(gamma / B) M^-1 sum_j s_j qu_j qx_j^T`` kept as per-sample factors.

    ``qu_j = g_u(x_j)^T w_j`` is rebuilt on demand, so storage is the nominal
    inputs (already part of the trajectory) plus ``w`` and ``qx``.
    """

    def __init__(self, transform, x, w, qx, gamma, precond, sign=None):
        self.transform = transform
        self.x = x
        self.w = w
        self.qx = qx if sign is None else sign[:, None] * qx
        self.gamma = gamma
        self.precond = precond

    @property
    def shape(self):
        return (self.transform.num_params, self.qx.shape[1])

    def apply(self, dx):
        c = self.qx @ dx  # (B,)
        if self.gamma == 0.0:
            return np.zeros(self.transform.num_params)
        acc = self.transform.gu_T_sum(self.x, c[:, None] * self.w) / self.x.shape[0]
        return -(self.gamma * self.precond.apply_inverse(acc))

    def matrix(self):
        qu = self.transform.gu_T(self.x, self.w)
        mean_qux = qu.T @ self.qx / self.x.shape[0]
        return -(self.gamma * self.precond.apply_inverse(mean_qux))

    def stored_size(self):
        return self.w.size + self.qx.size


def _check_modes(opts: DDPOptions):
    if opts.second_order_dynamics:
        raise UnsupportedModeError("factored backward pass supports first-order dynamics only")


def factored_q(layer, u, x_t, h_t, fv_next: FactoredValue, opts: DDPOptions = DDPOptions(),
               index=None, with_qu=True) -> FactoredQ:
    _check_modes(opts)
    T = layer.transform
    if fv_next.z.shape != h_t.shape or fv_next.v_x.shape != h_t.shape:
        raise ShapeError("factored value does not match layer output", layer=index)
    sh, _ = activation_derivs(layer.activation, h_t)
    w = sh * fv_next.z
    vh = sh * fv_next.v_x
    qx = T.gx_T(u, w)
    q_x_grad = T.gx_T(u, vh)
    g = T.gu_T_sum(x_t, vh) / x_t.shape[0]
    if opts.weight_decay:
        g = g + opts.weight_decay * u
    qu = T.gu_T(x_t, w) if with_qu else None
    return FactoredQ(qx, w, q_x_grad, g, vh, fv_next.signs(), qu)


def _next_factor(qx, sign, a, gamma):
    """``V_xx = (s - gamma^2 a) qx qx^T`` rewritten as ``s' z z^T``."""
    c = sign - gamma * gamma * a
    return np.sqrt(np.abs(c))[:, None] * qx, np.where(c < 0, -1.0, 1.0)


def z_recursion(fq: FactoredQ, precond, gamma=1.0):
    """Next factor and sign from ``a = qu^T M^-1 qu`` per sample."""
    a = np.einsum("bm,bm->b", fq.qu, precond.apply_inverse(fq.qu.T).T)
    return _next_factor(fq.qx, fq.sign, a, gamma)


def factored_backward_pass(net: NetworkSpec, weights, traj: Trajectory, terminal: TerminalExpansion,
                           preconds, opts: DDPOptions, tracker: AllocationTracker = None,
                           record=False) -> BackwardResult:
    """Rank-1 backward sweep; returns policies whose ``K`` are :class:`FactoredGain`."""
    _check_modes(opts)
    if not terminal.rank1:
        raise UnsupportedModeError("factored backward pass needs a rank-1 terminal Hessian")
    gamma = opts.feedback_scale
    nT = len(net)
    fv = FactoredValue(terminal.phi_x, terminal.z, np.ones(terminal.z.shape[0]))
    policies = [None] * nT
    new_pre = list(preconds)
    grad_norms = [0.0] * nT
    grads = [None] * nT
    values = [None] * (nT + 1) if record else None
    if record:
        values[nT] = fv
    for t in range(nT - 1, -1, -1):
        layer = net.layers[t]
        T = layer.transform
        u, x, h = weights[t], traj.xs[t], traj.hs[t]
        fq = factored_q(layer, u, x, h, fv, opts, index=t, with_qu=False)
        pre = new_pre[t].update_stats(T, x, fq.v_h, fq.q_u_grad_mean)
        new_pre[t] = pre
        try:
            k = -(opts.open_gain_scale * pre.apply_inverse(fq.q_u_grad_mean))
        except NumericalError as exc:
            raise exc.located(layer=t) from None
        policies[t] = FeedbackPolicy(k, FactoredGain(T, x, fq.w, fq.qx, gamma, pre, fq.sign))
        grads[t] = fq.q_u_grad_mean
        grad_norms[t] = float(np.linalg.norm(fq.q_u_grad_mean))
        if tracker is not None:
            tracker.record(t, k, fq.w, fq.qx, fq.q_x_grad)
        if t == 0 and not record:
            break
        # one sample at a time keeps the transient control-space storage at O(m)
        B = x.shape[0]
        a = np.empty(B)
        corr = np.empty(B)
        for i in range(B):
            qu_i = T.gu_T(x[i:i + 1], fq.w[i:i + 1])[0]
            if opts.weight_decay:
                qg_i = T.gu_T(x[i:i + 1], fq.v_h[i:i + 1])[0] + opts.weight_decay * u
            else:
                qg_i = T.gu_T(x[i:i + 1], fq.v_h[i:i + 1])[0]
            mq_i = pre.apply_inverse(qu_i)
            if tracker is not None:
                tracker.record(t, qu_i, qg_i, mq_i)
            a[i] = qu_i @ mq_i
            corr[i] = gamma * fq.sign[i] * (mq_i @ qg_i)
        v_x = fq.q_x_grad - corr[:, None] * fq.qx
        z, sign = _next_factor(fq.qx, fq.sign, a, gamma)
        fv = FactoredValue(v_x, z, sign)
        if record:
            values[t] = fv
    return BackwardResult(policies, new_pre, grad_norms, grads, values)
