"""Curvature models standing in for ``Q_uu`` at each layer.

Every state is immutable: ``update_stats`` returns a new state, so a policy
holding on to a state keeps seeing the curvature it was built with.
``apply_inverse`` maps a control-space vector (or an ``(m, c)`` stack of them)
to ``M^{-1} g``; the learning rate lives inside ``M``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import NumericalError, ShapeError


def _check_finite(out, layer=None):
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite preconditioned vector", layer=layer)
    return out


@dataclass(frozen=True)
class Identity:
    eta: float

    def update_stats(self, layer, x, vh, g_mean):
        return self

    def apply_inverse(self, g):
        return _check_finite(self.eta * g)


@dataclass(frozen=True)
class AdaptiveDiag:
    """RMSprop-style diagonal ``M = diag(sqrt(v) + eps) / eta`` with ``v`` an EMA of ``g*g``."""

    eta: float
    beta: float = 0.99
    eps: float = 1e-8
    v: Optional[np.ndarray] = field(default=None, compare=False)
    step_count: int = 0

    def update_stats(self, layer, x, vh, g_mean):
        v = np.zeros_like(g_mean) if self.v is None else self.v
        if v.shape != g_mean.shape:
            raise ShapeError(f"gradient shape {g_mean.shape} != state shape {v.shape}")
        v = self.beta * v + (1 - self.beta) * (g_mean * g_mean)
        return replace(self, v=v, step_count=self.step_count + 1)

    def apply_inverse(self, g):
        if self.v is None:
            raise NumericalError("adaptive diagonal used before any statistics update")
        d = np.sqrt(self.v) + self.eps
        if g.ndim == 2:
            d = d[:, None]
        return _check_finite(self.eta * g / d)


@dataclass(frozen=True)
class KroneckerGN:
    """``M = (A + damping I) (x) (Bm + damping I) / eta``.

    ``A`` is the running second moment of bias-augmented layer inputs (im2col
    patches for conv layers), ``Bm`` that of ``V_h``.  The first update
    initialises both factors with the batch statistics.
    """

    eta: float
    beta: float = 0.95
    damping: float = 1e-2
    A: Optional[np.ndarray] = field(default=None, compare=False)
    Bm: Optional[np.ndarray] = field(default=None, compare=False)
    step_count: int = 0

    def update_stats(self, layer, x, vh, g_mean):
        xa = layer.kron_inputs(x)
        vo = layer.kron_outputs(vh)
        B, P, _ = xa.shape
        A_b = np.einsum("bpi,bpj->ij", xa, xa) / (B * P)
        B_b = np.einsum("bpi,bpj->ij", vo, vo) / B
        if self.A is None:
            A, Bm = A_b, B_b
        else:
            A = self.beta * self.A + (1 - self.beta) * A_b
            Bm = self.beta * self.Bm + (1 - self.beta) * B_b
        return replace(self, A=A, Bm=Bm, step_count=self.step_count + 1)

    @cached_property
    def _inverses(self):
        if self.A is None:
            raise NumericalError("Kronecker preconditioner used before any statistics update")
        Ad = self.A + self.damping * np.eye(self.A.shape[0])
        Bd = self.Bm + self.damping * np.eye(self.Bm.shape[0])
        try:
            Ai = np.linalg.solve(Ad, np.eye(Ad.shape[0]))
            Bi = np.linalg.solve(Bd, np.eye(Bd.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular Kronecker factor: {exc}") from None
        return 0.5 * (Ai + Ai.T), 0.5 * (Bi + Bi.T)

    def apply_inverse(self, g):
        Ai, Bi = self._inverses
        a, o = Ai.shape[0], Bi.shape[0]
        single = g.ndim == 1
        g2 = g[:, None] if single else g
        if g2.shape[0] != a * o:
            raise ShapeError(f"vector length {g2.shape[0]} != {o} x {a}")
        c = g2.shape[1]
        G = g2.T.reshape(c, a, o).transpose(0, 2, 1)  # column-major un-vec
        X = Bi @ G @ Ai
        out = self.eta * X.transpose(0, 2, 1).reshape(c, a * o).T
        return _check_finite(out[:, 0] if single else out)


@dataclass(frozen=True)
class DenseCurvature:
    """Fixed explicit matrix ``M = matrix / eta``; used for exact stage-wise Newton checks."""

    eta: float
    matrix: np.ndarray = field(compare=False)

    def update_stats(self, layer, x, vh, g_mean):
        return self

    def apply_inverse(self, g):
        try:
            out = self.eta * np.linalg.solve(self.matrix, g)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular curvature matrix: {exc}") from None
        return _check_finite(out)


def update_stats(state, layer, x, vh, g_mean):
    return state.update_stats(layer, x, vh, g_mean)


def apply_inverse(state, g):
    return state.apply_inverse(np.asarray(g, dtype=float))


def make_preconditioner(kind: str, eta: float, beta=None, eps=1e-8, damping=1e-2):
    if kind == "identity":
        return Identity(eta)
    if kind == "adaptive_diag":
        return AdaptiveDiag(eta, 0.99 if beta is None else beta, eps)
    if kind == "kronecker":
        return KroneckerGN(eta, 0.95 if beta is None else beta, damping)
    raise ValueError(f"unknown preconditioner {kind!r}")
