"""Terminal objectives: value, gradient and curvature at the network output."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InfeasibleDimensionError, ShapeError


@dataclass(frozen=True)
class TerminalExpansion:
    """Per-sample loss values, gradients and either dense Hessians or rank-1 factors.

    Exactly one of ``hessian`` (``(B, d, d)``) and ``z`` (``(B, d)``, meaning
    ``phi_xx = z z^T``) is set.
    """

    value: np.ndarray
    phi_x: np.ndarray
    hessian: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None

    @property
    def rank1(self) -> bool:
        return self.z is not None

    def dense_hessian(self):
        if self.hessian is not None:
            return self.hessian
        return self.z[:, :, None] * self.z[:, None, :]


def _finish(value, grad, dense_h, rank1):
    if rank1:
        return TerminalExpansion(value, grad, z=grad.copy())
    return TerminalExpansion(value, grad, hessian=dense_h())


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def mse_expansion(x_T, targets, rank1=False) -> TerminalExpansion:
    x = _as_batch(x_T)
    y = _as_batch(targets)
    if x.shape != y.shape:
        raise ShapeError(f"outputs {x.shape} and targets {y.shape} differ")
    r = x - y
    value = 0.5 * np.sum(r * r, axis=1)
    eye = np.eye(x.shape[1])
    return _finish(value, r, lambda: np.broadcast_to(eye, (x.shape[0],) + eye.shape).copy(), rank1)


def _check_labels(labels, n, classes):
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = labels[None]
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} samples")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    return labels.astype(int)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_expansion(logits, labels, rank1=False) -> TerminalExpansion:
    z = _as_batch(logits)
    B, L = z.shape
    labels = _check_labels(labels, B, L)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    idx = np.arange(B)
    value = lse - z[idx, labels]
    p = softmax(z)
    grad = p.copy()
    grad[idx, labels] -= 1.0

    def dense():
        return np.einsum("bi,ij->bij", p, np.eye(L)) - p[:, :, None] * p[:, None, :]

    return _finish(value, grad, dense, rank1)


@dataclass(frozen=True)
class MMCCenters:
    centers: np.ndarray
    radius: float

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def default_mmc_radius(dim: int) -> float:
    return 10.0 if dim >= 10 else 1.0


def make_mm_centers(num_classes: int, dim: int, radius: Optional[float] = None) -> MMCCenters:
    """Equiangular simplex of ``num_classes`` points of norm ``radius`` in ``R^dim``.

    Recursive construction: the first center is ``e_1``; each later center fixes
    its leading coordinates so its inner product with every earlier center is
    ``-1/(L-1)``, then takes the remaining norm on its own coordinate.
    """
    L = int(num_classes)
    if L < 2:
        raise ValueError("need at least two classes")
    if dim < L - 1:
        raise InfeasibleDimensionError(f"dimension {dim} < num_classes - 1 = {L - 1}")
    C = default_mmc_radius(dim) if radius is None else float(radius)
    if C <= 0:
        raise ValueError("radius must be positive")
    mu = np.zeros((L, dim))
    mu[0, 0] = 1.0
    for i in range(1, L):
        for j in range(i):
            mu[i, j] = -(1.0 / (L - 1) + mu[i] @ mu[j]) / mu[j, j]
        if i < dim:
            mu[i, i] = np.sqrt(max(1.0 - mu[i] @ mu[i], 0.0))
    return MMCCenters(C * mu, C)


def mmc_expansion(x_T, labels, centers: MMCCenters, rank1=False) -> TerminalExpansion:
    x = _as_batch(x_T)
    if x.shape[1] != centers.dim:
        raise ShapeError(f"output dim {x.shape[1]} != center dim {centers.dim}")
    labels = _check_labels(labels, x.shape[0], centers.num_classes)
    r = x - centers.centers[labels]
    value = 0.5 * np.sum(r * r, axis=1)
    eye = np.eye(x.shape[1])
    return _finish(value, r, lambda: np.broadcast_to(eye, (x.shape[0],) + eye.shape).copy(), rank1)


def mmc_predict(x_T, centers: MMCCenters):
    x = _as_batch(x_T)
    d = ((x[:, None, :] - centers.centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


class Loss:
    """Terminal loss bound to a label convention; targets are class indices."""

    name = "loss"

    def expansion(self, x_T, labels, rank1=False) -> TerminalExpansion:
        raise NotImplementedError

    def value(self, x_T, labels):
        return self.expansion(x_T, labels, rank1=True).value

    def predict(self, x_T):
        return np.argmax(x_T, axis=1)

    def accuracy(self, x_T, labels) -> float:
        return float(np.mean(self.predict(x_T) == np.asarray(labels)))


class CrossEntropyLoss(Loss):
    name = "ce"

    def expansion(self, x_T, labels, rank1=False):
        return cross_entropy_expansion(x_T, labels, rank1)


class MSELoss(Loss):
    """Squared error against one-hot targets."""

    name = "mse"

    def expansion(self, x_T, labels, rank1=False):
        x = _as_batch(x_T)
        labels = _check_labels(labels, x.shape[0], x.shape[1])
        return mse_expansion(x, np.eye(x.shape[1])[labels], rank1)


class MMCLoss(Loss):
    name = "mmc"

    def __init__(self, centers: MMCCenters):
        self.centers = centers

    def expansion(self, x_T, labels, rank1=False):
        return mmc_expansion(x_T, labels, self.centers, rank1)

    def predict(self, x_T):
        return mmc_predict(x_T, self.centers)


def make_loss(kind: str, num_classes: int, out_dim: int, radius=None) -> Loss:
    if kind == "ce":
        return CrossEntropyLoss()
    if kind == "mse":
        return MSELoss()
    if kind == "mmc":
        return MMCLoss(make_mm_centers(num_classes, out_dim, radius))
    raise ValueError(f"unknown loss {kind!r}")
