"""Training steps: DDPNOpt and the first-order baselines, plus the training loop.

The baselines take their gradients from the feedback-free backward sweep
(``feedback_scale = 0``), which is ordinary back-propagation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .data import Dataset, batches, rng_for
from .ddp_core import DDPOptions, backward_pass, forward_pass
from .errors import NumericalError
from .factorized import factored_backward_pass
from .losses import Loss
from .network import NetworkSpec, simulate
from .preconditioners import Identity, make_preconditioner

MAX_HALVINGS = 8


@dataclass(frozen=True)
class DDPNOptMethod:
    precond: str = "identity"
    eta: float = 0.1
    beta: Optional[float] = None
    eps: float = 1e-8
    damping: float = 1e-2
    options: DDPOptions = DDPOptions()
    factored: bool = False
    rank1_terminal: bool = False
    line_search: bool = False


@dataclass(frozen=True)
class SGDMethod:
    eta: float = 0.1
    momentum: float = 0.9


@dataclass(frozen=True)
class RMSpropMethod:
    eta: float = 1e-3
    beta: float = 0.99
    eps: float = 1e-8


@dataclass(frozen=True)
class AdamMethod:
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


Method = Union[DDPNOptMethod, SGDMethod, RMSpropMethod, AdamMethod]


@dataclass(frozen=True)
class OptimizerConfig:
    method: Method
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        m = self.method
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if m.eta < 0:
            raise ValueError("learning rate must be >= 0")
        if isinstance(m, SGDMethod) and not 0 <= m.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if isinstance(m, RMSpropMethod) and not 0 <= m.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if isinstance(m, AdamMethod) and not (0 <= m.beta1 < 1 and 0 <= m.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if isinstance(m, DDPNOptMethod) and m.factored and m.options.tikhonov_lambda > 0:
            raise ValueError("factored mode omits Tikhonov regularisation; set tikhonov_lambda = 0")
        if isinstance(m, DDPNOptMethod) and m.factored and m.options.second_order_dynamics:
            raise ValueError("factored mode supports first-order dynamics only")


@dataclass
class StepMetrics:
    loss_before: float
    loss_after: float
    accuracy: float
    k_norms: list
    feedback_norms: list
    du_norms: list
    grad_norms: list
    step_scale: float = 1.0
    aborted: bool = False


def _objective(loss_values, weights, c):
    j = float(np.mean(loss_values))
    if c:
        j += sum(0.5 * c * float(u @ u) for u in weights)
    return j


class DDPNOpt:
    def __init__(self, net: NetworkSpec, method: DDPNOptMethod, weight_decay: float = 0.0):
        self.net = net
        self.method = method
        self.options = replace(method.options, weight_decay=weight_decay)
        self.preconds = [
            make_preconditioner(method.precond, method.eta, method.beta, method.eps, method.damping)
            for _ in net.layers
        ]
        self.last_policies = None
        self.steps = 0

    def step(self, weights, inputs, labels, loss: Loss):
        net, m, opts = self.net, self.method, self.options
        traj = simulate(net, weights, inputs)
        rank1 = m.factored or m.rank1_terminal
        term = loss.expansion(traj.xs[-1], labels, rank1=rank1)
        try:
            if m.factored:
                back = factored_backward_pass(net, weights, traj, term, self.preconds, opts)
            else:
                back = backward_pass(net, weights, traj, term, self.preconds, opts)
        except NumericalError as exc:
            raise exc.located(step=self.steps) from None
        self.preconds = back.preconds
        self.last_policies = back.policies
        self.steps += 1

        loss_before = float(np.mean(term.value))
        acc = loss.accuracy(traj.xs[-1], labels)
        fwd = forward_pass(net, weights, traj, back.policies, inputs)
        scale, aborted = 1.0, False
        if m.line_search:
            c = opts.weight_decay
            j0 = _objective(term.value, weights, c)
            halvings = 0
            while _objective(loss.value(fwd.trajectory.xs[-1], labels), fwd.weights, c) > j0:
                if halvings == MAX_HALVINGS:
                    aborted = True
                    break
                halvings += 1
                scale *= 0.5
                fwd = forward_pass(net, weights, traj, back.policies, inputs, open_scale=scale)
        if aborted:
            metrics = StepMetrics(loss_before, loss_before, acc, [0.0] * len(net), [0.0] * len(net),
                                  [0.0] * len(net), back.grad_norms, scale, True)
            return [w.copy() for w in weights], metrics
        for t, u in enumerate(fwd.weights):
            if not np.all(np.isfinite(u)):
                raise NumericalError("non-finite weights after the forward pass", layer=t, step=self.steps)
        loss_after = float(np.mean(loss.value(fwd.trajectory.xs[-1], labels)))
        metrics = StepMetrics(loss_before, loss_after, acc, fwd.k_norms, fwd.feedback_norms,
                              fwd.du_norms, back.grad_norms, scale, False)
        return fwd.weights, metrics


class _FirstOrder:
    def __init__(self, net: NetworkSpec, method, weight_decay: float = 0.0):
        self.net = net
        self.method = method
        self.weight_decay = weight_decay
        self._opts = DDPOptions(feedback_scale=0.0, tikhonov_lambda=0.0, weight_decay=weight_decay)
        self._pre = [Identity(1.0) for _ in net.layers]
        self.steps = 0
        self.last_policies = None

    def gradients(self, weights, inputs, labels, loss: Loss):
        traj = simulate(self.net, weights, inputs)
        term = loss.expansion(traj.xs[-1], labels, rank1=True)
        back = backward_pass(self.net, weights, traj, term, self._pre, self._opts)
        return traj, term, back

    def update(self, t, u, g):
        """Step vector added to ``u``."""
        raise NotImplementedError

    def step(self, weights, inputs, labels, loss: Loss):
        traj, term, back = self.gradients(weights, inputs, labels, loss)
        self.steps += 1
        steps = [self.update(t, weights[t], back.grads[t]) for t in range(len(weights))]
        new = [w + d for w, d in zip(weights, steps)]
        du = [float(np.linalg.norm(d)) for d in steps]
        for t, u in enumerate(new):
            if not np.all(np.isfinite(u)):
                raise NumericalError("non-finite weights", layer=t, step=self.steps)
        after = simulate(self.net, new, inputs)
        metrics = StepMetrics(float(np.mean(term.value)), float(np.mean(loss.value(after.xs[-1], labels))),
                              loss.accuracy(traj.xs[-1], labels), du, [0.0] * len(new), du,
                              back.grad_norms)
        return new, metrics


class SGD(_FirstOrder):
    def __init__(self, net, method: SGDMethod, weight_decay=0.0):
        super().__init__(net, method, weight_decay)
        self.buf = [None] * len(net)

    def update(self, t, u, g):
        mu = self.method.momentum
        if mu == 0 or self.buf[t] is None:
            b = g
        else:
            b = mu * self.buf[t] + g
        self.buf[t] = b
        return -(self.method.eta * b)


class RMSprop(_FirstOrder):
    def __init__(self, net, method: RMSpropMethod, weight_decay=0.0):
        super().__init__(net, method, weight_decay)
        self.v = [None] * len(net)

    def update(self, t, u, g):
        m = self.method
        v = np.zeros_like(g) if self.v[t] is None else self.v[t]
        v = m.beta * v + (1 - m.beta) * (g * g)
        self.v[t] = v
        return -(m.eta * g / (np.sqrt(v) + m.eps))


class Adam(_FirstOrder):
    def __init__(self, net, method: AdamMethod, weight_decay=0.0):
        super().__init__(net, method, weight_decay)
        self.m = [None] * len(net)
        self.v = [None] * len(net)
        self.t = [0] * len(net)

    def update(self, t, u, g):
        a = self.method
        m = np.zeros_like(g) if self.m[t] is None else self.m[t]
        v = np.zeros_like(g) if self.v[t] is None else self.v[t]
        self.t[t] += 1
        n = self.t[t]
        m = a.beta1 * m + (1 - a.beta1) * g
        v = a.beta2 * v + (1 - a.beta2) * (g * g)
        self.m[t], self.v[t] = m, v
        mhat = m / (1 - a.beta1 ** n)
        vhat = v / (1 - a.beta2 ** n)
        return -(a.eta * mhat / (np.sqrt(vhat) + a.eps))


def make_optimizer(net: NetworkSpec, config: OptimizerConfig):
    m = config.method
    cls = {DDPNOptMethod: DDPNOpt, SGDMethod: SGD, RMSpropMethod: RMSprop, AdamMethod: Adam}[type(m)]
    return cls(net, m, config.weight_decay)


def _check_net(state, net):
    if state.net != net:
        raise ValueError("optimizer state was built for a different network")


def ddpnopt_step(state: DDPNOpt, net: NetworkSpec, weights, batch, loss):
    _check_net(state, net)
    inputs, labels = batch
    return state.step(weights, inputs, labels, loss)


def sgd_step(state: SGD, net: NetworkSpec, weights, batch, loss):
    _check_net(state, net)
    inputs, labels = batch
    return state.step(weights, inputs, labels, loss)


def rmsprop_step(state: RMSprop, net: NetworkSpec, weights, batch, loss):
    _check_net(state, net)
    inputs, labels = batch
    return state.step(weights, inputs, labels, loss)


def adam_step(state: Adam, net: NetworkSpec, weights, batch, loss):
    _check_net(state, net)
    inputs, labels = batch
    return state.step(weights, inputs, labels, loss)


def init_weights(net: NetworkSpec, seed: int, scheme: str = "uniform_fan_in"):
    """Uniform ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` or ``N(0, 0.01^2)`` weights, zero biases."""
    rng = rng_for(seed, 104729)
    weights = []
    for layer in net.layers:
        T = layer.transform
        shape = (T.out_channels, T.fan_in)
        if scheme == "uniform_fan_in":
            bound = 1.0 / np.sqrt(T.fan_in)
            W = rng.uniform(-bound, bound, size=shape)
        elif scheme == "small_normal":
            W = 0.01 * rng.standard_normal(shape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        weights.append(T.vec(W, np.zeros(T.out_channels)))
    return weights


@dataclass
class IterationRecord:
    epoch: int
    iteration: int
    metrics: StepMetrics
    eval_loss: float
    eval_acc: float


@dataclass
class RunRecord:
    seed: int
    iterations: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    initial_eval_loss: float = float("nan")
    eval_acc: float = float("nan")
    eval_loss: float = float("nan")


def evaluate(net: NetworkSpec, weights, ds: Dataset, loss: Loss):
    x = simulate(net, weights, ds.inputs).xs[-1]
    return float(np.mean(loss.value(x, ds.labels))), loss.accuracy(x, ds.labels)


def train(net: NetworkSpec, dataset: Dataset, config: OptimizerConfig, epochs: int, batch_size: int,
          seed: int, loss: Loss, max_iterations: Optional[int] = None, eval_dataset: Dataset = None,
          init_scheme: str = "uniform_fan_in", weights=None,
          callback: Callable = None) -> RunRecord:
    """Seeded training run.  Stops after ``epochs`` epochs or ``max_iterations`` steps.

    ``callback(iteration, optimizer, weights_before, metrics)`` is called after
    every step (iterations are counted from 1).
    """
    weights = init_weights(net, seed, init_scheme) if weights is None else [w.copy() for w in weights]
    opt = make_optimizer(net, config)
    ev = dataset if eval_dataset is None else eval_dataset
    rec = RunRecord(seed)
    rec.initial_eval_loss, acc = evaluate(net, weights, ev, loss)
    rec.eval_loss, rec.eval_acc = rec.initial_eval_loss, acc
    it = 0
    epoch = 0
    done = max_iterations is not None and max_iterations <= 0
    while not done and epoch < epochs:
        for idx in batches(len(dataset), batch_size, seed, epoch):
            new, metrics = opt.step(weights, dataset.inputs[idx], dataset.labels[idx], loss)
            it += 1
            if callback is not None:
                callback(it, opt, weights, metrics)
            weights = new
            el, ea = evaluate(net, weights, ev, loss)
            rec.iterations.append(IterationRecord(epoch, it, metrics, el, ea))
            if max_iterations is not None and it >= max_iterations:
                done = True
                break
        epoch += 1
    rec.weights = weights
    rec.eval_loss, rec.eval_acc = evaluate(net, weights, ev, loss)
    return rec
