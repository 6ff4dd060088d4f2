"""Dense neural-network substrate: matrices, layers, losses, optimizers.

Everything trains in float32 with hand-derived gradients; there is no autodiff
graph. Layers cache their forward inputs so backward can be called right
after. The gradient checker upcasts to float64 so the finite-difference
oracle is not swamped by float32 rounding.
"""

from __future__ import annotations

import math
from enum import IntEnum

import numpy as np

from .errors import LabelError, NumericError, ShapeError, StateError

F32 = np.float32

# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------
# PCG64 is the one generator used across the repo: documented, counter-style
# jumps, identical stream for a given seed on every platform numpy supports.


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, keys). Same tuple, same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


_STAGE_TAGS = {}


def stage_key(tag: str) -> int:
    """Stable integer key for a named pipeline stage, usable with derive_rng."""
    if tag not in _STAGE_TAGS:
        _STAGE_TAGS[tag] = int.from_bytes(tag.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    return _STAGE_TAGS[tag]


# ---------------------------------------------------------------------------
# Matrix helpers
# ---------------------------------------------------------------------------
# A "matrix" is a dense 2-D array, float32 in production paths. Ops preserve
# the input dtype so the gradient checker can push float64 through the same
# code.


def as_matrix(data, dtype=F32) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def one_hot(labels: np.ndarray, num_classes: int, dtype=F32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------


class Activation(IntEnum):
    IDENTITY = 0
    RELU = 1


class DenseLayer:
    """Fully connected layer: out = act(x @ W.T + b).

    weight is [out_dim x in_dim], bias is [out_dim]. forward caches its input
    and pre-activation for the following backward call.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: Activation):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
            raise ShapeError(
                f"inconsistent layer shapes: weight {weight.shape}, bias {bias.shape}"
            )
        self.weight = weight
        self.bias = bias
        self.activation = Activation(activation)
        self._x = None
        self._pre = None

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int, out_dim: int,
               activation: Activation) -> "DenseLayer":
        # Kaiming-uniform (fan-in) for ReLU, Xavier-uniform for identity output
        # layers; biases start at zero.
        if activation == Activation.RELU:
            limit = math.sqrt(6.0 / in_dim)
        else:
            limit = math.sqrt(6.0 / (in_dim + out_dim))
        weight = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(F32)
        bias = np.zeros(out_dim, dtype=F32)
        return cls(weight, bias, activation)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"layer expects [batch x {self.in_dim}], got {x.shape}")
        pre = x @ self.weight.T + self.bias
        self._x = x
        self._pre = pre
        if self.activation == Activation.RELU:
            return np.maximum(pre, 0)
        return pre

    def backward(self, grad_out: np.ndarray):
        """Gradients of the cached forward. Returns (grad_in, grad_w, grad_b)."""
        if self._x is None:
            raise StateError("backward called before forward")
        if grad_out.shape != (self._x.shape[0], self.out_dim):
            raise ShapeError(
                f"grad_out shape {grad_out.shape} does not match cached forward "
                f"({self._x.shape[0]}, {self.out_dim})"
            )
        if self.activation == Activation.RELU:
            # subgradient at 0 is 0
            grad_out = grad_out * (self._pre > 0)
        grad_w = grad_out.T @ self._x
        grad_b = grad_out.sum(axis=0)
        grad_in = grad_out @ self.weight
        return grad_in, grad_w, grad_b


def stack_forward(layers: list[DenseLayer], x: np.ndarray) -> np.ndarray:
    for layer in layers:
        x = layer.forward(x)
    return x


def stack_backward(layers: list[DenseLayer], grad_out: np.ndarray):
    """Backprop through a layer stack. Returns (grad_in, [(grad_w, grad_b), ...])."""
    per_layer = [None] * len(layers)
    grad = grad_out
    for i in reversed(range(len(layers))):
        grad, gw, gb = layers[i].backward(grad)
        per_layer[i] = (gw, gb)
    return grad, per_layer


def stack_params(layers: list[DenseLayer], prefix: str = "layer") -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(layers):
        out[f"{prefix}{i}.w"] = layer.weight
        out[f"{prefix}{i}.b"] = layer.bias
    return out


def set_stack_params(layers: list[DenseLayer], params: dict[str, np.ndarray],
                     prefix: str = "layer") -> None:
    for i, layer in enumerate(layers):
        layer.weight = params[f"{prefix}{i}.w"]
        layer.bias = params[f"{prefix}{i}.b"]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Sum over dimensions, mean over batch. Returns (loss, grad_pred)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    batch = pred.shape[0]
    loss = float(np.sum(diff * diff) / batch)
    grad = (2.0 / batch) * diff
    return loss, grad


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-softmax of the true class. Returns (loss, grad_logits)."""
    labels = np.asarray(labels)
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(batch), labels]))
    grad = softmax(logits)
    grad[np.arange(batch), labels] -= 1
    grad /= batch
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class LrSchedule:
    """Step decay: lr(epoch) = base * gamma^(epoch // step_epochs).

    step_epochs == 0 disables the decay.
    """

    def __init__(self, base_lr: float, step_epochs: int = 0, gamma: float = 1.0):
        if base_lr <= 0:
            raise ValueError("learning rate must be strictly positive")
        self.base_lr = float(base_lr)
        self.step_epochs = int(step_epochs)
        self.gamma = float(gamma)

    def lr_at(self, epoch: int) -> float:
        if self.step_epochs <= 0:
            return self.base_lr
        return self.base_lr * self.gamma ** (epoch // self.step_epochs)


class _Optimizer:
    def __init__(self, schedule: LrSchedule):
        self.schedule = schedule
        self._last_epoch = -1

    def _check(self, params, grads, epoch):
        if epoch < self._last_epoch:
            raise StateError(f"epoch went backwards: {epoch} < {self._last_epoch}")
        self._last_epoch = epoch
        for name, grad in grads.items():
            if params[name].shape != grad.shape:
                raise ShapeError(
                    f"gradient shape {grad.shape} does not match parameter "
                    f"'{name}' {params[name].shape}"
                )
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             epoch: int) -> None:
        raise NotImplementedError


class SgdMomentum(_Optimizer):
    def __init__(self, schedule: LrSchedule, momentum: float = 0.9):
        super().__init__(schedule)
        self.momentum = float(momentum)
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, epoch):
        self._check(params, grads, epoch)
        lr = self.schedule.lr_at(epoch)
        for name, grad in grads.items():
            vel = self._velocity.get(name)
            if vel is None:
                vel = np.zeros_like(params[name])
                self._velocity[name] = vel
            vel *= self.momentum
            vel += grad
            params[name] -= (lr * vel).astype(params[name].dtype, copy=False)


class Adam(_Optimizer):
    def __init__(self, schedule: LrSchedule, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(schedule)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params, grads, epoch):
        self._check(params, grads, epoch)
        lr = self.schedule.lr_at(epoch)
        self._t += 1
        b1c = 1.0 - self.beta1 ** self._t
        b2c = 1.0 - self.beta2 ** self._t
        for name, grad in grads.items():
            if name not in self._m:
                self._m[name] = np.zeros_like(params[name])
                self._v[name] = np.zeros_like(params[name])
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            params[name] -= update.astype(params[name].dtype, copy=False)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradcheck(loss_fn, params: dict[str, np.ndarray], h: float = 1e-3,
              max_entries: int = 64, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    loss_fn(params) must return (loss, grads) for float64 parameter dicts; the
    float32 inputs are upcast here so finite-difference noise stays far below
    the tolerances being checked. Parameters larger than max_entries are
    spot-checked on a seeded sample of coordinates.
    """
    params64 = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    _, analytic = loss_fn(params64)
    rng = make_rng(seed)
    worst = 0.0
    for name, base in params64.items():
        flat = base.reshape(-1)
        n = flat.size
        if n <= max_entries:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_entries, replace=False)
        grad_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_fn(params64)
            flat[i] = orig - h
            down, _ = loss_fn(params64)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = grad_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
