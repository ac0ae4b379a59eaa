"""Dense float64 parameters, activations, SGD with momentum and gradient checking.

Every trainable tensor is a 2-D ``float64`` array (vectors are stored as a
single row). Models read and write the arrays held by a :class:`ParamStore`
in place.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""


def sigmoid(x):
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def activation(x, kind: str):
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def as_tensor2(a) -> np.ndarray:
    """Return ``a`` as a C-contiguous 2-D float64 array, rejecting non-finite values."""
    arr = np.array(a, dtype=np.float64, order="C")
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    velocity: np.ndarray


class ParamStore:
    """Ordered mapping of parameter name to value, gradient and momentum buffers."""

    def __init__(self):
        self._entries: Dict[str, Param] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        v = as_tensor2(value)
        self._entries[name] = Param(v, np.zeros_like(v), np.zeros_like(v))
        return v

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def velocity(self, name: str) -> np.ndarray:
        return self._entries[name].velocity

    def entry(self, name: str) -> Param:
        return self._entries[name]

    def set_value(self, name: str, value) -> None:
        """Overwrite a value in place so views held by models stay valid."""
        v = np.asarray(value, dtype=np.float64)
        p = self._entries[name]
        if v.shape != p.value.shape:
            if v.size != p.value.size:
                raise ShapeError(f"{name}: shape {v.shape} does not match {p.value.shape}")
            v = v.reshape(p.value.shape)
        p.value[...] = v

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0.0

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._entries.items()}

    def load_state_dict(self, tensors: Dict[str, np.ndarray]) -> None:
        missing = set(self._entries) - set(tensors)
        extra = set(tensors) - set(self._entries)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in tensors.items():
            if np.shape(v) != self._entries[k].value.shape:
                raise ShapeError(f"{k}: shape {np.shape(v)} != {self._entries[k].value.shape}")
            self._entries[k].value[...] = v

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, p in self._entries.items():
            out._entries[k] = Param(p.value.copy(), p.grad.copy(), p.velocity.copy())
        return out


@dataclass
class OptimConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_momentum_step(store: ParamStore, cfg: OptimConfig) -> ParamStore:
    """One SGD step with classical momentum and coupled L2 decay; zeroes grads.

    v <- momentum * v - lr * (g + wd * w);  w <- w + v
    """
    for name in store:
        p = store.entry(name)
        if p.grad.shape != p.value.shape or p.velocity.shape != p.value.shape:
            raise ShapeError(f"{name}: value/grad/velocity shapes differ")
        g = p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.value
        p.velocity *= cfg.momentum
        p.velocity -= cfg.learning_rate * g
        p.value += p.velocity
        p.grad[...] = 0.0
    return store


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def grad_check(
    loss_fn: Callable[[ParamStore], float],
    store: ParamStore,
    eps: float = 1e-5,
    max_coords_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    value_fn: Optional[Callable[[ParamStore], float]] = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn(store)`` must return the scalar loss and leave the analytic
    gradient in ``store`` (it is responsible for zeroing grads first).
    Returns the largest relative error
    ``|a - n| / max(1e-8, |a| + |n|)`` over the checked coordinates. With
    ``max_coords_per_param`` set, that many coordinates per tensor are drawn
    from ``rng``; otherwise every coordinate is checked. ``value_fn``, if
    given, computes the same loss without gradients for the perturbed
    evaluations.
    """
    base = loss_fn(store)
    if not np.isfinite(base):
        raise FloatingPointError("loss is not finite at the evaluation point")
    analytic = {k: store.grad(k).copy() for k in store}
    f = value_fn or loss_fn
    worst = 0.0
    for name in store:
        w = store.value(name)
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = f(store)
            flat[i] = old - eps
            fm = f(store)
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"loss is not finite near {name}[{i}]")
            num = (fp - fm) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    # leave the analytic gradient in place for the caller
    loss_fn(store)
    return worst
