"""Named parameter storage and the Adam update."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Ordered name -> Tensor map plus Adam moment estimates."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {name: t.grad for name, t in self.params.items()}

    def n_values(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self.params.items():
            out.add(name, t.data)
        out.step = self.step
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        return out


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray] | None = None, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One bias-corrected Adam update, in place. Moments are kept in float64."""
    grads = store.grads() if grads is None else grads
    for name, t in store.params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"adam_step: missing gradient for parameter {name!r}")
        if g.shape != t.shape:
            raise ValueError(f"adam_step: gradient for {name!r} has shape {g.shape}, expected {t.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adam_step: non-finite gradient for parameter {name!r}")
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for name, t in store.params.items():
        g = grads[name].astype(np.float64)
        m = store.m.get(name)
        if m is None:
            m = np.zeros(t.shape)
            store.v[name] = np.zeros(t.shape)
        v = store.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.m[name], store.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.data = (t.data.astype(np.float64) - update).astype(t.dtype)
    return store


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
