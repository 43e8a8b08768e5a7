"""Gradient-descent optimizers over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(RuntimeError):
    """A parameter received a NaN/inf gradient; the step was not applied."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter {param_name!r}")
        self.param_name = param_name


class Adam:
    """Bias-corrected adaptive-moment update.

    Parameters with ``requires_grad`` False are skipped entirely: their
    moment accumulators are never created or advanced, so freezing and later
    unfreezing a group behaves like a fresh optimizer for that group.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        # Validate before mutating anything so a bad gradient leaves every
        # parameter untouched.
        live = []
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(name)
            live.append((name, p))
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in live:
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
            p._grad_owned = False


class SGD:
    """Plain gradient descent, kept for ablations."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3):
        self.params = params
        self.lr = lr
        self.step_count = 0

    def step(self) -> None:
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(name)
        self.step_count += 1
        for p in self.params.values():
            if p.requires_grad and p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
            p._grad_owned = False
