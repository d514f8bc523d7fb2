"""Adam as a pure function over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str, what: str = "gradient"):
        super().__init__(f"non-finite {what} in {name!r}; aborting")
        self.name = name


@dataclass
class AdamState:
    step: dict[str, int] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState | None,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are not modified.

    Every parameter keeps its own step counter, so updating groups separately
    or in a different order gives the same result. A missing gradient counts
    as zero.
    """
    b1, b2 = betas
    state = state or AdamState()
    new = AdamState(dict(state.step), dict(state.m), dict(state.v))
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
        t = new.step.get(name, 0) + 1
        m = b1 * new.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * new.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(out[name])):
            raise NonFiniteGradient(name, "update")
        new.step[name], new.m[name], new.v[name] = t, m, v
    return out, new


class Adam:
    """Stateful wrapper that applies :func:`adam_step` to a model's Tensors."""

    def __init__(self, params: dict, lr: float = 1e-3):
        self.params = params
        self.lr = lr
        self.state: AdamState | None = None

    def step(self):
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        updated, self.state = adam_step(arrays, grads, self.state, self.lr)
        for k, p in self.params.items():
            p.data = updated[k]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
