"""AdamW with decoupled weight decay over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class AdamWState:
    """Per-parameter moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState(
            m={n: np.zeros_like(p.data) for n, p in self.params.items()},
            v={n: np.zeros_like(p.data) for n, p in self.params.items()},
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        """Bias-corrected AdamW update; parameters without grads are skipped
        by the moving averages only in the sense that their gradient is zero."""
        st = self.state
        st.step += 1
        bc1 = 1.0 - self.beta1 ** st.step
        bc2 = 1.0 - self.beta2 ** st.step
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"adamw: grad shape {g.shape} does not match param "
                    f"{name} shape {p.data.shape}"
                )
            m = st.m[name]
            v = st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update
