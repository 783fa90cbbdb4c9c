"""Adam with decoupled weight decay, over named numpy parameter dicts."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


class AdamW:
    """Updates parameters in place from a dict of gradients.

    `lr_multipliers` rescales the step for individual parameters; weight
    decay is decoupled and scaled by the same factor.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        lr_multipliers: dict[str, float] | None = None,
    ):
        if lr <= 0:
            raise InvalidInputError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_multipliers = dict(lr_multipliers or {})
        self.t = 0
        self._m = {k: np.zeros_like(p) for k, p in params.items()}
        self._v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.params:
                raise InvalidInputError(f"gradient for unknown parameter {name!r}")
            p = self.params[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = self.lr * self.lr_multipliers.get(name, 1.0)
            p -= lr * ((m / b1t) / (np.sqrt(v / b2t) + self.eps))
            if self.weight_decay:
                p -= lr * self.weight_decay * p
