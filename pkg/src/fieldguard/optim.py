"""Adam with optional cosine-annealed learning rate, over named parameter
dicts (name -> float64 ndarray, updated in place)."""

import numpy as np


class Adam:
    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 total_steps=None, cosine=True):
        self.params = params
        self.base_lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.total_steps = total_steps
        self.cosine = cosine and total_steps is not None
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def current_lr(self):
        if not self.cosine:
            return self.base_lr
        frac = min(self.t / self.total_steps, 1.0)
        return self.base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    def step(self, grads):
        """Apply one update from a name -> gradient dict."""
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return lr
