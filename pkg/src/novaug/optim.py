"""AdamW with decoupled weight decay, operating on float64 leaf tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class OptimizerFault(RuntimeError):
    """A gradient was non-finite; the step was refused."""


class AdamW:
    """Decoupled-weight-decay Adam.

    The decay term multiplies the parameter directly (p -= lr * wd * p) and is
    never folded into the gradient, so a zero-gradient step with decay > 0
    shrinks the parameter by exactly (1 - lr * wd).
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params: list[Tensor] = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("optimizer received a tensor with requires_grad=False")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = []
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise OptimizerFault(
                    f"non-finite gradient on parameter {i} (shape {p.data.shape})"
                )
            grads.append(g)

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        return {
            "t": self.t,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state):
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]
