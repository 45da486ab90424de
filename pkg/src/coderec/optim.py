"""Adam over named parameter arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    """Plain Adam (beta1=0.9, beta2=0.999, eps=1e-8), constant learning rate.

    Parameters are a dict of named arrays updated in place; moment state is
    keyed the same way so it can be checkpointed alongside the parameters.
    """

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        """Flat view of the moment state for serialization."""
        out = {"_step": np.asarray([self.t], dtype=np.float64)}
        for name, arr in self.m.items():
            out[f"m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"v.{name}"] = arr
        return out

    @classmethod
    def from_state(cls, lr, arrays, beta1=0.9, beta2=0.999, eps=1e-8):
        opt = cls(lr, beta1, beta2, eps)
        opt.t = int(arrays["_step"][0])
        for name, arr in arrays.items():
            if name.startswith("m."):
                opt.m[name[2:]] = arr.copy()
            elif name.startswith("v."):
                opt.v[name[2:]] = arr.copy()
        return opt
