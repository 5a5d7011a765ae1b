"""SGD-with-momentum and Adam parameter updates."""

from __future__ import annotations

import numpy as np


class SGD:
    """Momentum SGD with decoupled weight decay.

    Decay is applied directly to the parameter (not folded into the momentum
    buffer) and only to tensors of rank >= 2, so biases and norm scales are
    left undecayed.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0, nesterov=False):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self._buf = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, buf in zip(self.params, self._buf):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= np.float32(self.lr * self.weight_decay) * p.data
            buf *= self.momentum
            buf += g
            step = (self.momentum * buf + g) if self.nesterov else buf
            p.data -= np.float32(self.lr) * step

    def state_tensors(self, prefix="sgd"):
        out = {f"{prefix}.t": np.asarray([0.0], np.float32)}
        for i, buf in enumerate(self._buf):
            out[f"{prefix}.buf.{i}"] = buf
        return out

    def load_state_tensors(self, state, prefix="sgd"):
        for i in range(len(self._buf)):
            self._buf[i] = np.ascontiguousarray(state[f"{prefix}.buf.{i}"], np.float32)


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / np.float32(bc1)
            vhat = v / np.float32(bc2)
            p.data -= np.float32(self.lr) * mhat / (np.sqrt(vhat) + np.float32(self.eps))

    def state_tensors(self, prefix="adam"):
        out = {f"{prefix}.t": np.asarray([float(self.t)], np.float32)}
        for i in range(len(self.params)):
            out[f"{prefix}.m.{i}"] = self._m[i]
            out[f"{prefix}.v.{i}"] = self._v[i]
        return out

    def load_state_tensors(self, state, prefix="adam"):
        self.t = int(state[f"{prefix}.t"][0])
        for i in range(len(self.params)):
            self._m[i] = np.ascontiguousarray(state[f"{prefix}.m.{i}"], np.float32)
            self._v[i] = np.ascontiguousarray(state[f"{prefix}.v.{i}"], np.float32)
