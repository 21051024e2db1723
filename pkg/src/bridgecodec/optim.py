"""AdamW with decoupled weight decay and a per-epoch multiplicative lr decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor


class AdamW:
    """Standard AdamW. Moments are float32; update order is fixed for determinism."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.names = list(params.keys())
        self.params = [params[n] for n in self.names]
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, tape: Tape):
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        lr = np.float32(self.lr)
        wd = np.float32(self.weight_decay)
        bc1 = np.float32(1.0 - self.beta1 ** self.t)
        bc2 = np.float32(1.0 - self.beta2 ** self.t)
        eps = np.float32(self.eps)
        for p, m, v in zip(self.params, self.m, self.v):
            g = tape.grad(p)
            if g is None:
                g = np.zeros_like(p.data)
            g = g.astype(np.float32, copy=False)
            m *= b1
            m += (np.float32(1.0) - b1) * g
            v *= b2
            v += (np.float32(1.0) - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - lr * wd * p.data - lr * mhat / (np.sqrt(vhat) + eps)

    def state_blobs(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = v
        return out

    def load_state_blobs(self, blobs: dict[str, np.ndarray], t: int):
        self.t = int(t)
        for i, name in enumerate(self.names):
            self.m[i] = np.ascontiguousarray(blobs[f"opt.m.{name}"], dtype=np.float32)
            self.v[i] = np.ascontiguousarray(blobs[f"opt.v.{name}"], dtype=np.float32)


class LrSchedule:
    """lr(epoch) = lr0 * decay_per_epoch ** epoch."""

    def __init__(self, lr0: float, decay_per_epoch: float):
        self.lr0 = float(lr0)
        self.decay_per_epoch = float(decay_per_epoch)

    def at_epoch(self, epoch: int) -> float:
        return self.lr0 * self.decay_per_epoch ** epoch
