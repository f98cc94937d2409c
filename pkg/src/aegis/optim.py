"""AdamW, warmup schedule, global-norm clipping and parameter EMA."""
from __future__ import annotations

import math
from typing import Dict, Iterable, List

import numpy as np

from .autograd import ParameterStore


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups.

    ``groups`` maps a group name to ``(param_names, lr)``; the scheduled lr is
    ``lr * lr_scale`` with ``lr_scale`` supplied per step.
    """

    def __init__(self, store: ParameterStore, groups: Dict[str, tuple], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.groups = {g: (list(names), float(lr)) for g, (names, lr) in groups.items()}
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        # moments live in one flat buffer per group; a parameter's moments stay
        # zero until it first receives a gradient
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self._layout: Dict[str, Dict[str, slice]] = {}
        for g, (names, _) in self.groups.items():
            off, lay = 0, {}
            for n in names:
                size = store[n].size
                lay[n] = slice(off, off + size)
                off += size
            self._layout[g] = lay
            dtype = store[names[0]].data.dtype if names else np.float64
            self.m[g] = np.zeros(off, dtype=dtype)
            self.v[g] = np.zeros(off, dtype=dtype)
        self._seen = {g: set() for g in self.groups}
        self._buf: Dict[str, tuple] = {}

    def moments(self, name: str):
        """(m, v) views of one parameter."""
        for g, lay in self._layout.items():
            if name in lay:
                sl = lay[name]
                shape = self.store[name].shape
                return self.m[g][sl].reshape(shape), self.v[g][sl].reshape(shape)
        raise KeyError(name)

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for g, (names, lr) in self.groups.items():
            step_lr = lr * lr_scale
            lay = self._layout[g]
            live = [n for n in names if self.store[n].grad is not None]
            if not live:
                continue
            self._seen[g].update(live)
            if len(self._seen[g]) == len(live):
                # parameters that never had a gradient keep zero moments, so a
                # zero-gradient update over the whole buffer leaves them unchanged
                self._step_full(g, live, step_lr, bc1, bc2)
            else:
                self._step_subset(g, live, step_lr, bc1, bc2)

    def _apply(self, live, lay, upd, step_lr, offsets=None) -> None:
        off = 0
        for n in live:
            p = self.store[n]
            sl = lay[n] if offsets is None else slice(off, off + p.size)
            if self.weight_decay:
                p.data *= 1.0 - step_lr * self.weight_decay
            p.data -= upd[sl].reshape(p.shape)
            off += p.size

    def _step_full(self, g, live, step_lr, bc1, bc2) -> None:
        lay = self._layout[g]
        m, v = self.m[g], self.v[g]
        if g not in self._buf:
            self._buf[g] = (np.zeros_like(m), np.empty_like(m))
        grad, tmp = self._buf[g]
        for n in live:
            grad[lay[n]] = self.store[n].grad.reshape(-1)
        m *= self.b1
        np.multiply(grad, 1.0 - self.b1, out=tmp)
        m += tmp
        v *= self.b2
        np.multiply(grad, grad, out=tmp)
        tmp *= 1.0 - self.b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / math.sqrt(bc2)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_lr / bc1
        self._apply(live, lay, tmp, step_lr)

    def _step_subset(self, g, live, step_lr, bc1, bc2) -> None:
        lay = self._layout[g]
        m, v = self.m[g], self.v[g]
        grad = np.concatenate([self.store[n].grad.reshape(-1) for n in live])
        idx = np.concatenate([np.arange(lay[n].start, lay[n].stop) for n in live])
        mg = m[idx] * self.b1
        mg += (1.0 - self.b1) * grad
        vg = v[idx] * self.b2
        grad *= grad
        vg += (1.0 - self.b2) * grad
        m[idx] = mg
        v[idx] = vg
        denom = np.sqrt(vg)
        denom *= 1.0 / math.sqrt(bc2)
        denom += self.eps
        upd = np.divide(mg, denom, out=denom)
        upd *= step_lr / bc1
        self._apply(live, lay, upd, step_lr, offsets=True)


def warmup_scale(step: int, warmup: int) -> float:
    """Linear warmup to 1 over ``warmup`` steps (step counts from 1), then constant."""
    if warmup <= 0:
        return 1.0
    return min(1.0, step / warmup)


def grad_norm(store: ParameterStore, names: Iterable[str]) -> float:
    total = 0.0
    for n in names:
        g = store[n].grad
        if g is not None:
            total += float(np.vdot(g, g))
    return math.sqrt(total)


def clip_grad_norm(store: ParameterStore, names: List[str], max_norm: float) -> float:
    """Scale grads of ``names`` so their joint norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = grad_norm(store, names)
    if max_norm > 0 and norm > max_norm:
        coef = max_norm / (norm + 1e-6)
        for n in names:
            g = store[n].grad
            if g is not None:
                g *= coef
    return norm


class EMA:
    def __init__(self, store: ParameterStore, names: Iterable[str], decay: float):
        self.decay = decay
        self.names = list(names)
        self.shadow = {n: store[n].data.copy() for n in self.names}

    def update(self, store: ParameterStore) -> None:
        d = self.decay
        for n in self.names:
            s = self.shadow[n]
            s *= d
            s += (1.0 - d) * store[n].data
