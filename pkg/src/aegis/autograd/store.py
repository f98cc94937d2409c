"""Named parameter registry with auxiliary gradient slots."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterable, Iterator, Optional, Tuple

import numpy as np

from .tensor import Tensor

SLOTS = ("task", "ot")


class ParameterStore:
    """Ordered ``name -> Tensor`` map plus ``task``/``ot`` gradient slots.

    Iteration order is insertion order.  Slots hold plain arrays with the
    parameter's shape and are never touched by :meth:`zero_grads`.
    """

    def __init__(self, params: Optional[Iterable[Tuple[str, Tensor]]] = None):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._slots: Dict[str, Dict[str, np.ndarray]] = {s: {} for s in SLOTS}
        for name, p in params or ():
            self.add(name, p)

    def add(self, name: str, p: Tensor) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p.name = name
        self._params[name] = p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def trainable(self, prefix: str = "") -> list:
        return [n for n, p in self._params.items() if p.requires_grad and n.startswith(prefix)]

    def numel(self, names: Optional[Iterable[str]] = None) -> int:
        names = self._params if names is None else names
        return int(sum(self._params[n].size for n in names))

    # -- gradient buffers -----------------------------------------------------
    def grad(self, name: str) -> np.ndarray:
        """Gradient buffer of ``name`` (zeros when no backward reached it)."""
        p = self._params[name]
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        return p.grad

    def zero_grads(self, names: Optional[Iterable[str]] = None) -> None:
        for n in self._params if names is None else names:
            p = self._params[n]
            if p.grad is not None:
                p.grad[...] = 0.0

    def clone_grads_to(self, slot: str, names: Optional[Iterable[str]] = None,
                       accumulate: bool = False) -> None:
        """Copy grad buffers into ``slot`` (or add them, for micro-batch accumulation)."""
        store = self._slot(slot)
        for n in self.trainable() if names is None else names:
            g = self.grad(n)
            if accumulate and n in store:
                store[n] += g
            else:
                store[n] = g.copy()

    def slot(self, slot: str, name: str) -> np.ndarray:
        return self._slot(slot)[name]

    def has_slot(self, slot: str, name: str) -> bool:
        return name in self._slot(slot)

    def clear_slots(self) -> None:
        for s in self._slots.values():
            s.clear()

    def _slot(self, slot: str) -> Dict[str, np.ndarray]:
        try:
            return self._slots[slot]
        except KeyError:
            raise KeyError(f"unknown gradient slot {slot!r}; expected one of {SLOTS}") from None

    # -- state ----------------------------------------------------------------
    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self._params.items())

    def load_state(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self._params if n not in state]
        if strict and missing:
            raise KeyError(f"missing parameters in state: {missing[:5]}")
        for n, arr in state.items():
            if n not in self._params:
                if strict:
                    raise KeyError(f"unexpected parameter {n!r}")
                continue
            p = self._params[n]
            if p.shape != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {n}: {p.shape} vs {tuple(arr.shape)}")
            p.data[...] = arr
