"""Diagonal-Gaussian Wasserstein-2 (Bures) penalty against the static anchor."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .anchor import AnchorStatistics
from .autograd import Tensor, ops
from .models import EmptyValidSetError


@dataclass(frozen=True)
class TransportConfig:
    eps: float = 1e-6
    normalization: str = "mean"
    scale: float = 1.0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.normalization not in ("mean", "sum"):
            raise ValueError("normalization must be 'mean' or 'sum'")


def current_stats(H: Tensor, M: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Graph-connected masked mean / population variance over (B, S)."""
    M = np.asarray(M, dtype=np.float64)
    if H.shape[:2] != M.shape:
        raise ValueError(f"current_stats: shape mismatch {H.shape} vs mask {M.shape}")
    C = M.sum()
    if C <= 0:
        raise EmptyValidSetError("empty valid set")
    Me = M[..., None]
    mu = ops.sum(H * Me, axis=(0, 1)) / C
    diff = H - mu
    var = ops.sum(diff * diff * Me, axis=(0, 1)) / C
    return mu, var


def w2_bures(mu_t, var_t, mu0, var0, cfg: TransportConfig = TransportConfig()) -> Tensor:
    """Squared W2 between diagonal Gaussians: mean shift + std mismatch."""
    shift = ops.sub(mu_t, mu0)
    std_gap = ops.sub(ops.sqrt(ops.add(var_t, cfg.eps)), ops.sqrt(ops.add(var0, cfg.eps)))
    sq = shift * shift
    sg = std_gap * std_gap
    if cfg.normalization == "mean":
        return ops.mean(sq) + ops.mean(sg)
    return ops.sum(sq) + ops.sum(sg)


def w2_bures_np(mu_t, var_t, mu0, var0, cfg: TransportConfig = TransportConfig()) -> float:
    """Plain-numpy evaluation of :func:`w2_bures`."""
    mu_t, var_t, mu0, var0 = (np.asarray(a, dtype=np.float64) for a in (mu_t, var_t, mu0, var0))
    sq = (mu_t - mu0) ** 2
    sg = (np.sqrt(var_t + cfg.eps) - np.sqrt(var0 + cfg.eps)) ** 2
    red = np.mean if cfg.normalization == "mean" else np.sum
    return float(red(sq) + red(sg))


def total_penalty(hidden: Sequence[Tensor], M: np.ndarray, anchor: AnchorStatistics,
                  cfg: TransportConfig = TransportConfig()) -> Tuple[Tensor, List[float]]:
    """Sum of per-layer W2 terms times ``cfg.scale``; also returns the per-layer values."""
    if len(hidden) != anchor.num_layers:
        raise ValueError(f"total_penalty: {len(hidden)} hidden tensors vs anchor L={anchor.num_layers}")
    terms = []
    total = None
    for H, mu0, var0 in zip(hidden, anchor.mu0, anchor.var0):
        mu, var = current_stats(H, M)
        w = w2_bures(mu, var, mu0, var0, cfg)
        terms.append(w.item())
        total = w if total is None else total + w
    return total * cfg.scale, terms
