"""Static activation anchor: per-layer masked Gaussian statistics.

Per batch, each layer's hidden states are reduced over valid positions to a
mean and a population variance (denominator = number of valid positions).
The anchor averages these per-batch vectors over batches.  Note that the
average of per-batch variances omits the between-batch spread of the means,
so it is *not* the pooled variance; ``mode="pooled"`` computes the latter
for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import container
from .autograd import no_grad
from .models import EmptyValidSetError, ToyVLM, ToyVLMConfig, model_fingerprint

MODES = ("batch_mean", "pooled")


def masked_stats(H: np.ndarray, M: np.ndarray):
    """Masked mean and population variance of ``H`` (B, S, d) over ``M`` (B, S)."""
    H = np.asarray(H, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if H.shape[:2] != M.shape:
        raise ValueError(f"masked_stats: shape mismatch {H.shape} vs mask {M.shape}")
    C = M.sum()
    if C <= 0:
        raise EmptyValidSetError("empty valid set")
    Me = M[..., None]
    mu = (H * Me).sum(axis=(0, 1)) / C
    diff = H - mu
    var = (diff * diff * Me).sum(axis=(0, 1)) / C
    return mu, var


@dataclass
class AnchorStatistics:
    mu0: List[np.ndarray]
    var0: List[np.ndarray]
    meta: Dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.mu0)

    @property
    def d_model(self) -> int:
        return int(self.mu0[0].shape[0])

    def validate(self) -> None:
        if len(self.mu0) != len(self.var0) or not self.mu0:
            raise ValueError("anchor: mean/variance layer counts differ or are empty")
        for m, v in zip(self.mu0, self.var0):
            if m.shape != (self.d_model,) or v.shape != (self.d_model,):
                raise ValueError("anchor: inconsistent vector lengths")
            if np.any(v < 0):
                raise ValueError("anchor: negative variance")

    def check_model(self, cfg: ToyVLMConfig) -> None:
        if self.num_layers != cfg.num_layers or self.d_model != cfg.d_model:
            raise ValueError(
                f"anchor has L={self.num_layers}, d={self.d_model}; model has "
                f"L={cfg.num_layers}, d={cfg.d_model}")
        fp = self.meta.get("model_fingerprint")
        if fp is not None and fp != model_fingerprint(cfg):
            raise ValueError("anchor fingerprint does not match the model configuration")


class AnchorBuilder:
    """Online accumulator of per-batch, per-layer statistics."""

    def __init__(self, mode: str = "batch_mean"):
        if mode not in MODES:
            raise ValueError(f"unknown anchor mode {mode!r}")
        self.mode = mode
        self._mu_sum: Optional[List[np.ndarray]] = None
        self._var_sum: Optional[List[np.ndarray]] = None
        # pooled mode: running count, sum and sum of squared deviations (Chan merge)
        self._pooled: Optional[List[list]] = None
        self.n_batches = 0

    def accumulate(self, hidden: Sequence[np.ndarray], M: np.ndarray) -> None:
        hs = [np.asarray(getattr(h, "data", h)) for h in hidden]
        if self._mu_sum is not None and len(hs) != len(self._mu_sum):
            raise ValueError("anchor: layer count changed between batches")
        stats = [masked_stats(h, M) for h in hs]
        C = float(np.asarray(M).sum())
        if self._mu_sum is None:
            self._mu_sum = [np.zeros_like(mu) for mu, _ in stats]
            self._var_sum = [np.zeros_like(mu) for mu, _ in stats]
            self._pooled = [[0.0, np.zeros_like(mu), np.zeros_like(mu)] for mu, _ in stats]
        for layer, (mu, var) in enumerate(stats):
            self._mu_sum[layer] += mu
            self._var_sum[layer] += var
            n, mean, m2 = self._pooled[layer]
            tot = n + C
            delta = mu - mean
            self._pooled[layer] = [tot, mean + delta * (C / tot), m2 + var * C + delta * delta * (n * C / tot)]
        self.n_batches += 1

    def finalize(self, meta: Optional[Dict] = None) -> AnchorStatistics:
        if self.n_batches == 0:
            raise ValueError("anchor: finalize called before any batch was accumulated")
        if self.mode == "batch_mean":
            mu0 = [m / self.n_batches for m in self._mu_sum]
            var0 = [v / self.n_batches for v in self._var_sum]
        else:
            mu0 = [p[1].copy() for p in self._pooled]
            var0 = [p[2] / p[0] for p in self._pooled]
        info = {"n_batches": self.n_batches, "mode": self.mode, "num_layers": len(mu0),
                "d_model": int(mu0[0].shape[0])}
        info.update(meta or {})
        anchor = AnchorStatistics(mu0, var0, info)
        anchor.validate()
        return anchor


def build_anchor(model: ToyVLM, batches, mode: str = "batch_mean", meta: Optional[Dict] = None) -> AnchorStatistics:
    """Run the model over ``batches`` (full mask: obs + question + answer tokens)."""
    builder = AnchorBuilder(mode)
    n_samples = 0
    with no_grad():
        for b in batches:
            b = b.trimmed()
            out = model(b.tokens, b.obs, b.mask, capture=True, compute_logits=False)
            builder.accumulate([h.data for h in out.hidden], b.mask)
            n_samples += len(b)
    info = {"model_fingerprint": model_fingerprint(model.cfg), "n_samples": n_samples}
    info.update(meta or {})
    return builder.finalize(info)


def save(anchor: AnchorStatistics, path) -> str:
    anchor.validate()
    tensors = {}
    for i, (m, v) in enumerate(zip(anchor.mu0, anchor.var0)):
        tensors[f"mu0.{i}"] = m
        tensors[f"var0.{i}"] = v
    return container.save(path, "anchor", tensors, anchor.meta)


def load(path, model_cfg: Optional[ToyVLMConfig] = None) -> AnchorStatistics:
    manifest, arrs = container.load(path, "anchor")
    meta = manifest["meta"]
    L = int(meta["num_layers"])
    try:
        mu0 = [arrs[f"mu0.{i}"] for i in range(L)]
        var0 = [arrs[f"var0.{i}"] for i in range(L)]
    except KeyError as exc:
        raise container.ContainerError(f"corrupt anchor: missing {exc}") from None
    anchor = AnchorStatistics(mu0, var0, meta)
    anchor.validate()
    if model_cfg is not None:
        anchor.check_model(model_cfg)
    return anchor
