"""Toy VLM backbone, cross-attention flow-matching expert and LoRA adapters.

Weights are stored torch-style as (out, in).  Parameter names follow the
``llm.layers.{l}.{sublayer}.{tensor}`` convention so that layer groups can be
recovered lexically.
"""
from __future__ import annotations

import math
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import ParameterStore, Tensor, ops

NEG_INF = -1e30


class EmptyValidSetError(ValueError):
    pass


@dataclass(frozen=True)
class ToyVLMConfig:
    num_layers: int = 4
    d_model: int = 64
    num_heads: int = 4
    vocab_size: int = 512
    max_seq_len: int = 32
    mlp_ratio: int = 4
    num_obs_tokens: int = 4
    d_obs: int = 16

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"ToyVLMConfig.{k} must be positive, got {v}")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.num_obs_tokens >= self.max_seq_len:
            raise ValueError("num_obs_tokens must be smaller than max_seq_len")


@dataclass(frozen=True)
class ExpertConfig:
    d_expert: int = 32
    num_layers: int = 2
    num_heads: int = 4
    action_dim: int = 7
    horizon: int = 10
    zero_init_out: bool = True

    def __post_init__(self):
        if self.d_expert % self.num_heads:
            raise ValueError("d_expert must be divisible by num_heads")


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------
class Module:
    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def register(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name: str, mod: "Module") -> "Module":
        self._children[name] = mod
        return mod

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for cn, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cn}.")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for cn, c in self._children.items():
            yield from c.named_modules(f"{prefix}{cn}.")


class Linear(Module):
    """Dense layer; optionally carries a LoRA adapter (B @ A, scaled by alpha/r)."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = False,
                 std: Optional[float] = None):
        super().__init__()
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = self.register("weight", rng.normal(0.0, std, (d_out, d_in)))
        self.bias = self.register("bias", np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out
        self.lora_A: Optional[Tensor] = None
        self.lora_B: Optional[Tensor] = None
        self.lora_scale = 0.0

    def attach_lora(self, rng: np.random.Generator, r: int, alpha: float) -> None:
        self.lora_A = self.register("lora_A", np.zeros((r, self.d_in)))
        self.lora_B = self.register("lora_B", rng.normal(0.0, math.sqrt(2.0 / r), (self.d_out, r)))
        self.lora_scale = alpha / r

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.linear(x, self.weight, self.bias)
        if self.lora_A is not None:
            y = y + ops.linear(ops.linear(x, self.lora_A), self.lora_B) * self.lora_scale
        return y


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = self.register("weight", np.ones(d))
        self.bias = self.register("bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)


class Attention(Module):
    def __init__(self, rng, d_model: int, n_heads: int, d_kv: Optional[int] = None,
                 out_std: Optional[float] = None):
        super().__init__()
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = self.child("q_proj", Linear(rng, d_model, d_model))
        self.k_proj = self.child("k_proj", Linear(rng, d_kv, d_model))
        self.v_proj = self.child("v_proj", Linear(rng, d_kv, d_model))
        self.o_proj = self.child("o_proj", Linear(rng, d_model, d_model, std=out_std))

    def __call__(self, x: Tensor, ctx: Optional[Tensor] = None,
                 bias: Optional[np.ndarray] = None) -> Tensor:
        ctx = x if ctx is None else ctx
        out = ops.attention(self.q_proj(x), self.k_proj(ctx), self.v_proj(ctx), self.n_heads, bias)
        return self.o_proj(out)


def attention_bias(key_mask: np.ndarray, n_query: int, causal: bool) -> np.ndarray:
    """Additive bias (B, 1, Sq, Sk): large negative at masked keys / future positions."""
    km = np.asarray(key_mask, dtype=bool)
    B, Sk = km.shape
    bias = np.where(km[:, None, None, :], 0.0, NEG_INF)
    if causal:
        fut = np.triu(np.ones((n_query, Sk), dtype=bool), k=1)
        bias = bias + np.where(fut, NEG_INF, 0.0)[None, None]
    else:
        bias = np.broadcast_to(bias, (B, 1, n_query, Sk))
    return bias


def sinusoid(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


# ---------------------------------------------------------------------------
# VLM
# ---------------------------------------------------------------------------
class MLP(Module):
    def __init__(self, rng, d: int, hidden: int, out_std: float):
        super().__init__()
        self.gate_proj = self.child("gate_proj", Linear(rng, d, hidden))
        self.up_proj = self.child("up_proj", Linear(rng, d, hidden))
        self.down_proj = self.child("down_proj", Linear(rng, hidden, d, std=out_std))

    def __call__(self, x: Tensor) -> Tensor:
        return self.down_proj(ops.gelu(self.gate_proj(x)) * self.up_proj(x))


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ToyVLMConfig):
        super().__init__()
        d = cfg.d_model
        out_std = 1.0 / math.sqrt(2 * cfg.num_layers * d)
        self.input_layernorm = self.child("input_layernorm", LayerNorm(d))
        self.self_attn = self.child("self_attn", Attention(rng, d, cfg.num_heads, out_std=out_std))
        self.post_attention_layernorm = self.child("post_attention_layernorm", LayerNorm(d))
        self.mlp = self.child("mlp", MLP(rng, d, cfg.mlp_ratio * d,
                                         out_std=1.0 / math.sqrt(2 * cfg.num_layers * cfg.mlp_ratio * d)))

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        x = x + self.self_attn(self.input_layernorm(x), bias=bias)
        return x + self.mlp(self.post_attention_layernorm(x))


@dataclass
class VLMOutput:
    logits: Optional[Tensor]
    hidden: List[Tensor]
    last_hidden: Tensor


class ToyVLM(Module):
    """Causal transformer whose first ``num_obs_tokens`` positions come from a projector.

    The projector maps a continuous observation vector to ``num_obs_tokens``
    embeddings (the stand-in for image tokens); text tokens follow.
    """

    def __init__(self, cfg: ToyVLMConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        llm = self.child("llm", Module())
        self.embed_tokens = Module()
        self.embed_tokens.register("weight", rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
        llm.child("embed_tokens", self.embed_tokens)
        self.layers: List[DecoderLayer] = []
        layers = llm.child("layers", Module())
        for i in range(cfg.num_layers):
            self.layers.append(layers.child(str(i), DecoderLayer(rng, cfg)))
        self.norm = llm.child("norm", LayerNorm(d))
        self.lm_head = llm.child("lm_head", Linear(rng, d, cfg.vocab_size))
        self.mm_projector = self.child(
            "mm_projector", Linear(rng, cfg.d_obs, cfg.num_obs_tokens * d, bias=True))
        self._pos = sinusoid(np.arange(cfg.max_seq_len), d)

    def forward(self, tokens: np.ndarray, obs: np.ndarray, mask: np.ndarray,
                capture: bool = False, compute_logits: bool = True) -> VLMOutput:
        cfg = self.cfg
        tokens = np.asarray(tokens)
        mask = np.asarray(mask)
        B, S = tokens.shape
        P = cfg.num_obs_tokens
        if not 1 <= S <= cfg.max_seq_len:
            raise ValueError(f"sequence length {S} outside [1, {cfg.max_seq_len}]")
        if mask.shape != (B, S):
            raise ValueError(f"mask shape {mask.shape} does not match tokens {tokens.shape}")
        if not np.all(mask.sum(axis=1) > 0):
            raise EmptyValidSetError("empty valid set: a mask row has no valid position")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id out of range")
        x = ops.reshape(self.mm_projector(Tensor(obs)), (B, P, cfg.d_model))
        if S > P:
            txt = ops.embedding(self.embed_tokens._params["weight"], tokens[:, P:])
            x = ops.concat([x, txt], axis=1)
        elif S < P:
            x = ops.index(x, (slice(None), slice(0, S)))
        x = x + self._pos[:S]
        bias = attention_bias(mask, S, causal=True)
        hidden = []
        for layer in self.layers:
            x = layer(x, bias)
            if capture:
                hidden.append(x)
        last = self.norm(x)
        logits = self.lm_head(last) if compute_logits else None
        return VLMOutput(logits, hidden, last)

    __call__ = forward


# ---------------------------------------------------------------------------
# flow-matching expert
# ---------------------------------------------------------------------------
class ExpertBlock(Module):
    def __init__(self, rng, cfg: ExpertConfig):
        super().__init__()
        d = cfg.d_expert
        out_std = 1.0 / math.sqrt(2 * cfg.num_layers * d)
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.self_attn = self.child("self_attn", Attention(rng, d, cfg.num_heads, out_std=out_std))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.cross_attn = self.child("cross_attn", Attention(rng, d, cfg.num_heads, out_std=out_std))
        self.ln3 = self.child("ln3", LayerNorm(d))
        self.fc1 = self.child("fc1", Linear(rng, d, 4 * d, bias=True))
        self.fc2 = self.child("fc2", Linear(rng, 4 * d, d, bias=True,
                                            std=1.0 / math.sqrt(2 * cfg.num_layers * 4 * d)))

    def __call__(self, x: Tensor, ctx: Tensor, ctx_bias: np.ndarray) -> Tensor:
        x = x + self.self_attn(self.ln1(x))
        x = x + self.cross_attn(self.ln2(x), ctx=ctx, bias=ctx_bias)
        return x + self.fc2(ops.gelu(self.fc1(self.ln3(x))))


class FlowExpert(Module):
    """Velocity field v(a_t; h, t) cross-attending to the VLM's last hidden states."""

    def __init__(self, cfg: ExpertConfig, d_model: int, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_expert
        self.ctx_proj = self.child("ctx_proj", Linear(rng, d_model, d, bias=True))
        self.in_proj = self.child("in_proj", Linear(rng, cfg.action_dim, d, bias=True))
        self.time_mlp = self.child("time_mlp", Linear(rng, d, d, bias=True))
        self.blocks: List[ExpertBlock] = []
        blocks = self.child("blocks", Module())
        for i in range(cfg.num_layers):
            self.blocks.append(blocks.child(str(i), ExpertBlock(rng, cfg)))
        self.norm = self.child("norm", LayerNorm(d))
        self.out_proj = self.child("out_proj", Linear(rng, d, cfg.action_dim, bias=True))
        if cfg.zero_init_out:
            self.out_proj.weight.data[...] = 0.0
        self._pos = sinusoid(np.arange(cfg.horizon), d)

    def forward(self, noisy_actions: np.ndarray, t: np.ndarray, h_last: Tensor,
                mask: np.ndarray) -> Tensor:
        cfg = self.cfg
        a = np.asarray(noisy_actions, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        B, H, A = a.shape
        if A != cfg.action_dim or H > cfg.horizon:
            raise ValueError(f"noisy actions shape {a.shape} incompatible with expert config")
        if t.shape != (B,):
            raise ValueError(f"t must have shape ({B},), got {t.shape}")
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("flow time t must lie in [0, 1]")
        if h_last.shape[0] != B or h_last.shape[:2] != np.asarray(mask).shape:
            raise ValueError(f"h_last {h_last.shape} and mask {np.shape(mask)} do not conform")
        temb = ops.gelu(self.time_mlp(Tensor(sinusoid(t * 1000.0, cfg.d_expert))))
        x = self.in_proj(Tensor(a)) + ops.reshape(temb, (B, 1, cfg.d_expert)) + self._pos[:H]
        ctx = self.ctx_proj(h_last)
        ctx_bias = attention_bias(mask, H, causal=False)
        for blk in self.blocks:
            x = blk(x, ctx, ctx_bias)
        return self.out_proj(self.norm(x))

    __call__ = forward


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------
DEFAULT_LORA_TARGETS = (r"\.q_proj$", r"\.k_proj$", r"\.v_proj$", r"\.o_proj$",
                        r"\.up_proj$", r"\.down_proj$", r"\.gate_proj$")


def apply_lora(model: ToyVLM, targets: Sequence[str] = DEFAULT_LORA_TARGETS, r: int = 16,
               alpha: float = 32.0, seed: int = 0) -> List[str]:
    """Attach adapters to every ``llm`` Linear whose module path matches a pattern.

    Freezes the base VLM; afterwards only adapter factors and the projector are
    trainable.  Returns the adapted module paths.
    """
    rng = np.random.default_rng(seed)
    pats = [re.compile(p) for p in targets]
    hit = []
    for path, mod in model.named_modules():
        if isinstance(mod, Linear) and path.startswith("llm.layers.") and any(p.search(path) for p in pats):
            hit.append((path, mod))
    if not hit:
        raise ValueError(f"LoRA target patterns matched no parameters: {list(targets)}")
    for _, p in model.named_parameters():
        p.requires_grad = False
    for _, mod in hit:
        if r > min(mod.d_in, mod.d_out):
            raise ValueError(f"LoRA rank {r} exceeds min(in, out) of a target")
        mod.attach_lora(rng, r, alpha)
    for _, p in model.mm_projector.named_parameters():
        p.requires_grad = True
    return [path for path, _ in hit]


def build_store(*named_modules: Tuple[str, Module]) -> ParameterStore:
    store = ParameterStore()
    for prefix, mod in named_modules:
        for name, p in mod.named_parameters(prefix):
            store.add(name, p)
    return store


def model_fingerprint(cfg: ToyVLMConfig) -> str:
    import hashlib
    import json
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:16]
