"""Synthetic two-regime data: a CE "VQA" task and a low-rank action task.

Both generators are pure functions of ``(seed, index)``.  A fixed *world*
(answer permutations, bucket hyperplanes, low-rank action map) is derived
from ``TaskConfig.world_seed`` so every sample stream shares one ground truth.

Sequence layout (length ``max_seq_len``, right padded)::

    [obs x P][q_1 ... q_k][SEP][answer_1 ... answer_m][PAD ...]   pretrain
    [obs x P][q_1 ... q_k][SEP][PAD ...]                          action

The answer to a question is ``perm_b[q_j]`` for the first ``m`` question
tokens, with ``b`` the observation bucket (signs of fixed projections of the
observation).  Answers therefore spread over the whole vocabulary.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import container
from .autograd import no_grad, ops

PAD, SEP, OBS = 0, 1, 2
FIRST_TEXT = 3


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 512
    max_seq_len: int = 32
    num_obs_tokens: int = 4
    d_obs: int = 16
    horizon: int = 10
    action_dim: int = 7
    min_question: int = 2
    max_question: int = 8
    answer_len: int = 2
    bucket_bits: int = 1
    action_rank: int = 3
    drift_scale: float = 0.005
    world_seed: int = 0
    n_eval: int = 100

    def __post_init__(self):
        if self.min_question < self.answer_len:
            raise ValueError("questions must be at least answer_len tokens long")
        longest = self.num_obs_tokens + self.max_question + 1 + self.answer_len
        if longest > self.max_seq_len:
            raise ValueError(f"longest pretrain sample ({longest}) exceeds max_seq_len")


@dataclass(frozen=True)
class World:
    perms: np.ndarray          # (2**bucket_bits, V)
    bucket_dirs: np.ndarray    # (bucket_bits, d_obs)
    act_in: np.ndarray         # (rank, d_obs)
    act_out: np.ndarray        # (action_dim, rank)


@lru_cache(maxsize=16)
def world(cfg: TaskConfig) -> World:
    rng = np.random.default_rng([cfg.world_seed, 7919])
    nb = 2 ** cfg.bucket_bits
    perms = np.stack([rng.permutation(cfg.vocab_size) for _ in range(nb)])
    dirs = rng.normal(size=(cfg.bucket_bits, cfg.d_obs))
    act_in = rng.normal(size=(cfg.action_rank, cfg.d_obs)) / np.sqrt(cfg.d_obs) * 1.5
    act_out = rng.normal(size=(cfg.action_dim, cfg.action_rank))
    # row l1 norm <= 0.9 keeps |U tanh(.)| inside [-1, 1] before drift
    act_out *= 0.9 / np.abs(act_out).sum(axis=1, keepdims=True)
    return World(perms, dirs, act_in, act_out)


def obs_bucket(cfg: TaskConfig, obs: np.ndarray) -> np.ndarray:
    bits = (np.asarray(obs) @ world(cfg).bucket_dirs.T > 0).astype(np.int64)
    return (bits * (2 ** np.arange(cfg.bucket_bits))).sum(axis=-1)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------
@dataclass
class PretrainBatch:
    tokens: np.ndarray
    obs: np.ndarray
    mask: np.ndarray
    answer_mask: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def trimmed(self) -> "PretrainBatch":
        n = _valid_len(self.mask)
        return PretrainBatch(self.tokens[:, :n], self.obs, self.mask[:, :n], self.answer_mask[:, :n])

    def select(self, idx) -> "PretrainBatch":
        return PretrainBatch(self.tokens[idx], self.obs[idx], self.mask[idx], self.answer_mask[idx])

    def arrays(self) -> dict:
        return {"tokens": self.tokens, "obs": self.obs, "mask": self.mask,
                "answer_mask": self.answer_mask}


@dataclass
class ActionBatch:
    tokens: np.ndarray
    obs: np.ndarray
    mask: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def trimmed(self) -> "ActionBatch":
        n = _valid_len(self.mask)
        return ActionBatch(self.tokens[:, :n], self.obs, self.mask[:, :n], self.actions)

    def arrays(self) -> dict:
        return {"tokens": self.tokens, "obs": self.obs, "mask": self.mask, "actions": self.actions}


def _valid_len(mask: np.ndarray) -> int:
    cols = np.flatnonzero(np.asarray(mask).any(axis=0))
    return int(cols[-1]) + 1 if cols.size else 1


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), stream])


def _question(cfg: TaskConfig, rng: np.random.Generator) -> np.ndarray:
    k = int(rng.integers(cfg.min_question, cfg.max_question + 1))
    return rng.integers(FIRST_TEXT, cfg.vocab_size, size=k)


def pretrain_sample(cfg: TaskConfig, seed: int, index: int):
    rng = _rng(seed, index, 1)
    obs = rng.normal(size=cfg.d_obs)
    q = _question(cfg, rng)
    b = int(obs_bucket(cfg, obs))
    ans = world(cfg).perms[b][q[: cfg.answer_len]]
    P = cfg.num_obs_tokens
    tokens = np.full(cfg.max_seq_len, PAD, dtype=np.int64)
    mask = np.zeros(cfg.max_seq_len, dtype=np.int64)
    amask = np.zeros(cfg.max_seq_len, dtype=np.int64)
    seq = np.concatenate([np.full(P, OBS), q, [SEP], ans])
    tokens[: len(seq)] = seq
    mask[: len(seq)] = 1
    amask[len(seq) - len(ans): len(seq)] = 1
    return tokens, obs, mask, amask


def gen_pretrain(cfg: TaskConfig, seed: int, n: int, start: int = 0) -> PretrainBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    cols = list(zip(*(pretrain_sample(cfg, seed, start + i) for i in range(n))))
    return PretrainBatch(*(np.stack(c) for c in cols))


def action_sample(cfg: TaskConfig, seed: int, index: int, drift: bool = True):
    rng = _rng(seed, index, 2)
    obs = rng.normal(size=cfg.d_obs)
    q = _question(cfg, rng)
    w = world(cfg)
    base = w.act_out @ np.tanh(w.act_in @ obs)
    steps = rng.normal(scale=cfg.drift_scale, size=(cfg.horizon, cfg.action_dim))
    acts = base[None, :] + (np.cumsum(steps, axis=0) if drift else 0.0)
    acts = np.clip(acts, -1.0, 1.0)
    P = cfg.num_obs_tokens
    tokens = np.full(cfg.max_seq_len, PAD, dtype=np.int64)
    mask = np.zeros(cfg.max_seq_len, dtype=np.int64)
    seq = np.concatenate([np.full(P, OBS), q, [SEP]])
    tokens[: len(seq)] = seq
    mask[: len(seq)] = 1
    return tokens, obs, mask, acts


def gen_actions(cfg: TaskConfig, seed: int, n: int, start: int = 0, drift: bool = True) -> ActionBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    cols = list(zip(*(action_sample(cfg, seed, start + i, drift) for i in range(n))))
    return ActionBatch(*(np.stack(c) for c in cols))


# ---------------------------------------------------------------------------
# discrete action tokens (stand-in for a learned action tokenizer)
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class UniformQuantizer:
    """Uniform per-dimension binning of [-1, 1]."""

    n_bins: int = 256

    @property
    def width(self) -> float:
        return 2.0 / self.n_bins

    def quantize(self, a: np.ndarray) -> np.ndarray:
        b = np.floor((np.clip(a, -1.0, 1.0) + 1.0) / self.width).astype(np.int64)
        return np.clip(b, 0, self.n_bins - 1)

    def dequantize(self, bins: np.ndarray) -> np.ndarray:
        return -1.0 + (np.asarray(bins) + 0.5) * self.width


def with_action_tokens(cfg: TaskConfig, batch: ActionBatch, quantizer: UniformQuantizer,
                       steps: int):
    """Append ``steps * action_dim`` bin tokens after SEP.

    Bins map onto the top ``n_bins`` vocabulary ids.  Returns
    ``(tokens, mask, target_weights)`` where the weights mark the appended
    positions (the CE for the token at position i is read at logits i-1).
    """
    V = cfg.vocab_size
    if quantizer.n_bins > V - FIRST_TEXT:
        raise ValueError("vocabulary too small for the action bins")
    ids = quantizer.quantize(batch.actions[:, :steps]).reshape(len(batch), -1) + (V - quantizer.n_bins)
    B, S = batch.tokens.shape
    ends = batch.mask.sum(axis=1)
    n_new = ids.shape[1]
    if ends.max() + n_new > cfg.max_seq_len:
        raise ValueError("discrete action tokens do not fit in max_seq_len")
    tokens = batch.tokens.copy()
    mask = batch.mask.copy()
    weights = np.zeros_like(mask)
    for i in range(B):
        e = int(ends[i])
        tokens[i, e:e + n_new] = ids[i]
        mask[i, e:e + n_new] = 1
        weights[i, e:e + n_new] = 1
    n = _valid_len(mask)
    return tokens[:, :n], mask[:, :n], weights[:, :n]


# ---------------------------------------------------------------------------
# holdout
# ---------------------------------------------------------------------------
HOLDOUT_SEED_OFFSET = 1_000_003


@dataclass
class HoldoutSet:
    batch: PretrainBatch
    seed: int

    def serialize(self) -> bytes:
        return container.dumps("holdout", self.batch.arrays(), {"seed": self.seed})

    def sha256(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    @classmethod
    def deserialize(cls, blob: bytes) -> "HoldoutSet":
        manifest, arrs = container.loads(blob, "holdout")
        return cls(PretrainBatch(arrs["tokens"], arrs["obs"], arrs["mask"], arrs["answer_mask"]),
                   manifest["meta"]["seed"])


def make_holdout(cfg: TaskConfig, seed: int) -> HoldoutSet:
    return HoldoutSet(gen_pretrain(cfg, seed + HOLDOUT_SEED_OFFSET, cfg.n_eval), seed)


def pretrain_ce(model, batch: PretrainBatch):
    """Teacher-forced CE on answer tokens (graph-connected)."""
    b = batch.trimmed()
    out = model(b.tokens, b.obs, b.mask, capture=False, compute_logits=True)
    return ops.cross_entropy(out.logits[:, :-1], b.tokens[:, 1:], b.answer_mask[:, 1:])


def eval_holdout(model, holdout, chunk: int = 50) -> float:
    """Mean CE over all answer tokens of the holdout; records no graph."""
    batch = holdout.batch if isinstance(holdout, HoldoutSet) else holdout
    total, count = 0.0, 0.0
    with no_grad():
        for s in range(0, len(batch), chunk):
            b = batch.select(slice(s, s + chunk)).trimmed()
            w = b.answer_mask[:, 1:]
            n = float(w.sum())
            if n == 0:
                continue
            out = model(b.tokens, b.obs, b.mask, compute_logits=True)
            ce = ops.cross_entropy(out.logits[:, :-1], b.tokens[:, 1:], w)
            total += ce.item() * n
            count += n
    return total / count
