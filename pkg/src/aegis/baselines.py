"""Comparison conditions sharing the :class:`~aegis.trainer.Learner` skeleton."""
from __future__ import annotations

from typing import Dict

import numpy as np

from .autograd import ParameterStore, backward, ops
from .models import ToyVLM, build_store
from .tasks import TaskConfig, UniformQuantizer, gen_pretrain, pretrain_ce, with_action_tokens
from .trainer import Learner, StepMetrics

FISHER_SEED_OFFSET = 2_000_003


def naive_step(learner: Learner, step: int) -> StepMetrics:
    """Single backward of the flow-matching loss into VLM and expert."""
    cfg = learner.cfg
    learner.store.zero_grads()
    raw_sum = 0.0
    for k, batch in enumerate(learner.micro_batches(step)):
        batch = batch.trimmed()
        l_fm, raw, _, _ = learner.fm_forward(batch, learner.noise(step, k, batch))
        backward(l_fm)
        raw_sum += raw.item()
    return StepMetrics(raw_sum / cfg.grad_accum, learner.finish_step(step))


lora_step = naive_step


def stopgrad_step(learner: Learner, step: int) -> StepMetrics:
    """Detached features for the expert; the VLM learns only from discrete action tokens."""
    cfg = learner.cfg
    quant = UniformQuantizer(cfg.n_bins)
    learner.store.zero_grads()
    raw_sum = ce_sum = 0.0
    for k, batch in enumerate(learner.micro_batches(step)):
        noise = learner.noise(step, k, batch)
        if cfg.discrete_head:
            tokens, mask, weights = with_action_tokens(cfg.task, batch, quant, cfg.discrete_steps)
            # expert sees only the prompt positions; causal attention keeps them
            # independent of the appended action tokens
            prompt = np.zeros_like(mask)
            prompt[:, : batch.mask.shape[1]] = batch.mask[:, : mask.shape[1]]
            l_fm, raw, out, _ = learner.fm_forward(batch, noise, detach=True, tokens=tokens, mask=prompt)
            # logits only where an action token is predicted (position i-1 for token i)
            b_idx, pos = np.nonzero(weights[:, 1:])
            h = ops.index(out.last_hidden, (b_idx, pos))
            ce = ops.cross_entropy(learner.model.lm_head(h), tokens[:, 1:][b_idx, pos],
                                   weights[:, 1:][b_idx, pos])
            loss = l_fm + ce * (1.0 / cfg.grad_accum)
            ce_sum += ce.item()
        else:
            batch = batch.trimmed()
            loss, raw, _, _ = learner.fm_forward(batch, noise, detach=True)
        backward(loss)
        raw_sum += raw.item()
    n = cfg.grad_accum
    return StepMetrics(raw_sum / n, learner.finish_step(step), extra={"discrete_ce": ce_sum / n})


# ---------------------------------------------------------------------------
# EWC
# ---------------------------------------------------------------------------
def estimate_fisher(model: ToyVLM, task: TaskConfig, seed: int, n_samples: int,
                    names=None) -> Dict[str, np.ndarray]:
    """Diagonal empirical Fisher: mean over samples of squared per-sample CE gradients."""
    store = build_store(("", model))
    names = list(store.trainable() if names is None else names)
    fisher = {n: np.zeros_like(store[n].data) for n in names}
    batch = gen_pretrain(task, seed + FISHER_SEED_OFFSET, n_samples)
    for i in range(n_samples):
        store.zero_grads()
        backward(pretrain_ce(model, batch.select(slice(i, i + 1))))
        for n in names:
            g = store.grad(n)
            fisher[n] += g * g
    store.zero_grads()
    return {n: f / n_samples for n, f in fisher.items()}


def ewc_penalty(store: ParameterStore, fisher: Dict[str, np.ndarray], anchor_params: Dict[str, np.ndarray],
                lam: float) -> float:
    """``lam / 2 * sum_i F_i (theta_i - theta*_i)^2``."""
    total = 0.0
    for n, F in fisher.items():
        diff = store[n].data - anchor_params[n]
        total += float(np.sum(F * diff * diff))
    return 0.5 * lam * total


def ewc_penalty_grad(store: ParameterStore, fisher: Dict[str, np.ndarray],
                     anchor_params: Dict[str, np.ndarray], lam: float) -> Dict[str, np.ndarray]:
    return {n: lam * F * (store[n].data - anchor_params[n]) for n, F in fisher.items()}


def ewc_step(learner: Learner, step: int, fisher: Dict[str, np.ndarray],
             anchor_params: Dict[str, np.ndarray]) -> StepMetrics:
    """Naive flow-matching gradient plus the EWC restoring force, then clip and step."""
    cfg = learner.cfg
    store = learner.store
    store.zero_grads()
    raw_sum = 0.0
    for k, batch in enumerate(learner.micro_batches(step)):
        batch = batch.trimmed()
        l_fm, raw, _, _ = learner.fm_forward(batch, learner.noise(step, k, batch))
        backward(l_fm)
        raw_sum += raw.item()
    penalty = ewc_penalty(store, fisher, anchor_params, cfg.ewc_lambda)
    for n, g in ewc_penalty_grad(store, fisher, anchor_params, cfg.ewc_lambda).items():
        store.grad(n)[...] += g
    return StepMetrics(raw_sum / cfg.grad_accum, learner.finish_step(step),
                       extra={"ewc_penalty": penalty})
