"""Shared trainer state: models, parameter store, optimizer, schedules, EMA."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .autograd import ParameterStore, ops
from .config import TrainingConfig
from .flow import FlowNoise, fm_mse, noise_rng
from .models import FlowExpert, ToyVLM, apply_lora, build_store
from .optim import EMA, AdamW, clip_grad_norm, grad_norm, warmup_scale
from .tasks import ActionBatch, gen_actions

EXPERT_PREFIX = "expert."


@dataclass
class StepMetrics:
    fm_loss_raw: float
    preclip_norm: float
    report: Optional[object] = None
    extra: Dict[str, float] = field(default_factory=dict)


class Learner:
    """Everything one fine-tuning run mutates."""

    def __init__(self, cfg: TrainingConfig, vlm_state: Optional[Dict[str, np.ndarray]] = None):
        self.cfg = cfg
        self.model = ToyVLM(cfg.model, seed=cfg.pretrain.seed)
        if vlm_state is not None:
            self.model_store_for(self.model).load_state(vlm_state)
        if cfg.condition == "lora":
            apply_lora(self.model, r=cfg.lora_r, alpha=cfg.lora_alpha, seed=cfg.seed + 101)
        self.expert = FlowExpert(cfg.expert, cfg.model.d_model, seed=cfg.seed + 211)
        self.store = build_store(("", self.model), (EXPERT_PREFIX, self.expert))
        trainable = self.store.trainable()
        self.expert_names = [n for n in trainable if n.startswith(EXPERT_PREFIX)]
        self.vlm_names = [n for n in trainable if not n.startswith(EXPERT_PREFIX)]
        self.opt = AdamW(self.store, {"vlm": (self.vlm_names, cfg.vlm_lr),
                                      "expert": (self.expert_names, cfg.lr_expert)},
                         weight_decay=cfg.weight_decay)
        self.ema = EMA(self.store, self.expert_names, cfg.ema_decay)
        self.step_count = 0

    @staticmethod
    def model_store_for(model: ToyVLM) -> ParameterStore:
        return build_store(("", model))

    # -- data -----------------------------------------------------------------
    def micro_batches(self, step: int) -> List[ActionBatch]:
        """Micro-batches of optimisation step ``step`` (1-based); identical across conditions."""
        cfg = self.cfg
        out = []
        for k in range(cfg.grad_accum):
            idx = ((step - 1) * cfg.grad_accum + k) * cfg.batch_size
            out.append(gen_actions(cfg.task, cfg.seed, cfg.batch_size, start=idx))
        return out

    def noise(self, step: int, micro: int, batch: ActionBatch) -> FlowNoise:
        return FlowNoise.draw(noise_rng(self.cfg.seed, step, micro), batch.actions.shape,
                              self.cfg.fm_beta_a)

    # -- losses ---------------------------------------------------------------
    def fm_forward(self, batch: ActionBatch, noise: FlowNoise, detach: bool = False,
                   capture: bool = False, compute_logits: bool = False, tokens=None, mask=None):
        """VLM + expert forward; returns (training loss, raw MSE tensor, VLM output, mask)."""
        tokens = batch.tokens if tokens is None else tokens
        mask = batch.mask if mask is None else mask
        out = self.model(tokens, batch.obs, mask, capture=capture, compute_logits=compute_logits)
        h = ops.detach(out.last_hidden) if detach else out.last_hidden
        raw = fm_mse(self.expert, h, mask, batch.actions, noise)
        train = raw * (self.cfg.fm_scale / self.cfg.grad_accum)
        return train, raw, out, mask

    # -- update ---------------------------------------------------------------
    def finish_step(self, step: int) -> float:
        """Clip, apply the optimizer and update the expert EMA; returns the VLM pre-clip norm."""
        cfg = self.cfg
        vlm_norm = grad_norm(self.store, self.vlm_names)
        if cfg.clip_scope == "global":
            clip_grad_norm(self.store, self.vlm_names + self.expert_names, cfg.clip)
        else:
            clip_grad_norm(self.store, self.vlm_names, cfg.clip)
            clip_grad_norm(self.store, self.expert_names, cfg.clip)
        self.opt.step(warmup_scale(step, cfg.warmup))
        self.ema.update(self.store)
        self.store.zero_grads()
        self.store.clear_slots()
        self.step_count = step
        return vlm_norm

    def vlm_state(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.store.items() if not n.startswith(EXPERT_PREFIX)}
