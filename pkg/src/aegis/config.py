"""Experiment configuration and its INI (``key = value`` with sections) form."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict

from .models import ExpertConfig, ToyVLMConfig
from .tasks import TaskConfig

CONDITIONS = ("naive", "stopgrad", "lora", "aegis", "ewc")


@dataclass(frozen=True)
class PretrainConfig:
    seed: int = 0
    max_steps: int = 3000
    min_steps: int = 1200
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 100
    clip: float = 1.0
    eval_every: int = 100
    target_frac: float = 0.5
    anchor_batches: int = 48
    anchor_batch_size: int = 8


@dataclass(frozen=True)
class TrainingConfig:
    condition: str = "naive"
    seed: int = 0
    steps: int = 1500
    warmup: int = 100
    lr_vlm: float = 1e-4
    lr_expert: float = 1e-4
    lr_vlm_stopgrad: float = 2.5e-5
    batch_size: int = 4
    grad_accum: int = 2
    clip: float = 1.0
    clip_scope: str = "global"
    weight_decay: float = 0.0
    fm_beta_a: float = 1.5
    fm_scale: float = 10.0
    eval_every: int = 20
    ema_decay: float = 0.9999
    # projection
    granularity: str = "layer_wise"
    proj_eps: float = 1e-6
    exempt_residual: bool = False
    # transport
    ot_eps: float = 1e-6
    ot_normalization: str = "mean"
    ot_scale: float = 1.0
    # lora
    lora_r: int = 16
    lora_alpha: float = 32.0
    # ewc
    ewc_lambda: float = 100.0
    ewc_samples: int = 64
    # stop-gradient discrete head
    n_bins: int = 256
    discrete_steps: int = 2
    discrete_head: bool = True
    # float32 for runs; gradient checks use float64
    precision: str = "float32"
    model: ToyVLMConfig = field(default_factory=ToyVLMConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")
        if self.steps < 0 or self.warmup < 0:
            raise ValueError("steps and warmup must be non-negative")
        if self.steps > 0 and self.steps <= self.warmup:
            raise ValueError("steps must exceed warmup")
        if self.eval_every <= 0 or self.steps % self.eval_every:
            raise ValueError("eval_every must divide steps")
        for k in ("lr_vlm", "lr_expert", "lr_vlm_stopgrad"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        if self.clip_scope not in ("global", "separate"):
            raise ValueError("clip_scope must be 'global' or 'separate'")
        if self.expert.horizon != self.task.horizon or self.expert.action_dim != self.task.action_dim:
            raise ValueError("expert and task disagree on horizon/action_dim")
        m, t = self.model, self.task
        if (m.vocab_size, m.max_seq_len, m.num_obs_tokens, m.d_obs) != \
                (t.vocab_size, t.max_seq_len, t.num_obs_tokens, t.d_obs):
            raise ValueError("model and task disagree on vocabulary/sequence/observation shape")

    @property
    def vlm_lr(self) -> float:
        return self.lr_vlm_stopgrad if self.condition == "stopgrad" else self.lr_vlm

    def with_(self, **kw) -> "TrainingConfig":
        return replace(self, **kw)


_NESTED = {"model": ToyVLMConfig, "expert": ExpertConfig, "task": TaskConfig,
           "pretrain": PretrainConfig}


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw.strip()


def _scalars(obj) -> Dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in _NESTED}


def to_ini(cfg: TrainingConfig) -> str:
    cp = configparser.ConfigParser()
    cp["train"] = {k: str(v) for k, v in _scalars(cfg).items()}
    for sec in _NESTED:
        cp[sec] = {k: str(v) for k, v in dataclasses.asdict(getattr(cfg, sec)).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def from_ini(text: str, base: TrainingConfig | None = None) -> TrainingConfig:
    """Parse INI text; missing keys keep the values of ``base`` (defaults)."""
    base = base or TrainingConfig()
    cp = configparser.ConfigParser()
    cp.read_string(text)
    nested = {}
    for sec, klass in _NESTED.items():
        cur = getattr(base, sec)
        if cp.has_section(sec):
            types = {f.name: f.type for f in fields(klass)}
            kw = {}
            for k, v in cp[sec].items():
                if k not in types:
                    raise KeyError(f"unknown key [{sec}] {k}")
                kw[k] = _coerce(types[k], v)
            cur = replace(cur, **kw)
        nested[sec] = cur
    kw = {}
    if cp.has_section("train"):
        types = {f.name: f.type for f in fields(TrainingConfig)}
        for k, v in cp["train"].items():
            if k not in types or k in _NESTED:
                raise KeyError(f"unknown key [train] {k}")
            kw[k] = _coerce(types[k], v)
    return replace(base, **nested, **kw)


def load_ini(path) -> TrainingConfig:
    with open(path) as fh:
        return from_ini(fh.read())
