"""Experiment driver: pretraining, anchor construction, condition runs, comparison.

A run directory holds::

    config.ini       full effective configuration
    metrics.csv      one row per optimisation step (plus the step-0 baseline)
    evals.csv        holdout CE and fixed-set FM error every ``eval_every`` steps
    projection.csv   per-group projection records (aegis only)
    transport.csv    per-layer W2 terms (aegis only)
    summary.json     final deltas, holdout hash, timing
    final.ckpt       VLM weights after training

Everything except ``summary.json`` is a pure function of the configuration, so
two runs with one config are byte-identical.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import anchor as anchor_mod
from . import container
from .autograd import backward, precision
from .baselines import estimate_fisher, ewc_step, naive_step, stopgrad_step
from .config import CONDITIONS, TrainingConfig, to_ini
from .flow import FlowNoise, fm_mse
from .isolation import run_step
from .models import ToyVLM, build_store, model_fingerprint
from .optim import AdamW, clip_grad_norm, warmup_scale
from .tasks import gen_actions, gen_pretrain, make_holdout, eval_holdout, pretrain_ce
from .trainer import Learner

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRIC_COLUMNS = ("step", "fm_loss_raw", "holdout_ce", "ot_penalty", "throttle", "energy_shed",
                  "avg_cos", "avg_alpha", "preclip_norm")
EVAL_COLUMNS = ("step", "holdout_ce", "fm_eval_raw", "fm_eval_ema")
PROJECTION_COLUMNS = ("step", "group", "dot", "ot_sq", "task_sq", "cos", "alpha", "applied")
RUN_ROOT_ENV = "AEGIS_RUN_ROOT"

ANCHOR_SEED_OFFSET = 3_000_017
FM_EVAL_SEED_OFFSET = 4_000_037
FM_EVAL_SIZE = 32


class DivergenceError(RuntimeError):
    pass


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _check_finite(name: str, value: float, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{name} is {value} at step {step}; aborting")


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------
@dataclass
class Checkpoint:
    state: Dict[str, np.ndarray]
    meta: Dict

    @property
    def baseline_ce(self) -> float:
        return float(self.meta["holdout_ce"])


def pretrain(cfg: TrainingConfig) -> Checkpoint:
    """Train the toy VLM on the CE task until the holdout target or the step budget.

    The target is ``target_frac * ln V`` nats; training continues to at least
    ``min_steps`` so the model is well inside its CE basin before fine-tuning.
    """
    pc = cfg.pretrain
    V = cfg.model.vocab_size
    target = pc.target_frac * math.log(V)
    with precision(cfg.precision):
        model = ToyVLM(cfg.model, seed=pc.seed)
        store = build_store(("", model))
        names = store.trainable()
        opt = AdamW(store, {"all": (names, pc.lr)})
        holdout = make_holdout(cfg.task, pc.seed)
        history = [(0, eval_holdout(model, holdout))]
        step = 0
        for step in range(1, pc.max_steps + 1):
            batch = gen_pretrain(cfg.task, pc.seed, pc.batch_size, start=(step - 1) * pc.batch_size)
            store.zero_grads()
            loss = pretrain_ce(model, batch)
            _check_finite("pretrain loss", loss.item(), step)
            backward(loss)
            clip_grad_norm(store, names, pc.clip)
            opt.step(warmup_scale(step, pc.warmup))
            if step % pc.eval_every == 0:
                ce = eval_holdout(model, holdout)
                history.append((step, ce))
                log.info("pretrain step %d holdout CE %.4f", step, ce)
                if step >= pc.min_steps and ce <= target:
                    break
        if history[-1][0] != step:
            history.append((step, eval_holdout(model, holdout)))
        state = {n: store[n].data.astype(np.float64) for n in names}
    meta = {
        "model_fingerprint": model_fingerprint(cfg.model),
        "seed": pc.seed,
        "steps": step,
        "holdout_ce": history[-1][1],
        "initial_ce": history[0][1],
        "target_ce": target,
        "reached_target": history[-1][1] <= target,
        "holdout_sha256": holdout.sha256(),
        "history": history,
    }
    return Checkpoint(state, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    return container.save(path, "checkpoint", ckpt.state, ckpt.meta)


def load_checkpoint(path, model_cfg=None) -> Checkpoint:
    manifest, arrs = container.load(path, "checkpoint")
    meta = manifest["meta"]
    if model_cfg is not None and meta.get("model_fingerprint") != model_fingerprint(model_cfg):
        raise ValueError(f"checkpoint {path} was built for a different model configuration")
    return Checkpoint(dict(arrs), meta)


def anchor_batches(cfg: TrainingConfig, data_seed: int):
    pc = cfg.pretrain
    for i in range(pc.anchor_batches):
        yield gen_pretrain(cfg.task, data_seed + ANCHOR_SEED_OFFSET, pc.anchor_batch_size,
                           start=i * pc.anchor_batch_size)


def build_anchor_from_checkpoint(cfg: TrainingConfig, ckpt: Checkpoint, data_seed: int = 0,
                                 mode: str = "batch_mean") -> anchor_mod.AnchorStatistics:
    """Per-layer statistics of the pretrained model on fresh pretraining-distribution batches."""
    model = ToyVLM(cfg.model, seed=cfg.pretrain.seed)
    build_store(("", model)).load_state(ckpt.state)
    return anchor_mod.build_anchor(model, anchor_batches(cfg, data_seed), mode,
                                   meta={"data_seed": data_seed,
                                         "batches": cfg.pretrain.anchor_batches,
                                         "batch_size": cfg.pretrain.anchor_batch_size})


# ---------------------------------------------------------------------------
# condition runs
# ---------------------------------------------------------------------------
@dataclass
class RunResult:
    run_dir: Path
    summary: Dict
    metrics: List[Dict] = field(default_factory=list)
    evals: List[Dict] = field(default_factory=list)


class _FMEval:
    """Fixed action batch and noise: FM error of the raw and the EMA expert."""

    def __init__(self, learner: Learner):
        cfg = learner.cfg
        self.batch = gen_actions(cfg.task, cfg.seed + FM_EVAL_SEED_OFFSET, FM_EVAL_SIZE).trimmed()
        self.noise = FlowNoise.draw(np.random.default_rng([cfg.seed, FM_EVAL_SEED_OFFSET]),
                                    self.batch.actions.shape, cfg.fm_beta_a)
        self.learner = learner

    def _mse(self) -> float:
        from .autograd import no_grad
        L, b = self.learner, self.batch
        with no_grad():
            out = L.model(b.tokens, b.obs, b.mask, compute_logits=False)
            return fm_mse(L.expert, out.last_hidden, b.mask, b.actions, self.noise).item()

    def __call__(self):
        raw = self._mse()
        store, ema = self.learner.store, self.learner.ema
        saved = {n: store[n].data.copy() for n in ema.names}
        for n in ema.names:
            store[n].data[...] = ema.shadow[n]
        try:
            ema_val = self._mse()
        finally:
            for n in ema.names:
                store[n].data[...] = saved[n]
        return raw, ema_val


def _open_csv(path: Path, columns):
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    return fh, w


def train(cfg: TrainingConfig, checkpoint: Checkpoint, anchor=None, run_dir=None) -> RunResult:
    """Fine-tune the pretrained VLM plus a fresh expert under ``cfg.condition``."""
    if cfg.condition == "aegis" and anchor is None:
        raise ValueError("the aegis condition requires an anchor")
    if anchor is not None:
        anchor.check_model(cfg.model)
    if checkpoint.meta.get("model_fingerprint") not in (None, model_fingerprint(cfg.model)):
        raise ValueError("checkpoint was built for a different model configuration")
    run_dir = Path(run_dir) if run_dir is not None else run_root() / f"{cfg.condition}-s{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(to_ini(cfg))

    with precision(cfg.precision):
        return _train(cfg, checkpoint, anchor, run_dir)


def _train(cfg, checkpoint, anchor, run_dir: Path) -> RunResult:
    learner = Learner(cfg, checkpoint.state)
    holdout = make_holdout(cfg.task, cfg.pretrain.seed)
    fm_eval = _FMEval(learner)
    fisher = anchor_params = None
    if cfg.condition == "ewc":
        fisher = estimate_fisher(learner.model, cfg.task, cfg.pretrain.seed, cfg.ewc_samples,
                                 names=learner.vlm_names)
        anchor_params = {n: learner.store[n].data.copy() for n in learner.vlm_names}

    def one_step(step):
        c = cfg.condition
        if c == "aegis":
            rep = run_step(learner, step, anchor)
            return rep.fm_loss_raw, rep.preclip_norm, rep
        if c == "stopgrad":
            m = stopgrad_step(learner, step)
        elif c == "ewc":
            m = ewc_step(learner, step, fisher, anchor_params)
        else:
            m = naive_step(learner, step)
        return m.fm_loss_raw, m.preclip_norm, None

    metrics_fh, mw = _open_csv(run_dir / "metrics.csv", METRIC_COLUMNS)
    evals_fh, ew = _open_csv(run_dir / "evals.csv", EVAL_COLUMNS)
    proj_fh = trans_fh = None
    if cfg.condition == "aegis":
        proj_fh, pw = _open_csv(run_dir / "projection.csv", PROJECTION_COLUMNS)
        trans_fh, tw = _open_csv(run_dir / "transport.csv", ("step", "layer", "w2"))
    metrics, evals, step_times = [], [], []
    try:
        ce0 = eval_holdout(learner.model, holdout)
        fm0, fm0_ema = fm_eval()
        evals.append({"step": 0, "holdout_ce": ce0, "fm_eval_raw": fm0, "fm_eval_ema": fm0_ema})
        ew.writerow([_fmt(v) for v in evals[-1].values()])
        metrics.append({"step": 0, "holdout_ce": ce0})
        mw.writerow([_fmt(metrics[-1].get(c)) for c in METRIC_COLUMNS])
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            fm_raw, norm, rep = one_step(step)
            step_times.append(time.perf_counter() - t0)
            _check_finite("flow-matching loss", fm_raw, step)
            row = {"step": step, "fm_loss_raw": fm_raw, "preclip_norm": norm}
            if rep is not None:
                _check_finite("transport penalty", rep.ot_penalty, step)
                row.update(ot_penalty=rep.ot_penalty, throttle=rep.throttle_rate,
                           energy_shed=rep.energy_shed_ratio, avg_cos=rep.avg_cos,
                           avg_alpha=rep.avg_alpha)
                for g in rep.groups:
                    pw.writerow([step, g.gid, _fmt(g.dot), _fmt(g.ot_sq), _fmt(g.task_sq),
                                 _fmt(g.cos), _fmt(g.alpha), _fmt(g.applied)])
                for i, w2 in enumerate(rep.ot_layers):
                    tw.writerow([step, i, _fmt(w2)])
            if step % cfg.eval_every == 0:
                ce = eval_holdout(learner.model, holdout)
                _check_finite("holdout CE", ce, step)
                fm, fm_ema = fm_eval()
                row["holdout_ce"] = ce
                evals.append({"step": step, "holdout_ce": ce, "fm_eval_raw": fm, "fm_eval_ema": fm_ema})
                ew.writerow([_fmt(v) for v in evals[-1].values()])
            metrics.append(row)
            mw.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
    finally:
        for fh in (metrics_fh, evals_fh, proj_fh, trans_fh):
            if fh is not None:
                fh.close()

    container.save(run_dir / "final.ckpt", "checkpoint", learner.vlm_state(),
                   {"model_fingerprint": model_fingerprint(cfg.model), "condition": cfg.condition,
                    "seed": cfg.seed, "steps": cfg.steps})
    final = evals[-1]
    summary = {
        "schema_version": SCHEMA_VERSION,
        "condition": cfg.condition,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "holdout_sha256": holdout.sha256(),
        "holdout_ce_initial": ce0,
        "holdout_ce_final": final["holdout_ce"],
        "holdout_delta": final["holdout_ce"] - ce0,
        "fm_eval_initial": fm0,
        "fm_eval_final": final["fm_eval_raw"],
        "fm_eval_ema_final": final["fm_eval_ema"],
        "fm_reduction": 1.0 - final["fm_eval_raw"] / fm0 if fm0 > 0 else 0.0,
        "mean_step_seconds": float(np.mean(step_times)) if step_times else 0.0,
        "median_step_seconds": float(np.median(step_times)) if step_times else 0.0,
        "trainable_vlm_params": int(sum(learner.store[n].size for n in learner.vlm_names)),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return RunResult(run_dir, summary, metrics, evals)


# ---------------------------------------------------------------------------
# reading runs back
# ---------------------------------------------------------------------------
def read_csv(path) -> List[Dict[str, float]]:
    """Rows of a run CSV with numeric fields parsed (empty cells become None)."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if v == "":
                    row[k] = None
                else:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            rows.append(row)
    return rows


def load_run(run_dir) -> Dict:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    for name in ("summary.json", "evals.csv", "metrics.csv"):
        if not (run_dir / name).exists():
            raise FileNotFoundError(f"run directory {run_dir} has no {name}")
    return {"dir": run_dir,
            "summary": json.loads((run_dir / "summary.json").read_text()),
            "evals": read_csv(run_dir / "evals.csv")}


@dataclass
class Comparison:
    labels: List[str]
    steps: List[int]
    holdout: Dict[str, List[Optional[float]]]
    fm_eval: Dict[str, List[Optional[float]]]
    deltas: Dict[str, float]
    fm_reduction: Dict[str, float]

    def table(self) -> List[List[str]]:
        head = ["step"] + [f"{l}:holdout_ce" for l in self.labels] + [f"{l}:fm_eval" for l in self.labels]
        rows = [head]
        for i, s in enumerate(self.steps):
            rows.append([str(s)] + [_fmt(self.holdout[l][i]) for l in self.labels]
                        + [_fmt(self.fm_eval[l][i]) for l in self.labels])
        return rows

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.table())

    def report(self) -> str:
        lines = [f"{'run':<24}{'delta_holdout_ce':>18}{'fm_reduction':>14}"]
        for l in self.labels:
            lines.append(f"{l:<24}{self.deltas[l]:>18.5f}{self.fm_reduction[l]:>14.3f}")
        return "\n".join(lines)


def compare(run_dirs: Sequence, labels: Optional[Sequence[str]] = None) -> Comparison:
    """Align holdout-CE and FM trajectories of several runs on their eval steps."""
    runs = [load_run(d) for d in run_dirs]
    if labels is None:
        labels = [Path(r["dir"]).name for r in runs]
    labels = list(labels)
    if len(labels) != len(runs) or len(set(labels)) != len(labels):
        raise ValueError("need one distinct label per run")
    steps = sorted({int(e["step"]) for r in runs for e in r["evals"]})
    holdout, fm = {}, {}
    for l, r in zip(labels, runs):
        by = {int(e["step"]): e for e in r["evals"]}
        holdout[l] = [by[s]["holdout_ce"] if s in by else None for s in steps]
        fm[l] = [by[s]["fm_eval_raw"] if s in by else None for s in steps]
    deltas = {l: r["summary"]["holdout_delta"] for l, r in zip(labels, runs)}
    red = {l: r["summary"]["fm_reduction"] for l, r in zip(labels, runs)}
    return Comparison(labels, steps, holdout, fm, deltas, red)


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------
@dataclass
class SuiteResult:
    root: Path
    runs: Dict[str, List[RunResult]]
    holdout_sha256: str
    wall_seconds: float
    pretrain_seconds: float

    def deltas(self, condition: str) -> np.ndarray:
        return np.array([r.summary["holdout_delta"] for r in self.runs[condition]])


def run_suite(base: TrainingConfig, root, conditions: Sequence[str] = CONDITIONS,
              seeds: Sequence[int] = (0, 1, 2), checkpoint: Optional[Checkpoint] = None,
              anchor=None) -> SuiteResult:
    """Pretrain (unless given), build the anchor, then run every condition for every seed."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if checkpoint is None:
        checkpoint = pretrain(base)
        save_checkpoint(checkpoint, root / "pretrained.ckpt")
    if anchor is None and "aegis" in conditions:
        anchor = build_anchor_from_checkpoint(base, checkpoint, data_seed=base.pretrain.seed)
        anchor_mod.save(anchor, root / "anchor.bin")
    t_pre = time.perf_counter() - t0
    runs: Dict[str, List[RunResult]] = {c: [] for c in conditions}
    hashes = set()
    for seed in seeds:
        for cond in conditions:
            cfg = base.with_(condition=cond, seed=seed)
            res = train(cfg, checkpoint, anchor if cond == "aegis" else None,
                        root / f"{cond}-s{seed}")
            hashes.add(res.summary["holdout_sha256"])
            runs[cond].append(res)
            log.info("%s seed %d: delta %.4f", cond, seed, res.summary["holdout_delta"])
    if len(hashes) != 1:
        raise RuntimeError(f"holdout sets differ across runs: {sorted(hashes)}")
    return SuiteResult(root, runs, hashes.pop(), time.perf_counter() - t0, t_pre)
