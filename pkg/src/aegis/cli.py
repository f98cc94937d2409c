"""Command-line entry point (``aegis``)."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import anchor as anchor_mod
from . import container, diagnostics, harness
from .autograd import precision
from .config import CONDITIONS, TrainingConfig, from_ini, load_ini
from .models import ToyVLM, build_store
from .tasks import gen_actions, gen_pretrain

DIAG_SEED_OFFSET = 5_000_011


def _base_config(args) -> TrainingConfig:
    cfg = load_ini(args.config) if getattr(args, "config", None) else TrainingConfig()
    overrides = getattr(args, "set", None) or []
    if overrides:
        sections = {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise SystemExit(f"--set expects section.key=value, got {item!r}")
            sec, _, k = key.rpartition(".")
            sections.setdefault(sec or "train", []).append(f"{k} = {value}")
        text = "\n".join(f"[{s}]\n" + "\n".join(lines) for s, lines in sections.items())
        cfg = from_ini(text, cfg)
    return cfg


def _add_config(p):
    p.add_argument("--config", help="INI file with [train]/[model]/[expert]/[task]/[pretrain] sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (section defaults to train)")


# ---------------------------------------------------------------------------
def cmd_pretrain(args) -> int:
    cfg = _base_config(args)
    ckpt = harness.pretrain(cfg)
    digest = harness.save_checkpoint(ckpt, args.out)
    m = ckpt.meta
    print(f"pretrained {m['steps']} steps: holdout CE {m['initial_ce']:.4f} -> {m['holdout_ce']:.4f} "
          f"(target {m['target_ce']:.4f}, reached={m['reached_target']})")
    print(f"checkpoint {args.out} sha256 {digest}")
    return 0


def cmd_anchor_build(args) -> int:
    cfg = _base_config(args)
    ckpt = harness.load_checkpoint(args.model, cfg.model)
    anc = harness.build_anchor_from_checkpoint(cfg, ckpt, args.data_seed, args.mode)
    digest = anchor_mod.save(anc, args.out)
    print(f"anchor over {anc.meta['n_samples']} samples, {anc.num_layers} layers -> {args.out} ({digest})")
    return 0


def cmd_train(args) -> int:
    cfg = _base_config(args).with_(condition=args.condition)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if args.steps is not None:
        cfg = cfg.with_(steps=args.steps)
    ckpt = harness.load_checkpoint(args.checkpoint, cfg.model)
    anc = anchor_mod.load(args.anchor, cfg.model) if args.anchor else None
    if cfg.condition == "aegis" and anc is None:
        raise SystemExit("train: --anchor is required for the aegis condition")
    res = harness.train(cfg, ckpt, anc if cfg.condition == "aegis" else None, args.run_dir)
    s = res.summary
    print(f"{cfg.condition} seed {cfg.seed}: holdout CE {s['holdout_ce_initial']:.4f} -> "
          f"{s['holdout_ce_final']:.4f} (delta {s['holdout_delta']:+.4f}), "
          f"FM {s['fm_eval_initial']:.4f} -> {s['fm_eval_final']:.4f}; run dir {res.run_dir}")
    return 0


def cmd_compare(args) -> int:
    comp = harness.compare(args.runs, args.labels)
    print(comp.report())
    if args.out:
        comp.write(args.out)
    return 0


def cmd_suite(args) -> int:
    cfg = _base_config(args)
    if args.steps is not None:
        cfg = cfg.with_(steps=args.steps)
    root = Path(args.root) if args.root else harness.run_root() / "suite"
    ckpt = harness.load_checkpoint(args.checkpoint, cfg.model) if args.checkpoint else None
    res = harness.run_suite(cfg, root, args.conditions, args.seeds, checkpoint=ckpt)
    print(f"suite finished in {res.wall_seconds:.1f}s (holdout sha256 {res.holdout_sha256[:16]})")
    for c, runs in res.runs.items():
        d = res.deltas(c)
        print(f"{c:<10} delta mean {d.mean():+.4f} std {d.std():.4f}")
    return 0


# ---------------------------------------------------------------------------
def _diag_learner(cfg: TrainingConfig, ckpt_path, expert_steps: int):
    """Learner at the pretrained weights with an expert trained on frozen features."""
    from .baselines import stopgrad_step
    from .trainer import Learner

    ckpt = harness.load_checkpoint(ckpt_path, cfg.model)
    learner = Learner(cfg.with_(condition="stopgrad", discrete_head=False), ckpt.state)
    for step in range(1, expert_steps + 1):
        stopgrad_step(learner, step)
    return learner


def cmd_diag_spectrum(args) -> int:
    cfg = _base_config(args)
    with precision("float64"):
        learner = _diag_learner(cfg, args.checkpoint, args.expert_steps)
        seed = cfg.seed + DIAG_SEED_OFFSET
        ce_batch = gen_pretrain(cfg.task, seed, args.batch)
        mse_batch = gen_actions(cfg.task, seed, args.batch)
        layers = args.layer or diagnostics.down_proj_names(cfg.model.num_layers)
        rows = []
        for name in layers:
            k_ce, k_mse = diagnostics.spectral_asymmetry(learner, ce_batch, mse_batch, name, args.k)
            rows.append((name, k_ce, k_mse))
            print(f"{name}: kappa_{args.k} CE {k_ce:.4f}  MSE {k_mse:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", f"kappa{args.k}_ce", f"kappa{args.k}_mse", "batch_seed", "batch_size",
                        "expert_steps"])
            for name, a, b in rows:
                w.writerow([name, repr(a), repr(b), seed, args.batch, args.expert_steps])
    return 0


def cmd_diag_conflict(args) -> int:
    cfg = _base_config(args)
    with precision("float64"):
        learner = _diag_learner(cfg, args.checkpoint, args.expert_steps)
        anc = anchor_mod.load(args.anchor, cfg.model)
        hist = diagnostics.conflict_at(learner, anc, args.param, bins=args.bins)
    print(f"{args.param}: {len(hist.cosines)} rows, mean cos {hist.cosines.mean():+.4f}, "
          f"negative fraction {(hist.cosines < 0).mean():.3f}")
    for lo, hi, n in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
        print(f"  [{lo:+.2f}, {hi:+.2f}) {n}")
    if args.out:
        hist.write_csv(args.out)
    return 0


def cmd_diag_drift(args) -> int:
    cfg = _base_config(args)
    batch = gen_pretrain(cfg.task, cfg.seed + DIAG_SEED_OFFSET, args.samples)

    def states(path):
        _, arrs = container.load(path, "checkpoint")
        model = ToyVLM(cfg.model, seed=cfg.pretrain.seed)
        build_store(("", model)).load_state(dict(arrs))
        return diagnostics.pooled_states(model, batch)

    proj = diagnostics.drift_projection(states(args.base), states(args.naive),
                                        states(args.aegis) if args.aegis else None)
    for label in proj.coords:
        x, y = proj.mean(label)
        print(f"{label:<6} mean drift-axis {x:+.4f}  pc-axis {y:+.4f}")
    if args.out:
        proj.write_csv(args.out)
    return 0


def cmd_diag_summarize(args) -> int:
    table = diagnostics.summarize(args.metrics)
    print(f"{'column':<14}{'mean':>12}{'std':>12}{'min':>12}{'max':>12}{'n':>7}")
    for c, s in table.items():
        print(f"{c:<14}{s['mean']:>12.5g}{s['std']:>12.5g}{s['min']:>12.5g}{s['max']:>12.5g}{s['count']:>7}")
    if args.out:
        diagnostics.write_summary(table, args.out)
    return 0


# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aegis", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain the toy VLM on the CE task")
    _add_config(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("anchor", help="anchor statistics")
    asub = p.add_subparsers(dest="anchor_command", required=True)
    b = asub.add_parser("build", help="build an anchor from a pretrained checkpoint")
    _add_config(b)
    b.add_argument("--model", required=True, help="pretrained checkpoint")
    b.add_argument("--data-seed", type=int, default=0)
    b.add_argument("--mode", choices=anchor_mod.MODES, default="batch_mean")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_anchor_build)

    p = sub.add_parser("train", help="fine-tune under one condition")
    _add_config(p)
    p.add_argument("--condition", choices=CONDITIONS, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--anchor")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--run-dir", help=f"default: ${harness.RUN_ROOT_ENV}/<condition>-s<seed>")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="align holdout/FM trajectories of runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", help="CSV of the aligned table")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("suite", help="pretrain, anchor, and every condition for several seeds")
    _add_config(p)
    p.add_argument("--root")
    p.add_argument("--checkpoint", help="reuse a pretrained checkpoint")
    p.add_argument("--conditions", nargs="+", choices=CONDITIONS, default=list(CONDITIONS))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("diag", help="offline diagnostics")
    dsub = p.add_subparsers(dest="diag_command", required=True)
    d = dsub.add_parser("spectrum", help="kappa_k of CE vs flow-matching gradients")
    _add_config(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--layer", action="append", help="parameter name (default: every down_proj)")
    d.add_argument("--k", type=int, default=20)
    d.add_argument("--batch", type=int, default=32)
    d.add_argument("--expert-steps", type=int, default=100)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diag_spectrum)

    d = dsub.add_parser("conflict", help="per-row task/anchor gradient cosines")
    _add_config(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--anchor", required=True)
    d.add_argument("--param", default="llm.layers.2.mlp.down_proj.weight")
    d.add_argument("--bins", type=int, default=20)
    d.add_argument("--expert-steps", type=int, default=100)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diag_conflict)

    d = dsub.add_parser("drift", help="project pooled states onto the base-to-naive drift axis")
    _add_config(d)
    d.add_argument("--base", required=True, help="pretrained checkpoint")
    d.add_argument("--naive", required=True, help="final.ckpt of a naive run")
    d.add_argument("--aegis", help="final.ckpt of an aegis run")
    d.add_argument("--samples", type=int, default=200)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diag_drift)

    d = dsub.add_parser("summarize", help="mean/std/min/max of a run's diagnostics")
    d.add_argument("metrics", help="metrics.csv of a run")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diag_summarize)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError, container.ContainerError) as exc:
        print(f"aegis: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
