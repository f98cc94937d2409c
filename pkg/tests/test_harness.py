import json

import numpy as np
import pytest

from aegis import anchor as anchor_mod
from aegis import container, harness
from aegis.autograd import ParameterStore, Tensor
from aegis.config import PretrainConfig, TrainingConfig, from_ini, load_ini, to_ini
from aegis.isolation import make_groups
from aegis.models import ToyVLMConfig
from aegis.optim import EMA, AdamW, warmup_scale


def _cfg(**kw):
    base = TrainingConfig(
        model=ToyVLMConfig(num_layers=2, d_model=16, num_heads=2),
        steps=20, warmup=5, eval_every=10, ewc_samples=4,
        pretrain=PretrainConfig(max_steps=20, min_steps=0, eval_every=10, batch_size=8,
                                anchor_batches=2, anchor_batch_size=4),
    )
    return base.with_(**kw)


@pytest.fixture(scope="module")
def setup():
    cfg = _cfg()
    ckpt = harness.pretrain(cfg)
    return cfg, ckpt, harness.build_anchor_from_checkpoint(cfg, ckpt)


def test_pretrain_records_history(setup):
    cfg, ckpt, _ = setup
    assert ckpt.meta["steps"] == 20
    steps = [s for s, _ in ckpt.meta["history"]]
    assert steps == [0, 10, 20]
    assert ckpt.baseline_ce < ckpt.meta["initial_ce"]
    assert set(ckpt.state) == set(harness.Learner(cfg).vlm_names) | set(ckpt.state)


def test_zero_steps_reports_baseline_only(setup, tmp_path):
    cfg, ckpt, anchor = setup
    res = harness.train(cfg.with_(steps=0, warmup=0, condition="aegis"), ckpt, anchor, tmp_path / "r")
    assert res.summary["holdout_delta"] == 0.0
    assert res.summary["holdout_ce_initial"] == pytest.approx(ckpt.baseline_ce, rel=1e-5)
    assert len(res.evals) == 1 and len(res.metrics) == 1
    assert len((tmp_path / "r" / "metrics.csv").read_text().splitlines()) == 2


@pytest.mark.parametrize("condition", ["naive", "aegis", "ewc"])
def test_runs_are_byte_reproducible(setup, tmp_path, condition):
    cfg, ckpt, anchor = setup
    c = cfg.with_(condition=condition)
    a = harness.train(c, ckpt, anchor, tmp_path / "a")
    b = harness.train(c, ckpt, anchor, tmp_path / "b")
    for name in ("metrics.csv", "evals.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.summary["holdout_delta"] == b.summary["holdout_delta"]
    assert len(a.metrics) == cfg.steps + 1
    assert len(a.evals) == cfg.steps // cfg.eval_every + 1
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert s["schema_version"] == harness.SCHEMA_VERSION and s["condition"] == condition
    if condition == "aegis":
        rows = harness.read_csv(tmp_path / "a" / "projection.csv")
        n_groups = len(make_groups(harness.Learner(c, ckpt.state).vlm_names))
        assert len(rows) == cfg.steps * n_groups
        assert {r["group"] for r in rows} >= {"layer.0", "layer.1", "llm.lm_head"}
        assert len(harness.read_csv(tmp_path / "a" / "transport.csv")) == cfg.steps * cfg.model.num_layers


def test_different_seeds_differ(setup, tmp_path):
    cfg, ckpt, _ = setup
    a = harness.train(cfg.with_(seed=0), ckpt, None, tmp_path / "a")
    b = harness.train(cfg.with_(seed=1), ckpt, None, tmp_path / "b")
    assert a.summary["holdout_delta"] != b.summary["holdout_delta"]
    assert a.summary["holdout_sha256"] == b.summary["holdout_sha256"]


def test_compare_self_and_errors(setup, tmp_path):
    cfg, ckpt, _ = setup
    harness.train(cfg, ckpt, None, tmp_path / "a")
    cmp = harness.compare([tmp_path / "a", tmp_path / "a"], labels=["x", "y"])
    assert cmp.holdout["x"] == cmp.holdout["y"]
    assert cmp.deltas["x"] - cmp.deltas["y"] == 0.0
    assert cmp.steps == [0, 10, 20]
    cmp.write(tmp_path / "cmp.csv")
    assert len((tmp_path / "cmp.csv").read_text().splitlines()) == 4
    assert "x" in cmp.report()
    with pytest.raises(FileNotFoundError, match="does not exist"):
        harness.compare([tmp_path / "missing"])
    with pytest.raises(ValueError, match="distinct label"):
        harness.compare([tmp_path / "a", tmp_path / "a"])


def test_aegis_requires_anchor_and_matching_model(setup, tmp_path):
    cfg, ckpt, anchor = setup
    with pytest.raises(ValueError, match="requires an anchor"):
        harness.train(cfg.with_(condition="aegis"), ckpt, None, tmp_path / "r")
    other = cfg.with_(model=ToyVLMConfig(num_layers=3, d_model=16, num_heads=2))
    with pytest.raises(ValueError):
        harness.train(other.with_(condition="aegis"), ckpt, anchor, tmp_path / "r")
    with pytest.raises(ValueError, match="different model"):
        harness.train(other, ckpt, None, tmp_path / "r")


def test_checkpoint_and_anchor_roundtrip(setup, tmp_path):
    cfg, ckpt, anchor = setup
    harness.save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = harness.load_checkpoint(tmp_path / "c.ckpt", cfg.model)
    assert back.meta["holdout_sha256"] == ckpt.meta["holdout_sha256"]
    for k, v in ckpt.state.items():
        np.testing.assert_array_equal(back.state[k], v)
    with pytest.raises(ValueError, match="different model"):
        harness.load_checkpoint(tmp_path / "c.ckpt", ToyVLMConfig(num_layers=3, d_model=16, num_heads=2))
    with pytest.raises(container.ContainerError, match="kind"):
        anchor_mod.load(tmp_path / "c.ckpt")
    again = harness.build_anchor_from_checkpoint(cfg, back)
    for a, b in zip(anchor.mu0 + anchor.var0, again.mu0 + again.var0):
        np.testing.assert_array_equal(a, b)


def test_ini_roundtrip_and_unknown_key(tmp_path):
    cfg = _cfg(condition="ewc", seed=3, lr_vlm=2e-4)
    back = from_ini(to_ini(cfg))
    assert back == cfg
    (tmp_path / "c.ini").write_text(to_ini(cfg))
    assert load_ini(tmp_path / "c.ini") == cfg
    with pytest.raises(KeyError, match="unknown key"):
        from_ini("[train]\nbogus = 1\n")


def test_config_validation():
    with pytest.raises(ValueError, match="unknown condition"):
        TrainingConfig(condition="magic")
    with pytest.raises(ValueError, match="exceed warmup"):
        TrainingConfig(steps=10, warmup=10)
    with pytest.raises(ValueError, match="divide"):
        TrainingConfig(steps=100, warmup=5, eval_every=30)
    with pytest.raises(ValueError, match="positive"):
        TrainingConfig(lr_vlm=0.0)


def test_ema_is_geometric():
    s = ParameterStore()
    p = Tensor(np.zeros(3), requires_grad=True)
    s.add("w", p)
    ema = EMA(s, ["w"], decay=0.9)
    p.data[...] = 1.0
    for _ in range(10):
        ema.update(s)
    np.testing.assert_allclose(ema.shadow["w"], 1 - 0.9 ** 10, rtol=1e-12)


def _reference_adam(params, grads_per_step, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook per-parameter Adam; parameters without a gradient are skipped."""
    m = {n: np.zeros_like(p) for n, p in params.items()}
    v = {n: np.zeros_like(p) for n, p in params.items()}
    for t, grads in enumerate(grads_per_step, start=1):
        for n, g in grads.items():
            m[n] = b1 * m[n] + (1 - b1) * g
            v[n] = b2 * v[n] + (1 - b2) * g * g
            params[n] = params[n] - lr * (m[n] / (1 - b1 ** t)) / (np.sqrt(v[n] / (1 - b2 ** t)) + eps)
    return params


def test_adamw_matches_reference_with_missing_gradients():
    rng = np.random.default_rng(8)
    init = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4), "never": rng.normal(size=5)}
    s = ParameterStore()
    for n, v in init.items():
        s.add(n, Tensor(v.copy(), requires_grad=True))
    opt = AdamW(s, {"all": (list(init), 1e-2)})
    steps = []
    for t in range(6):
        # "b" stops receiving gradients halfway; "never" never gets one
        grads = {"a": rng.normal(size=(3, 2))}
        if t < 3:
            grads["b"] = rng.normal(size=4)
        steps.append(grads)
        for n in init:
            s[n].grad = grads.get(n)
        opt.step()
    want = _reference_adam({n: v.copy() for n, v in init.items()}, steps, 1e-2)
    for n in init:
        np.testing.assert_allclose(s[n].data, want[n], rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(s["never"].data, init["never"])


def test_warmup_schedule():
    assert [warmup_scale(s, 4) for s in (1, 2, 4, 9)] == [0.25, 0.5, 1.0, 1.0]


def test_run_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(harness.RUN_ROOT_ENV, str(tmp_path))
    assert harness.run_root() == tmp_path
