import math

import numpy as np
import pytest

from aegis.anchor import build_anchor
from aegis.autograd import backward
from aegis.config import PretrainConfig, TrainingConfig
from aegis.isolation import (GRANULARITIES, dual_backward, energy_identity_residual, group_geometry,
                             make_groups, project, project_all, run_step)
from aegis.models import ExpertConfig, ToyVLMConfig
from aegis.trainer import Learner
from aegis.transport import total_penalty
from oracles import projection_checks, random_fixture, rel_err, slot_store

EPS = 1e-12


def _single(task, ot, eps=EPS):
    store = slot_store({"w": np.asarray(task, float)}, {"w": np.asarray(ot, float)})
    group = make_groups(["w"], "per_tensor")[0]
    return project(group, store, eps), store["w"].grad


def test_geometry_hand_examples():
    store = slot_store({"w": np.array([1.0, 0.0])}, {"w": np.array([-1.0, 1.0])})
    d, n, cos, tt = group_geometry(make_groups(["w"], "global")[0], store, EPS)
    assert (d, n, tt) == (-1.0, 2.0, 1.0)
    assert cos == pytest.approx(-1 / math.sqrt(2), rel=1e-11)
    rec, g = _single([1.0, 0.0], [0.0, 1.0])
    assert rec.dot == 0.0 and rec.cos == 0.0 and not rec.applied
    rec, _ = _single([0.3, 0.4], [0.3, 0.4])
    assert rec.cos == pytest.approx(1.0, abs=1e-10)


def test_projection_hand_example():
    rec, g = _single([1.0, 0.0], [-1.0, 1.0])
    assert rec.applied and rec.alpha == pytest.approx(-0.5, rel=1e-11)
    np.testing.assert_allclose(g, [0.5, 0.5], rtol=1e-11)
    assert abs(g @ np.array([-1.0, 1.0])) < 1e-11


def test_antiparallel_annihilation():
    v = np.array([0.2, -1.0, 3.0])
    rec, g = _single(v, -v)
    assert rec.alpha == pytest.approx(-1.0, abs=1e-10)
    assert np.linalg.norm(g) < 1e-10 * np.linalg.norm(v)
    assert energy_identity_residual(rec) < 1e-9


def test_aligned_group_passes_through_bitwise():
    t = np.array([0.1, 0.7, -0.2])
    rec, g = _single(t, t + np.array([0.0, 0.1, 0.0]))
    assert not rec.applied and rec.alpha == 0.0
    assert g is not t and np.array_equal(g, t)


def test_zero_ot_gradient_never_projects():
    rec, g = _single([1.0, -2.0], [0.0, 0.0])
    assert not rec.applied and rec.inert and rec.cos == 0.0
    np.testing.assert_array_equal(g, [1.0, -2.0])


@pytest.mark.parametrize("granularity", GRANULARITIES)
def test_projection_properties_on_random_fixtures(granularity):
    rng = np.random.default_rng(["global", "per_tensor", "layer_wise"].index(granularity))
    failures = {k: 0 for k in "abcde"}
    applied = passed = 0
    for _ in range(1000):
        task, ot = random_fixture(rng)
        ok, rep = projection_checks(task, ot, granularity, EPS)
        for k, v in ok.items():
            failures[k] += not v
        applied += len(rep.applied)
        passed += len(rep.groups) - len(rep.applied)
    assert failures == dict.fromkeys("abcde", 0)
    assert applied > 100 and passed > 100


def _loophole_fixture():
    names = ["llm.layers.0.mlp.weight", "llm.layers.1.mlp.weight"]
    task = {names[0]: np.array([1.0, 0.0]), names[1]: np.array([1.0, 0.0])}
    ot = {names[0]: np.array([1.0, 1.0]), names[1]: np.array([-1.0, 1.0])}
    return names, task, ot


def test_zero_sum_loophole():
    names, task, ot = _loophole_fixture()
    store = slot_store(task, ot)
    glob = project_all(make_groups(names, "global"), store, EPS)
    assert [g.dot for g in glob.groups] == [0.0]
    assert glob.applied == [] and glob.throttle_rate == 0.0
    # the layer-1 interference survives untouched
    np.testing.assert_array_equal(store[names[1]].grad, task[names[1]])

    store = slot_store(task, ot)
    lw = project_all(make_groups(names, "layer_wise"), store, EPS)
    assert [g.gid for g in lw.groups] == ["layer.0", "layer.1"]
    assert [g.dot for g in lw.groups] == [1.0, -1.0]
    assert lw.applied == ["layer.1"] and lw.throttle_rate == 0.5
    np.testing.assert_array_equal(store[names[0]].grad, task[names[0]])
    np.testing.assert_allclose(store[names[1]].grad, [0.5, 0.5], rtol=1e-11)


def test_make_groups_partition():
    names = ["llm.embed_tokens.weight",
             "llm.layers.0.self_attn.q_proj.weight", "llm.layers.0.input_layernorm.weight",
             "llm.layers.0.mlp.down_proj.weight", "llm.layers.10.mlp.up_proj.weight",
             "llm.norm.weight", "llm.norm.bias", "mm_projector.weight", "mm_projector.bias"]
    lw = make_groups(names, "layer_wise")
    assert {g.gid: g.members for g in lw} == {
        "llm.embed_tokens": ["llm.embed_tokens.weight"],
        "layer.0": names[1:4],
        "layer.10": ["llm.layers.10.mlp.up_proj.weight"],
        "llm.norm": ["llm.norm.weight", "llm.norm.bias"],
        "mm_projector": ["mm_projector.weight", "mm_projector.bias"],
    }
    for gran in GRANULARITIES:
        members = [n for g in make_groups(names, gran) for n in g.members]
        assert sorted(members) == sorted(names)
    assert len(make_groups(names, "per_tensor")) == len(names)
    assert len(make_groups(names, "global")) == 1
    ex = make_groups(names, "layer_wise", exempt_residual=True)
    assert {g.gid for g in ex if g.exempt} == {"llm.embed_tokens", "llm.norm", "mm_projector"}
    with pytest.raises(ValueError, match="unknown granularity"):
        make_groups(names, "per_neuron")


def test_exempt_group_passes_through():
    store = slot_store({"mm_projector.weight": np.array([1.0, 0.0])},
                       {"mm_projector.weight": np.array([-1.0, 1.0])})
    rep = project_all(make_groups(["mm_projector.weight"], exempt_residual=True), store, EPS)
    assert rep.applied == [] and rep.groups[0].inert
    np.testing.assert_array_equal(store["mm_projector.weight"].grad, [1.0, 0.0])


def test_overlapping_groups_rejected():
    names, task, ot = _loophole_fixture()
    g = make_groups(names, "per_tensor")
    with pytest.raises(ValueError, match="more than one group"):
        project_all(g + g[:1], slot_store(task, ot), EPS)


def test_report_aggregates():
    names, task, ot = _loophole_fixture()
    rep = project_all(make_groups(names, "layer_wise"), slot_store(task, ot), EPS)
    assert rep.avg_alpha == pytest.approx(-0.5)
    assert rep.avg_cos == pytest.approx(0.0, abs=1e-11)
    # ||g_final||^2 = 1 + 0.5 vs ||g_task||^2 = 2
    assert rep.energy_shed_ratio == pytest.approx(0.25)


# ---------------------------------------------------------------------------
# end-to-end on a small learner
# ---------------------------------------------------------------------------
def small_config(**kw):
    model = ToyVLMConfig(num_layers=2, d_model=16, num_heads=2)
    base = dict(condition="aegis", model=model, expert=ExpertConfig(d_expert=16, num_heads=2),
                steps=20, warmup=5, eval_every=10, precision="float64",
                pretrain=PretrainConfig(anchor_batches=2, anchor_batch_size=4))
    base.update(kw)
    return TrainingConfig(**base)


def learner_with_anchor(cfg, perturb=0.02):
    learner = Learner(cfg)
    batches = [learner.micro_batches(1000 + i)[0] for i in range(2)]
    anchor = build_anchor(learner.model, batches)
    rng = np.random.default_rng(cfg.seed + 5)
    for n in learner.vlm_names:
        learner.store[n].data += perturb * rng.normal(size=learner.store[n].shape)
    return learner, anchor


def dual_backward_error(learner, anchor, step):
    """Max per-tensor relative error of task + ot slots vs one backward of the summed loss."""
    store = learner.store
    batch = learner.micro_batches(step)[0].trimmed()
    noise = learner.noise(step, 0, batch)
    l_fm, _, out, mask = learner.fm_forward(batch, noise, capture=True)
    l_ot, _ = total_penalty(out.hidden, mask, anchor)
    dual_backward(l_fm, l_ot, store, learner.vlm_names)
    split = {n: store.slot("task", n) + (store.slot("ot", n) if store.has_slot("ot", n) else 0.0)
             for n in store.trainable()}
    assert not any(store.has_slot("ot", n) for n in learner.expert_names)
    assert all(not store.grad(n).any() for n in store.trainable())
    store.clear_slots()
    l_fm, _, out, mask = learner.fm_forward(batch, noise, capture=True)
    l_ot, _ = total_penalty(out.hidden, mask, anchor)
    backward(l_fm + l_ot)
    worst = 0.0
    for n, g in split.items():
        ref = store.grad(n)
        scale = max(float(np.max(np.abs(ref))), 1e-300)
        worst = max(worst, float(np.max(np.abs(g - ref))) / scale)
    store.zero_grads()
    return worst


def test_dual_backward_equals_single_pass():
    learner, anchor = learner_with_anchor(small_config())
    errs = []
    for step in range(1, 11):
        errs.append(dual_backward_error(learner, anchor, step))
        run_step(learner, step, anchor)
    assert max(errs) < 1e-9


def test_dual_backward_without_retention_is_consumed():
    from aegis.autograd import GraphConsumedError
    learner, anchor = learner_with_anchor(small_config())
    batch = learner.micro_batches(1)[0].trimmed()
    l_fm, _, out, mask = learner.fm_forward(batch, learner.noise(1, 0, batch), capture=True)
    l_ot, _ = total_penalty(out.hidden, mask, anchor)
    backward(l_fm)
    with pytest.raises(GraphConsumedError):
        backward(l_ot)


def test_zero_penalty_degenerates_to_naive():
    cfg = small_config(grad_accum=1)
    learner = Learner(cfg)
    batch = learner.micro_batches(1)[0]
    anchor = build_anchor(learner.model, [batch])
    batch = batch.trimmed()
    l_fm, _, out, mask = learner.fm_forward(batch, learner.noise(1, 0, batch), capture=True)
    l_ot, _ = total_penalty(out.hidden, mask, anchor)
    assert l_ot.item() < 1e-20
    dual_backward(l_fm, l_ot, learner.store, learner.vlm_names)
    task_norm = math.sqrt(sum(float(np.sum(learner.store.slot("task", n) ** 2)) for n in learner.vlm_names))
    ot_max = max(float(np.max(np.abs(learner.store.slot("ot", n)))) for n in learner.vlm_names)
    assert ot_max <= 1e-10 * task_norm


def test_run_step_report_contract():
    learner, anchor = learner_with_anchor(small_config())
    for step in (1, 2, 3):
        rep = run_step(learner, step, anchor)
        members = [n for g in make_groups(learner.vlm_names) for n in g.members]
        assert sorted(members) == sorted(learner.vlm_names)
        assert len(rep.groups) == len(make_groups(learner.vlm_names))
        assert 0.0 <= rep.throttle_rate <= 1.0 and 0.0 <= rep.energy_shed_ratio <= 1.0
        assert all(g.alpha <= 0 for g in rep.groups if g.applied)
        assert all(g.alpha == 0 for g in rep.groups if not g.applied)
        assert rep.ot_penalty > 0 and len(rep.ot_layers) == 2
        assert rep.ot_penalty == pytest.approx(sum(rep.ot_layers), rel=1e-12)
        # the logged norm is the VLM norm after projection and before clipping
        post = math.sqrt(sum(g.energy_after for g in rep.groups))
        assert rep.preclip_norm == pytest.approx(post, rel=1e-10)
    assert not any(learner.store.grad(n).any() for n in learner.store.trainable())


def test_accumulated_slots_equal_sum_of_micro_batches():
    cfg = small_config(grad_accum=2)
    learner, anchor = learner_with_anchor(cfg)
    store = learner.store
    step = 3
    parts = []
    for k, batch in enumerate(learner.micro_batches(step)):
        batch = batch.trimmed()
        l_fm, _, out, mask = learner.fm_forward(batch, learner.noise(step, k, batch), capture=True)
        l_ot, _ = total_penalty(out.hidden, mask, anchor)
        dual_backward(l_fm, l_ot * 0.5, store, learner.vlm_names)
        parts.append({n: (store.slot("task", n).copy(), store.slot("ot", n).copy())
                      for n in learner.vlm_names})
        store.clear_slots()
    for k, batch in enumerate(learner.micro_batches(step)):
        batch = batch.trimmed()
        l_fm, _, out, mask = learner.fm_forward(batch, learner.noise(step, k, batch), capture=True)
        l_ot, _ = total_penalty(out.hidden, mask, anchor)
        dual_backward(l_fm, l_ot * 0.5, store, learner.vlm_names, accumulate=k > 0)
    for n in learner.vlm_names:
        for i, slot in enumerate(("task", "ot")):
            want = parts[0][n][i] + parts[1][n][i]
            assert rel_err(store.slot(slot, n), want) < 1e-10
