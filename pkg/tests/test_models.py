import itertools

import numpy as np
import pytest

from aegis.autograd import Tensor, backward, ops
from aegis.models import (EmptyValidSetError, ExpertConfig, FlowExpert, Linear, ToyVLM, ToyVLMConfig,
                          apply_lora, attention_bias, build_store, model_fingerprint)
from oracles import central_fd, rel_err

SMALL = ToyVLMConfig(num_layers=2, d_model=8, num_heads=2, vocab_size=16, max_seq_len=8,
                     num_obs_tokens=2, d_obs=3)


def _inputs(rng, cfg=SMALL, B=2, S=6):
    tokens = rng.integers(0, cfg.vocab_size, size=(B, S))
    obs = rng.normal(size=(B, cfg.d_obs))
    mask = np.ones((B, S), dtype=int)
    mask[0, 4:] = 0
    return tokens, obs, mask


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ToyVLMConfig(d_model=10, num_heads=4)
    with pytest.raises(ValueError, match="positive"):
        ToyVLMConfig(num_layers=0)
    with pytest.raises(ValueError, match="divisible"):
        ExpertConfig(d_expert=10, num_heads=4)


def test_parameter_names_are_lexical():
    names = [n for n, _ in ToyVLM(SMALL).named_parameters()]
    assert "llm.layers.1.mlp.down_proj.weight" in names
    assert "llm.layers.0.self_attn.q_proj.weight" in names
    assert "llm.layers.0.input_layernorm.weight" in names
    assert "mm_projector.weight" in names and "llm.embed_tokens.weight" in names
    assert len(names) == len(set(names))


def test_single_token_shapes(rng):
    m = ToyVLM(SMALL)
    out = m(np.array([[3]]), rng.normal(size=(1, 3)), np.array([[1]]), capture=True)
    assert out.logits.shape == (1, 1, SMALL.vocab_size)
    assert [h.shape for h in out.hidden] == [(1, 1, SMALL.d_model)] * SMALL.num_layers


def test_capture_does_not_change_logits(rng):
    m = ToyVLM(SMALL)
    t, o, mk = _inputs(rng)
    a = m(t, o, mk, capture=True)
    b = m(t, o, mk, capture=False)
    assert b.hidden == []
    np.testing.assert_array_equal(a.logits.data, b.logits.data)


def test_padded_token_ids_do_not_affect_valid_positions(rng):
    m = ToyVLM(SMALL)
    t, o, mk = _inputs(rng)
    base = m(t, o, mk).logits.data
    for perturb in range(5):
        t2 = t.copy()
        t2[0, 4:] = rng.integers(0, SMALL.vocab_size, size=2)
        got = m(t2, o, mk).logits.data
        np.testing.assert_array_equal(got[0, :4], base[0, :4])
        np.testing.assert_array_equal(got[1], base[1])


def test_forward_errors(rng):
    m = ToyVLM(SMALL)
    t, o, mk = _inputs(rng)
    mk[1] = 0
    with pytest.raises(EmptyValidSetError, match="empty valid set"):
        m(t, o, mk)
    with pytest.raises(ValueError, match="out of range"):
        m(np.full((1, 3), SMALL.vocab_size), o[:1], np.ones((1, 3)))
    with pytest.raises(ValueError, match="sequence length"):
        m(np.zeros((1, 9), int), o[:1], np.ones((1, 9)))


def test_attention_bias_causal_and_masked():
    b = attention_bias(np.array([[1, 1, 0]]), 3, causal=True)
    allowed = b[0, 0] == 0
    np.testing.assert_array_equal(allowed, [[1, 0, 0], [1, 1, 0], [1, 1, 0]])


def test_zero_initialised_expert_outputs_zero(rng):
    ex = FlowExpert(ExpertConfig(d_expert=8, num_heads=2, horizon=4), d_model=8)
    h = Tensor(rng.normal(size=(2, 5, 8)))
    v = ex(rng.normal(size=(2, 4, 7)), np.array([0.1, 0.9]), h, np.ones((2, 5)))
    assert v.shape == (2, 4, 7)
    np.testing.assert_array_equal(v.data, 0.0)


def test_expert_rejects_bad_time(rng):
    ex = FlowExpert(ExpertConfig(d_expert=8, num_heads=2, horizon=4), d_model=8)
    h = Tensor(rng.normal(size=(1, 5, 8)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ex(np.zeros((1, 4, 7)), np.array([1.5]), h, np.ones((1, 5)))


def _vlm_expert(rng):
    m = ToyVLM(SMALL, seed=1)
    ex = FlowExpert(ExpertConfig(d_expert=8, num_heads=2, horizon=3, zero_init_out=False), 8, seed=2)
    t, o, mk = _inputs(rng)
    a = rng.normal(size=(2, 3, 7))
    tt = np.array([0.3, 0.8])
    return m, ex, t, o, mk, a, tt


def test_detached_features_leave_vlm_grads_zero(rng):
    m, ex, t, o, mk, a, tt = _vlm_expert(rng)
    store = build_store(("", m), ("expert.", ex))
    out = m(t, o, mk)
    v = ex(a, tt, ops.detach(out.last_hidden), mk)
    backward(ops.mean(v * v))
    for n, p in store.items():
        if n.startswith("expert."):
            continue
        assert p.grad is None or not p.grad.any(), n
    assert np.any(store["expert.out_proj.weight"].grad)


def test_expert_output_gradient_wrt_vlm_weight(rng):
    m, ex, t, o, mk, a, tt = _vlm_expert(rng)
    w = dict(m.named_parameters())["llm.layers.0.mlp.down_proj.weight"]

    def loss():
        v = ex(a, tt, m(t, o, mk, compute_logits=False).last_hidden, mk)
        return ops.mean(v * v)

    backward(loss())
    num = central_fd(lambda: loss().item(), [w.data])[0]
    assert rel_err(w.grad, num) < 1e-4


def test_lora_identity_at_init_and_freezing(rng):
    cfg = ToyVLMConfig(num_layers=2, d_model=16, num_heads=2, vocab_size=16, max_seq_len=8,
                       num_obs_tokens=2, d_obs=3)
    base = ToyVLM(cfg, seed=3)
    m = ToyVLM(cfg, seed=3)
    t, o, mk = _inputs(rng, cfg)
    hit = apply_lora(m, r=16, alpha=32)
    assert len(hit) == 7 * cfg.num_layers
    np.testing.assert_array_equal(m(t, o, mk).logits.data, base(t, o, mk).logits.data)
    store = build_store(("", m))
    trainable = store.trainable()
    assert all("lora_" in n or n.startswith("mm_projector") for n in trainable)
    backward(ops.sum(m(t, o, mk).logits))
    for n, p in store.items():
        if n not in trainable:
            assert p.grad is None or not p.grad.any(), n
    want = sum(16 * (mod.d_in + mod.d_out) for path, mod in m.named_modules() if path in hit)
    want += store["mm_projector.weight"].size + store["mm_projector.bias"].size
    assert store.numel(trainable) == want


def test_lora_errors():
    m = ToyVLM(SMALL)
    with pytest.raises(ValueError, match="matched no parameters"):
        apply_lora(m, targets=[r"\.nothing$"], r=2)
    with pytest.raises(ValueError, match="exceeds"):
        apply_lora(ToyVLM(SMALL), r=64)


def test_full_rank_lora_fits_any_update(rng):
    lin = Linear(rng, 6, 4)
    lin.attach_lora(rng, r=4, alpha=8)
    delta = rng.normal(size=(4, 6))
    # the adapter update is scale * B @ A; with B fixed and full rank, solve for A
    B = lin.lora_B.data
    A, *_ = np.linalg.lstsq(B * lin.lora_scale, delta, rcond=None)
    assert np.linalg.norm(lin.lora_scale * B @ A - delta) < 1e-8
    lin.lora_A.data[...] = A
    x = rng.normal(size=(3, 6))
    np.testing.assert_allclose(lin(Tensor(x)).data, x @ (lin.weight.data + delta).T, atol=1e-10)


def test_fingerprint_changes_with_config():
    assert model_fingerprint(SMALL) == model_fingerprint(ToyVLMConfig(**SMALL.__dict__))
    assert model_fingerprint(SMALL) != model_fingerprint(ToyVLMConfig(num_layers=3, d_model=8, num_heads=2))


def test_deterministic_construction(rng):
    a, b = ToyVLM(SMALL, seed=5), ToyVLM(SMALL, seed=5)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    t, o, mk = _inputs(rng)
    np.testing.assert_array_equal(a(t, o, mk).logits.data, b(t, o, mk).logits.data)


@pytest.mark.parametrize("S", [1, 2, 3, 8])
def test_short_and_long_sequences(rng, S):
    m = ToyVLM(SMALL)
    out = m(np.full((1, S), 5), rng.normal(size=(1, 3)), np.ones((1, S)), capture=True)
    assert out.logits.shape == (1, S, 16)


def test_causal_prefix_independent_of_suffix(rng):
    m = ToyVLM(SMALL)
    t, o, mk = _inputs(rng)
    mk[:] = 1
    full = m(t, o, mk).logits.data
    for cut in itertools.islice(range(1, 6), 3):
        part = m(t[:, :cut], o, mk[:, :cut]).logits.data
        np.testing.assert_allclose(part, full[:, :cut], atol=1e-12)
