import numpy as np
import pytest

from moa import tensor as T
from moa.adapters import (
    ClassifierLoras,
    DomainClassifier,
    LoraExpert,
    MoaModel,
    MoeLoraModel,
    RouterLayer,
    SingleLoraModel,
    aggregate_votes,
    classifier_select,
    count_router_params,
    moa_total_loss,
    moa_train_forward,
    router_logits,
    select_expert,
    select_experts,
)
from moa.tensor import Tensor, grad_check
from moa.transformer import AttachmentPlan, RoutingError, base_forward

from conftest import TINY, randomize


# ---------------------------------------------------------------------------
# router accounting


def test_router_params_large_config():
    # 32 layers x (4096*8 weights + 8 biases)
    assert count_router_params(32, 4096, 8) == 1_048_832


@pytest.mark.parametrize("args,expected", [((2, 64, 4), 520), ((1, 1, 1), 2)])
def test_router_params_small(args, expected):
    assert count_router_params(*args) == expected


def test_router_params_mlp_form_matches_tensors():
    r = RouterLayer.create(64, 4, mlp_hidden=16)
    assert r.num_params() * 2 == count_router_params(2, 64, 4, mlp_hidden=16) == 2 * (64 * 16 + 16 + 16 * 4 + 4)


# ---------------------------------------------------------------------------
# router logits


def test_zero_router_gives_zero_logits_and_index0():
    r = RouterLayer([Tensor(np.zeros((8, 3)))], [Tensor(np.zeros(3))])
    h = Tensor(np.random.default_rng(0).normal(size=(2, 5, 8)))
    z = router_logits(r, h, [5, 3]).data
    assert np.array_equal(z, np.zeros((2, 3)))
    assert z.argmax(-1).tolist() == [0, 0]


def test_duplicate_sequences_give_identical_rows():
    r = RouterLayer.create(8, 4, seed=1)
    x = np.random.default_rng(1).normal(size=(1, 6, 8)).astype(np.float32)
    z = router_logits(r, Tensor(np.concatenate([x, x])), [4, 4]).data
    assert np.array_equal(z[0], z[1])


def test_router_matches_scalar_loop_oracle():
    rng = np.random.default_rng(2)
    W, b = rng.normal(size=(8, 3)), rng.normal(size=3)
    h = rng.normal(size=(4, 7, 8))
    lengths = [7, 1, 3, 5]
    r = RouterLayer([Tensor(W, dtype=np.float64)], [Tensor(b, dtype=np.float64)])
    got = router_logits(r, Tensor(h, dtype=np.float64), lengths).data
    for s, n in enumerate(lengths):
        for k in range(3):
            acc = 0.0
            for j in range(8):
                pooled = sum(h[s, t, j] for t in range(n)) / n
                acc += pooled * W[j, k]
            assert abs(got[s, k] - (acc + b[k])) < 1e-6


def test_router_rejects_bad_lengths():
    r = RouterLayer.create(8, 2)
    with pytest.raises(T.ShapeError):
        router_logits(r, Tensor(np.zeros((1, 3, 8))), [4])


# ---------------------------------------------------------------------------
# training forward


def _moa(base, n=3, seed=0, rng_seed=5):
    rng = np.random.default_rng(rng_seed)
    es = [randomize(LoraExpert.create(TINY, i, rank=2, seed=i, dtype=base.dtype), rng, std=0.2) for i in range(n)]
    return MoaModel.create(base, es, seed=seed)


def _batch(rng, bsz=4, seq=9):
    x = rng.integers(0, TINY.vocab_size, size=(bsz, seq + 1))
    mask = np.ones((bsz, seq))
    return x[:, :-1], x[:, 1:], mask, np.full(bsz, seq)


def test_uniform_router_cls_loss_is_log_n(tiny_base):
    m = _moa(tiny_base, n=4)
    for r in m.routers:
        r.weights[0].data[...] = 0.0
    inp, tgt, mask, lens = _batch(np.random.default_rng(0))
    _, cls, per_layer = moa_train_forward(m, inp, tgt, mask, lens, [0, 1, 2, 3])
    assert cls.item() == pytest.approx(np.log(4), rel=1e-6)
    assert len(per_layer) == TINY.num_layers


def test_saturated_router_cls_near_zero(tiny_base):
    m = _moa(tiny_base, n=3)
    labels = np.array([2, 2, 2, 2])
    for r in m.routers:
        r.weights[0].data[...] = 0.0
        r.biases[0].data[...] = [-30.0, -30.0, 30.0]
    inp, tgt, mask, lens = _batch(np.random.default_rng(1))
    lm, cls, _ = moa_train_forward(m, inp, tgt, mask, lens, labels)
    assert cls.item() < 1e-12
    assert moa_total_loss(lm, cls, 0.1).item() == pytest.approx(lm.item(), abs=1e-6)


def test_training_forward_is_teacher_forced(tiny_base):
    m = _moa(tiny_base, n=3)
    inp, tgt, mask, lens = _batch(np.random.default_rng(2))
    labels = np.array([1, 0, 2, 1])
    lm, _, _ = moa_train_forward(m, inp, tgt, mask, lens, labels)
    direct = base_forward(tiny_base, inp, m.attachment(), labels)
    assert lm.item() == pytest.approx(T.cross_entropy(direct.logits, tgt, mask).item(), rel=1e-6)


def test_training_forward_label_errors(tiny_base):
    m = _moa(tiny_base, n=3)
    inp, tgt, mask, lens = _batch(np.random.default_rng(3))
    with pytest.raises(RoutingError):
        moa_train_forward(m, inp, tgt, mask, lens, [0, 1, 3, 0])
    with pytest.raises(RoutingError):
        moa_train_forward(m, inp, tgt, mask, lens, [0, 1])


def test_eta_zero_gives_exactly_zero_router_grads(tiny_base):
    m = _moa(tiny_base, n=3)
    inp, tgt, mask, lens = _batch(np.random.default_rng(4))
    tape = T.Tape()
    with T.use_tape(tape):
        lm, cls, _ = moa_train_forward(m, inp, tgt, mask, lens, [0, 1, 2, 0])
        T.backward(moa_total_loss(lm, cls, 0.0), tape)
    for p in m.router_parameters():
        assert p.grad is not None and not np.any(p.grad)
    assert any(np.any(p.grad) for e in m.experts for p in e.parameters())


def test_full_objective_gradient_check(tiny_base64):
    """lm + eta * cls in float64, checked on expert, router and sampled factors."""
    m = _moa(tiny_base64, n=3)
    rng = np.random.default_rng(6)
    inp, tgt, mask, lens = _batch(rng, bsz=3, seq=6)
    mask[0, :2] = 0.0
    labels = np.array([2, 0, 1])
    keys = [(0, "q", m.experts[2], "A"), (1, "down", m.experts[0], "B"), (0, "up", m.experts[1], "B")]
    lengths = lens - np.array([0, 2, 1])

    def f(a, b, c, w0, w1):
        for (layer, mat, e, which), t in zip(keys, (a, b, c)):
            getattr(e, which)[(layer, mat)] = t
        m.routers[0].weights[0] = w0
        m.routers[1].weights[0] = w1
        lm, cls, _ = moa_train_forward(m, inp, tgt, mask, lengths, labels)
        return moa_total_loss(lm, cls, 0.3)

    inputs = [getattr(e, w)[(l, mt)].data.copy() for l, mt, e, w in keys]
    inputs += [m.routers[0].weights[0].data.copy() * 10, m.routers[1].weights[0].data.copy() * 10]
    report = grad_check(f, inputs)
    assert report.passed, report.max_rel_error


# ---------------------------------------------------------------------------
# selection


def test_aggregate_votes_rules():
    probs = np.zeros((4, 1, 3))
    votes = np.array([[0], [0], [1], [1]])
    probs[:, 0, 0] = [0.5, 0.5, 0.2, 0.2]
    probs[:, 0, 1] = [0.3, 0.3, 0.7, 0.7]
    assert aggregate_votes(votes, probs, "vote").tolist() == [1]
    assert aggregate_votes(votes, probs, "last").tolist() == [1]
    # equal summed mass falls back to the lowest index
    flat = np.full((2, 1, 2), 0.5)
    assert aggregate_votes(np.array([[1], [0]]), flat, "vote").tolist() == [0]
    unanimous = np.full((3, 1), 2)
    assert aggregate_votes(unanimous, np.full((3, 1, 3), 1 / 3), "vote").tolist() == [2]


def _force(m, expert):
    for r in m.routers:
        r.weights[0].data[...] = 0.0
        r.biases[0].data[...] = 0.0
        r.biases[0].data[expert] = 5.0


def test_select_unanimous(tiny_base):
    m = _moa(tiny_base, n=3)
    _force(m, 2)
    prompt = [1, 2, 3, 4]
    assert select_expert(m, prompt, "vote") == (2, [2, 2])
    assert select_expert(m, prompt, "last")[0] == 2
    assert select_expert(m, prompt, "oracle", label=1) == (1, [])
    with pytest.raises(RoutingError):
        select_expert(m, prompt, "oracle")
    with pytest.raises(ValueError):
        select_expert(m, [], "last")


def test_selection_invariant_to_logit_shift(tiny_base):
    m = _moa(tiny_base, n=3, seed=4)
    prompts = np.random.default_rng(0).integers(0, TINY.vocab_size, size=(5, 6))
    lens = np.array([6, 3, 4, 6, 2])
    before = select_experts(m, prompts, lens, "vote")[0]
    for r in m.routers:
        r.biases[0].data += 17.0
    assert np.array_equal(select_experts(m, prompts, lens, "vote")[0], before)


def test_selected_expert_applied_per_layer_during_selection(tiny_base):
    # layer 0 is forced to expert 1; layer 1 must score the state produced under expert 1
    m = _moa(tiny_base, n=3)
    r0 = m.routers[0]
    r0.weights[0].data[...] = 0.0
    r0.biases[0].data[...] = [0.0, 5.0, 0.0]
    m.routers[1].weights[0].data[...] = np.random.default_rng(9).normal(0, 1.0, m.routers[1].weights[0].shape)
    prompts = np.array([[1, 2, 3, 4, 5]])
    chosen, votes, _ = select_experts(m, prompts, [5], "last")
    ref = base_forward(tiny_base, prompts, m.attachment(), np.array([1])).layer_inputs[1].data
    direct = ref.mean(axis=1) @ m.routers[1].weights[0].data + m.routers[1].biases[0].data
    assert votes[0, 0] == 1
    assert votes[1, 0] == direct.argmax() == chosen[0]


def test_routed_model_equals_single_expert(tiny_base):
    m = _moa(tiny_base, n=3)
    _force(m, 0)
    tokens = np.random.default_rng(1).integers(0, TINY.vocab_size, size=(2, 7))
    lens = np.array([7, 7])
    ctx = m.route(tokens, lens, strategy="last")
    routed = base_forward(tiny_base, tokens, m.attachment(), ctx).logits.data
    single = SingleLoraModel(tiny_base, m.experts[0])
    direct = base_forward(tiny_base, tokens, single.attachment()).logits.data
    assert np.array_equal(routed, direct)


def test_moa_needs_two_experts_and_router_per_layer(tiny_base):
    e = LoraExpert.create(TINY, 0, rank=2)
    with pytest.raises(ValueError):
        MoaModel(tiny_base, [e], [RouterLayer.create(8, 1)] * 2)
    with pytest.raises(ValueError):
        MoaModel(tiny_base, [e, e.copy()], [RouterLayer.create(8, 2)])


# ---------------------------------------------------------------------------
# token-gated baseline


def _moe(base, n, rng_seed=0, identical=False):
    rng = np.random.default_rng(rng_seed)
    first = randomize(LoraExpert.create(TINY, 0, rank=2, seed=0, dtype=base.dtype), rng, std=0.2)
    es = [first] + [
        first.copy(i) if identical else randomize(LoraExpert.create(TINY, i, rank=2, seed=i, dtype=base.dtype), rng, std=0.2)
        for i in range(1, n)
    ]
    return MoeLoraModel.create(base, es, seed=3)


def test_moe_single_expert_equals_single_lora(tiny_base):
    moe = _moe(tiny_base, 1)
    tokens = np.random.default_rng(2).integers(0, TINY.vocab_size, size=(2, 8))
    gated = base_forward(tiny_base, tokens, moe.attachment()).logits.data
    single = base_forward(tiny_base, tokens, SingleLoraModel(tiny_base, moe.experts[0]).attachment()).logits.data
    assert np.array_equal(gated, single)


def test_moe_saturated_gate_is_hard_expert0(tiny_base64):
    moe = _moe(tiny_base64, 2)
    for w, b in moe.gates.values():
        w.data[...] = 0.0
        b.data[...] = [20.0, -20.0]
    tokens = np.random.default_rng(3).integers(0, TINY.vocab_size, size=(2, 8))
    gated = base_forward(tiny_base64, tokens, moe.attachment()).logits.data
    hard = base_forward(tiny_base64, tokens, AttachmentPlan.uniform("single", [moe.experts[0]], TINY)).logits.data
    assert np.abs(gated - hard).max() < 1e-6


def test_moe_identical_experts_weight_delta_by_top_probability(tiny_base64):
    moe = _moe(tiny_base64, 3, identical=True)
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 5, 8)), dtype=np.float64)
    from moa.transformer import _project

    key = (0, "q")
    slot = moe.attachment().slots[key]
    w0 = tiny_base64.weight(*key)
    got = _project(x, w0, slot, 0, "q", x, None).data
    gw, gb = moe.gates[key]
    z = x.data @ gw.data + gb.data
    p = np.exp(z - z.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    A, B = moe.experts[0].factors(*key)
    ref = x.data @ w0.data + p.max(-1, keepdims=True) * (x.data @ A.data @ B.data)
    assert np.abs(got - ref).max() < 1e-12


def test_moe_matches_per_token_scalar_oracle(tiny_base64):
    moe = _moe(tiny_base64, 3, rng_seed=7)
    for w, b in moe.gates.values():
        w.data[...] = np.random.default_rng(8).normal(0, 1.0, w.shape)
    rng = np.random.default_rng(5)
    h = rng.normal(size=(2, 4, 8))
    x = rng.normal(size=(2, 4, 8))
    from moa.transformer import _project

    key = (1, "o")
    slot = moe.attachment().slots[key]
    w0 = tiny_base64.weight(*key).data
    got = _project(Tensor(x), Tensor(w0), slot, 1, "o", Tensor(h), None).data
    gw, gb = (t.data for t in moe.gates[key])
    for b in range(2):
        for t in range(4):
            logits = [sum(h[b, t, j] * gw[j, k] for j in range(8)) + gb[k] for k in range(3)]
            mx = max(logits)
            ex = [np.exp(v - mx) for v in logits]
            probs = [v / sum(ex) for v in ex]
            top = int(np.argmax(probs))
            A, B = (f.data for f in moe.experts[top].factors(*key))
            for o in range(8):
                base_val = sum(x[b, t, j] * w0[j, o] for j in range(8))
                xa = [sum(x[b, t, j] * A[j, r] for j in range(8)) for r in range(A.shape[1])]
                delta = sum(xa[r] * B[r, o] for r in range(A.shape[1]))
                assert abs(got[b, t, o] - (base_val + probs[top] * delta)) < 1e-5


def test_moe_gates_receive_gradients(tiny_base):
    moe = _moe(tiny_base, 3)
    tokens = np.random.default_rng(6).integers(0, TINY.vocab_size, size=(2, 8))
    tape = T.Tape()
    with T.use_tape(tape):
        out = base_forward(tiny_base, tokens, moe.attachment())
        T.backward(T.cross_entropy(out.logits, tokens), tape)
    assert all(t.grad is not None for t in moe.gate_parameters())


# ---------------------------------------------------------------------------
# classifier baseline


def test_classifier_argmax_shift_invariance():
    clf = DomainClassifier.create(32, 8, 3, seed=1)
    prompts = np.random.default_rng(0).integers(0, 32, size=(4, 5))
    before = clf.predict(prompts, [5, 5, 3, 2])
    clf.bias.data += 9.0
    assert np.array_equal(clf.predict(prompts, [5, 5, 3, 2]), before)
    with pytest.raises(ValueError):
        classifier_select(clf, [])


def test_classifier_dispatch_uses_chosen_expert(tiny_base):
    rng = np.random.default_rng(1)
    es = [randomize(LoraExpert.create(TINY, i, rank=2, seed=i), rng, std=0.2) for i in range(2)]
    clf = DomainClassifier.create(32, 8, 2, seed=0)
    clf.weight.data[...] = 0.0
    clf.bias.data[...] = [0.0, 3.0]
    model = ClassifierLoras(tiny_base, es, clf)
    tokens = rng.integers(0, 32, size=(1, 6))
    ctx = model.route(tokens, [6])
    assert ctx.tolist() == [1]
    got = base_forward(tiny_base, tokens, model.attachment(), ctx).logits.data
    ref = base_forward(tiny_base, tokens, AttachmentPlan.uniform("single", [es[1]], TINY)).logits.data
    assert np.array_equal(got, ref)


# ---------------------------------------------------------------------------
# modularity


def test_expert_copy_and_checksum_are_independent():
    e = LoraExpert.create(TINY, 0, rank=2, seed=3)
    dup = e.copy(domain_id=4)
    dup.B[(0, "q")].data += 1.0
    assert dup.domain_id == 4 and e.checksum() != dup.checksum()
    assert not np.any(e.B[(0, "q")].data)
