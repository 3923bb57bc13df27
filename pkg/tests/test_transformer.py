import numpy as np
import pytest

from moa import tensor as T
from moa.adapters import LoraExpert, apply_expert, merge_expert
from moa.tensor import ShapeError, Tensor
from moa.transformer import (
    MATRICES,
    AttachmentPlan,
    ModelConfig,
    RoutingError,
    base_forward,
    count_base_params,
    init_base,
    rope_tables,
)

from conftest import TINY, randomize


def test_toy_parameter_count():
    # V*d + L*(4d^2 + 2df + 2d) + d + d*V with V=256, d=64, L=2, f=256
    assert count_base_params(ModelConfig()) == 131_392
    assert init_base(ModelConfig(), 0).num_params() == 131_392


def test_init_is_deterministic_per_seed():
    a, b, c = init_base(TINY, 1), init_base(TINY, 1), init_base(TINY, 2)
    assert a.checksum() == b.checksum() != c.checksum()
    assert all(not t.requires_grad for t in a.params.values())
    assert np.array_equal(a["final_norm"].data, np.ones(TINY.hidden_dim))


def test_forward_shapes_and_layer_inputs(tiny_base, tokens):
    out = base_forward(tiny_base, tokens)
    assert out.logits.shape == (3, 10, TINY.vocab_size)
    assert len(out.layer_inputs) == TINY.num_layers
    assert out.layer_inputs[0].shape == (3, 10, TINY.hidden_dim)


def test_causality(tiny_base, tokens):
    changed = tokens.copy()
    changed[:, 6:] = (changed[:, 6:] + 5) % TINY.vocab_size
    a = base_forward(tiny_base, tokens).logits.data
    b = base_forward(tiny_base, changed).logits.data
    assert np.array_equal(a[:, :6], b[:, :6])
    assert not np.allclose(a[:, 6:], b[:, 6:])


def test_padding_does_not_change_earlier_positions(tiny_base, tokens):
    short = base_forward(tiny_base, tokens[:, :7]).logits.data
    full = base_forward(tiny_base, tokens).logits.data
    assert np.allclose(short, full[:, :7], atol=1e-6)


def test_input_validation(tiny_base):
    with pytest.raises(ShapeError, match="max_seq_len"):
        base_forward(tiny_base, np.zeros((1, TINY.max_seq_len + 1), dtype=int))
    with pytest.raises(ShapeError, match="vocabulary"):
        base_forward(tiny_base, np.array([[TINY.vocab_size]]))


def test_empty_attachment_is_base(tiny_base, tokens):
    a = base_forward(tiny_base, tokens).logits.data
    b = base_forward(tiny_base, tokens, AttachmentPlan()).logits.data
    assert np.array_equal(a, b)


def test_zero_init_expert_is_transparent(tiny_base, tokens):
    e = LoraExpert.create(TINY, 0, rank=4, seed=5)
    plan = AttachmentPlan.uniform("single", [e], TINY)
    assert np.array_equal(base_forward(tiny_base, tokens).logits.data, base_forward(tiny_base, tokens, plan).logits.data)


def test_apply_expert_row_convention_example():
    # W0 = I, A = [[1],[0]], B = [[0,1]], x = (1,1): x W0 + x A B = (1,1) + (0,1)
    e = LoraExpert(0, 1, 1.0, {(0, "q"): Tensor([[1.0], [0.0]])}, {(0, "q"): Tensor([[0.0, 1.0]])})
    out = apply_expert(Tensor([[1.0, 1.0]]), Tensor(np.eye(2)), e, 0, "q")
    assert np.array_equal(out.data, [[1.0, 2.0]])


@pytest.mark.parametrize("seed", range(5))
def test_apply_expert_matches_dense_composition(seed):
    rng = np.random.default_rng(seed)
    e = randomize(LoraExpert.create(TINY, 0, rank=3, seed=seed, scale=0.7, dtype=np.float64), rng)
    w0 = Tensor(rng.normal(size=(8, 16)), dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 5, 8)), dtype=np.float64)
    A, B = e.factors(1, "up")
    dense = x.data @ (w0.data + 0.7 * A.data @ B.data)
    got = apply_expert(x, w0, e, 1, "up").data
    assert np.abs(got - dense).max() <= 1e-5 * np.abs(dense).max()


def test_merge_equivalence(tiny_base, tokens):
    rng = np.random.default_rng(2)
    e = randomize(LoraExpert.create(TINY, 0, rank=2, seed=1), rng, std=0.2)
    adapted = base_forward(tiny_base, tokens, AttachmentPlan.uniform("single", [e], TINY)).logits.data
    merged = base_forward(merge_expert(tiny_base, e), tokens).logits.data
    assert np.abs(adapted - merged).max() <= 1e-5 * np.abs(merged).max()


def test_attachment_linearity_single_matrix(tiny_base, tokens):
    # only layer 0 "v" adapted: that projection equals x W0 + scale (x A) B
    rng = np.random.default_rng(4)
    full = randomize(LoraExpert.create(TINY, 0, rank=2, seed=1, scale=1.5), rng)
    e = LoraExpert(0, 2, 1.5, {(0, "v"): full.A[(0, "v")]}, {(0, "v"): full.B[(0, "v")]})
    plan = AttachmentPlan.uniform("single", [e], TINY)
    assert list(plan.slots) == [(0, "v")]
    w_dense = tiny_base.weight(0, "v").data + 1.5 * e.A[(0, "v")].data @ e.B[(0, "v")].data
    params = dict(tiny_base.params)
    params["layer.0.v"] = Tensor(w_dense.astype(np.float32))
    from moa.transformer import BaseModel

    dense_model = BaseModel(TINY, params)
    a = base_forward(tiny_base, tokens, plan).logits.data
    b = base_forward(dense_model, tokens).logits.data
    assert np.abs(a - b).max() <= 1e-5 * np.abs(b).max()


def test_routed_plan_requires_context(tiny_base, tokens):
    es = [LoraExpert.create(TINY, i, rank=2, seed=i) for i in range(2)]
    plan = AttachmentPlan.uniform("routed", es, TINY)
    with pytest.raises(RoutingError):
        base_forward(tiny_base, tokens, plan)
    with pytest.raises(RoutingError):
        base_forward(tiny_base, tokens, plan, np.array([0, 1]))
    with pytest.raises(RoutingError):
        base_forward(tiny_base, tokens, plan, np.array([0, 1, 2]))


def test_routed_equals_direct_bitwise(tiny_base, tokens):
    rng = np.random.default_rng(9)
    es = [randomize(LoraExpert.create(TINY, i, rank=2, seed=i), rng) for i in range(3)]
    plan = AttachmentPlan.uniform("routed", es, TINY)
    for e_idx in range(3):
        routed = base_forward(tiny_base, tokens, plan, np.full(3, e_idx)).logits.data
        direct = base_forward(tiny_base, tokens, AttachmentPlan.uniform("single", [es[e_idx]], TINY)).logits.data
        assert np.array_equal(routed, direct)


def test_mixed_routes_match_per_sequence_direct(tiny_base, tokens):
    rng = np.random.default_rng(10)
    es = [randomize(LoraExpert.create(TINY, i, rank=2, seed=i), rng) for i in range(3)]
    plan = AttachmentPlan.uniform("routed", es, TINY)
    route = np.array([2, 0, 2])
    mixed = base_forward(tiny_base, tokens, plan, route).logits.data
    for b, e_idx in enumerate(route):
        direct = base_forward(tiny_base, tokens[b : b + 1], AttachmentPlan.uniform("single", [es[e_idx]], TINY)).logits.data
        assert np.abs(mixed[b] - direct[0]).max() <= 1e-6 * np.abs(direct).max()


def test_rope_relative_position_property():
    # q.k after rotation depends only on the position offset
    cos, sin = rope_tables(12, 8)
    rng = np.random.default_rng(0)
    q, k = rng.normal(size=8), rng.normal(size=8)
    rot = lambda v, p: T.rope(Tensor(np.tile(v, (12, 1)), dtype=np.float64), cos, sin).data[p]
    assert np.isclose(rot(q, 5) @ rot(k, 3), rot(q, 9) @ rot(k, 7))
    assert np.allclose(rot(q, 0), q)


def test_gradients_flow_only_to_experts(tiny_base, tokens):
    rng = np.random.default_rng(1)
    e = randomize(LoraExpert.create(TINY, 0, rank=2, seed=0), rng)
    tape = T.Tape()
    with T.use_tape(tape):
        out = base_forward(tiny_base, tokens, AttachmentPlan.uniform("single", [e], TINY))
        T.backward(T.cross_entropy(out.logits, tokens), tape)
    assert all(t.grad is None for t in tiny_base.params.values())
    assert all(p.grad is not None for p in e.parameters())
    assert len(e.parameters()) == 2 * TINY.num_layers * len(MATRICES)
