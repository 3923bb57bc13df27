import json
import math
import random

import numpy as np
import pytest

from moa import tensor as T
from moa.adapters import LoraExpert, SingleLoraModel
from moa.data import DomainRecord, even_sample_batches
from moa.evaluation import perplexity
from moa.tensor import Tensor
from moa.training import (
    NumericalError,
    OptimizerState,
    TrainConfig,
    adamw_step,
    clip_gradients,
    fit,
    global_norm,
    lr_at,
    train_baseline,
    train_expert,
    train_moa,
)
from moa.transformer import ModelConfig, init_base

# byte vocabulary so real records (with specials) fit
SMALL = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=256, max_seq_len=32)


def _domain(d, n=24, seed=0):
    rng = random.Random(seed * 100 + d)
    lo = 97 + 6 * d
    recs = []
    for _ in range(n):
        p = tuple(rng.randrange(lo, lo + 6) for _ in range(rng.randint(2, 6)))
        r = tuple(rng.randrange(lo, lo + 6) for _ in range(rng.randint(1, 5)))
        recs.append(DomainRecord(d, f"d{d}", p, r))
    return recs


@pytest.fixture
def small64():
    return init_base(SMALL, seed=1, dtype=np.float64)


@pytest.fixture
def small32():
    return init_base(SMALL, seed=1)


# ---------------------------------------------------------------------------
# schedule


def test_lr_analytic_points():
    cfg = TrainConfig(peak_lr=2e-3, total_steps=110, warmup_fraction=0.1)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(11, cfg) == 2e-3
    assert lr_at(110, cfg) == 0.0
    # decay runs over steps 11..110, midpoint at 60.5; use an even span instead
    cfg2 = TrainConfig(peak_lr=2e-3, total_steps=100, warmup_fraction=0.1)
    assert lr_at(55, cfg2) == pytest.approx(1e-3, abs=1e-15)


def test_lr_monotone_and_range_checked():
    cfg = TrainConfig(peak_lr=1.0, total_steps=50)
    lrs = [lr_at(s, cfg) for s in range(51)]
    warm = 5
    assert all(a <= b for a, b in zip(lrs[:warm], lrs[1 : warm + 1]))
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1 :]))
    for bad in (-1, 51):
        with pytest.raises(ValueError):
            lr_at(bad, cfg)


# ---------------------------------------------------------------------------
# clipping


@pytest.mark.parametrize("norm,scale", [(1.0, 0.1), (0.05, 1.0), (0.5, 0.2)])
def test_clip_single_tensor(norm, scale):
    g = np.array([norm * 0.6, norm * 0.8])
    out, s = clip_gradients([g], 0.1)
    assert s == pytest.approx(scale, rel=1e-12)
    assert global_norm(out) <= 0.1 + 1e-12
    if scale == 1.0:
        assert out[0] is g


def test_clip_two_tensors_hand_case():
    out, s = clip_gradients([np.array([0.3]), np.array([0.4])], 0.1)
    assert s == pytest.approx(0.2, rel=1e-12)
    assert global_norm(out) == pytest.approx(0.1, rel=1e-12)


def test_clip_rejects_nonfinite():
    with pytest.raises(NumericalError):
        clip_gradients([np.array([np.inf])])


# ---------------------------------------------------------------------------
# AdamW


def _scalar_adamw(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta * (1 - lr * wd)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


def test_adamw_matches_scalar_reference():
    grads = [0.5, -1.3, 0.02, 2.0, -0.7]
    ref = _scalar_adamw(1.5, grads, lr=1e-2, wd=0.1)
    p = Tensor(np.array([1.5]), dtype=np.float64)
    state = OptimizerState.for_params([p])
    for g, want in zip(grads, ref):
        adamw_step(state, [p], [np.array([g])], 1e-2, weight_decay=0.1)
        assert abs(p.data[0] - want) < 1e-10


def test_adamw_first_step_is_signed_lr_and_zero_grad_is_noop():
    p = Tensor(np.array([0.0, 1.0, 2.0]), dtype=np.float64)
    state = OptimizerState.for_params([p])
    adamw_step(state, [p], [np.array([3.0, -0.2, 0.0])], 1e-3)
    assert np.allclose(p.data, [-1e-3, 1.0 + 1e-3, 2.0], atol=1e-9)
    assert p.data[2] == 2.0


def test_adamw_lr_scales_and_shape_errors():
    a, b = Tensor(np.zeros(2), dtype=np.float64), Tensor(np.zeros(2), dtype=np.float64)
    state = OptimizerState.for_params([a, b])
    adamw_step(state, [a, b], [np.ones(2), np.ones(2)], 1e-3, lr_scales=[1.0, 10.0])
    assert np.allclose(b.data, 10 * a.data)
    with pytest.raises(ValueError):
        adamw_step(state, [a, b], [np.ones(2), np.ones(3)], 1e-3)
    with pytest.raises(ValueError):
        adamw_step(state, [a], [np.ones(2)], 1e-3)


# ---------------------------------------------------------------------------
# training loops


def _cfg(**kw):
    base = dict(peak_lr=1e-2, total_steps=3, accum_steps=2, batch_size=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_leaves_expert_transparent(small32):
    recs = _domain(0)
    expert, hist = train_expert(small32, recs, _cfg(total_steps=0))
    assert not hist.steps
    assert all(not np.any(b.data) for b in expert.B.values())
    assert perplexity(SingleLoraModel(small32, expert), recs) == perplexity(SingleLoraModel(small32, None), recs)


def test_train_expert_is_deterministic_and_leaves_base_frozen(small32):
    before = small32.checksum()
    e1, h1 = train_expert(small32, _domain(0), _cfg())
    e2, h2 = train_expert(small32, _domain(0), _cfg())
    assert small32.checksum() == before
    assert e1.checksum() == e2.checksum()
    assert h1.losses() == h2.losses()
    assert any(np.any(b.data) for b in e1.B.values())


def test_single_mixed_on_one_domain_equals_train_expert(small32):
    e, _ = train_expert(small32, _domain(1), _cfg())
    mixed, _ = train_baseline("single_mixed", small32, [_domain(1)], _cfg())
    assert mixed.expert.checksum() == e.checksum()


def test_moe_with_one_expert_reproduces_single_expert_curve(small64):
    start = LoraExpert.create(SMALL, 0, rank=2, seed=4, dtype=np.float64)
    _, h_single = train_expert(small64, _domain(0), _cfg(), expert=start.copy())
    _, h_moe = train_baseline("moe_lora", small64, [_domain(0)], _cfg(), experts=[start])
    assert np.allclose(h_single.losses(), h_moe.losses(), rtol=1e-12, atol=0)


def test_stage2_eta_zero_keeps_routers_bitwise(small32):
    experts = [LoraExpert.create(SMALL, i, rank=2, seed=i) for i in range(2)]
    cfg = _cfg(eta=0.0)
    moa, _ = train_moa(small32, experts, [_domain(0), _domain(1)], cfg)
    fresh = moa.__class__.create(small32, [e.copy() for e in experts], seed=cfg.seed)
    for r, f in zip(moa.routers, fresh.routers):
        for a, b in zip(r.parameters(), f.parameters()):
            assert np.array_equal(a.data, b.data)
    # experts still move and the input experts are untouched copies
    assert moa.experts[0].checksum() != experts[0].checksum()
    assert all(not np.any(b.data) for b in experts[0].B.values())


def test_stage2_freezes_base_and_logs(small64, tmp_path):
    before = small64.checksum()
    experts = [LoraExpert.create(SMALL, i, rank=2, seed=i, dtype=np.float64) for i in range(2)]
    data = [_domain(0), _domain(1)]
    cfg = _cfg(eta=0.5, eval_interval=2, eval_samples=4)
    moa, hist = train_moa(small64, experts, data, cfg, val={"d0": data[0][:4], "d1": data[1][:4]})
    assert small64.checksum() == before
    for s in hist.steps:
        assert s["loss"] == pytest.approx(s["lm_loss"] + 0.5 * s["cls_loss"], rel=1e-12)
    assert [row["step"] for row in hist.evals] == [2, 3]
    path = tmp_path / "m.jsonl"
    hist.write_metrics(path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert set(rows[0]) >= {"step", "lr", "lm_loss", "cls_loss", "val_ppl", "router_acc"}
    with pytest.raises(ValueError):
        train_moa(small64, experts, data[:1], cfg)


def test_accumulation_matches_one_large_batch(small64):
    experts = [LoraExpert.create(SMALL, i, rank=2, seed=i, dtype=np.float64) for i in range(2)]
    data = [_domain(0), _domain(1)]
    # 4 micro-batches of 3 consume the same records as one batch of 12
    a, _ = train_moa(small64, experts, data, _cfg(total_steps=2, accum_steps=4, batch_size=3), copy_experts=True)
    b, _ = train_moa(small64, experts, data, _cfg(total_steps=2, accum_steps=1, batch_size=12), copy_experts=True)
    for p, q in zip(a.parameters(), b.parameters()):
        scale = max(np.abs(q.data).max(), 1e-12)
        assert np.abs(p.data - q.data).max() / scale <= 1e-6


def test_fit_aborts_on_nonfinite_loss():
    p = Tensor(np.ones(2), requires_grad=True)

    def bad(b, n_tok, n_seq):
        loss = T.tensor_sum(T.scale(p, float("nan")))
        return loss, {"loss": float(loss.data)}

    stream = even_sample_batches([_domain(0)], 2, seed=0)
    with pytest.raises(NumericalError):
        fit([p], bad, stream, _cfg(accum_steps=1), 1)


def test_unknown_baseline_and_config_validation(small32):
    with pytest.raises(ValueError):
        train_baseline("dense", small32, [_domain(0)], _cfg())
    for bad in (dict(warmup_fraction=0.0), dict(clip_norm=0.0), dict(accum_steps=0), dict(eta=-1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.mark.slow
def test_long_stage1_run_cuts_in_domain_ppl():
    from moa.data import default_specs, gen_corpus

    base = init_base(ModelConfig(), seed=0)
    corpus = gen_corpus(default_specs()[2:3], 200, seed=0, max_seq_len=256)["arith"]
    before = perplexity(SingleLoraModel(base, None), corpus["validation"])
    expert, _ = train_expert(base, corpus["train"], TrainConfig(peak_lr=1e-2, total_steps=500, seed=0))
    after = perplexity(SingleLoraModel(base, expert), corpus["validation"])
    assert after <= 0.7 * before
