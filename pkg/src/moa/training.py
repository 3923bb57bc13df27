"""Two-stage training: per-domain experts, then routers + experts on an even mixture."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .adapters import (
    ClassifierLoras,
    DomainClassifier,
    LoraExpert,
    MoaModel,
    MoeLoraModel,
    SingleLoraModel,
    moa_total_loss,
    moa_train_forward,
    moe_gate_forward,
)
from .data import Batch, DomainRecord, epoch_steps, even_sample_batches, make_batch, tokenize
from .tensor import Tensor
from .transformer import BaseModel, base_forward

log = logging.getLogger(__name__)

BASELINES = ("single_mixed", "moe_lora", "moe_lora_naive", "classifier")


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    total_steps: int | None = 500
    warmup_fraction: float = 0.10
    clip_norm: float = 0.1
    accum_steps: int = 4
    batch_size: int = 4
    eta: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    loss_mask_mode: str = "full"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_interval: int = 0
    eval_samples: int = 32
    # multiplier on peak_lr for router tensors only
    router_lr_scale: float = 1.0
    # router pooling span during stage 2: "prompt" (matches inference) or "sequence"
    router_pool: str = "prompt"

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.accum_steps < 1 or self.batch_size < 1:
            raise ValueError("accum_steps and batch_size must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.total_steps is not None and self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.router_pool not in ("prompt", "sequence"):
            raise ValueError("router_pool must be 'prompt' or 'sequence'")
        if self.loss_mask_mode not in ("full", "response"):
            raise ValueError("loss_mask_mode must be 'full' or 'response'")
        if self.router_lr_scale <= 0:
            raise ValueError("router_lr_scale must be > 0")


# hyperparameters reported for the 7B setting
PAPER_PRESET = TrainConfig(peak_lr=1e-5, warmup_fraction=0.10, clip_norm=0.1, accum_steps=4, batch_size=8)


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return max(1, int(round(warmup_fraction * total_steps)))


def lr_at(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to zero at ``total_steps``."""
    total = cfg.total_steps if total_steps is None else total_steps
    if total is None or total < 1:
        raise ValueError("lr_at needs a positive total step count")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = min(warmup_steps(total, cfg.warmup_fraction), total)
    if step <= warm:
        return cfg.peak_lr * step / warm
    progress = (step - warm) / max(1, total - warm)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float = 0.1) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm ({norm})")
    if norm <= max_norm:
        return [g for g in grads], 1.0
    s = max_norm / norm
    return [g * g.dtype.type(s) for g in grads], s


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0, beta1, beta2, eps)


def adamw_step(
    state: OptimizerState,
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
    lr_scales: Sequence[float] | None = None,
) -> None:
    """Bias-corrected Adam with decoupled multiplicative weight decay, in place.

    ``lr_scales`` optionally multiplies the learning rate per parameter.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("optimizer state, params and grads disagree in length")
    if lr_scales is not None and len(lr_scales) != len(params):
        raise ValueError("one lr scale per parameter")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        plr = lr if lr_scales is None else lr * lr_scales[i]
        if p.shape != state.m[i].shape or g.shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs state {state.m[i].shape} / grad {g.shape}")
        dt = p.data.dtype.type
        m = state.m[i] = dt(b1) * state.m[i] + dt(1 - b1) * g
        v = state.v[i] = dt(b2) * state.v[i] + dt(1 - b2) * g * g
        if weight_decay:
            p.data *= dt(1.0 - plr * weight_decay)
        p.data -= dt(plr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))


@dataclass
class TrainHistory:
    name: str
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    def losses(self, key: str = "loss") -> list[float]:
        return [s[key] for s in self.steps]

    def write_metrics(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.evals:
                fh.write(json.dumps(row) + "\n")


# micro-batch loss: (batch, total masked tokens, total sequences) -> (loss tensor, {component: float})
MicroLoss = Callable[[Batch, float, float], tuple[Tensor, dict]]


def fit(
    params: Sequence[Tensor],
    micro_loss: MicroLoss,
    stream: Iterator[list[DomainRecord]],
    cfg: TrainConfig,
    total_steps: int,
    name: str = "train",
    evaluate: Callable[[int], dict] | None = None,
    lr_scales: Sequence[float] | None = None,
) -> TrainHistory:
    """Shared optimizer loop with accumulation, clipping and the warmup-cosine schedule.

    Each optimizer step draws ``accum_steps`` micro-batches; their losses use
    the pooled token/sequence counts as denominators so the accumulated
    gradient equals the gradient of one step on the concatenated batch.
    """
    params = list(params)
    state = OptimizerState.for_params(params, cfg.beta1, cfg.beta2, cfg.eps)
    hist = TrainHistory(name)
    t0 = time.perf_counter()
    for p in params:
        p.grad = None
    for step in range(1, total_steps + 1):
        micros = [make_batch(next(stream), cfg.loss_mask_mode) for _ in range(cfg.accum_steps)]
        n_tok = sum(b.n_tokens for b in micros)
        n_seq = float(sum(b.size for b in micros))
        totals: dict[str, float] = {}
        for b in micros:
            loss, parts = micro_loss(b, n_tok, n_seq)
            T.backward(loss)
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + v
        if not all(math.isfinite(v) for v in totals.values()):
            raise NumericalError(f"{name}: non-finite loss at step {step}: {totals}")
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        norm = global_norm(grads)
        grads, _ = clip_gradients(grads, cfg.clip_norm)
        lr = lr_at(step, cfg, total_steps)
        adamw_step(state, params, grads, lr, cfg.weight_decay, lr_scales)
        for p in params:
            p.grad = None
        hist.steps.append({"step": step, "lr": lr, "grad_norm": norm, **totals})
        if evaluate is not None and cfg.eval_interval and (step % cfg.eval_interval == 0 or step == total_steps):
            row = {"step": step, "lr": lr, "lm_loss": totals.get("lm_loss"), "cls_loss": totals.get("cls_loss")}
            row.update(evaluate(step))
            hist.evals.append(row)
            log.info("%s step %d %s", name, step, row)
    hist.seconds = time.perf_counter() - t0
    return hist


def _lora_micro_loss(model) -> MicroLoss:
    plan = model.attachment()

    def loss_fn(b: Batch, n_tok: float, n_seq: float):
        out = base_forward(model.base, b.inputs, plan)
        lm = T.cross_entropy(out.logits, b.targets, b.loss_mask, denom=n_tok)
        v = float(lm.data)
        return lm, {"loss": v, "lm_loss": v}

    return loss_fn


def _as_datasets(datasets) -> list[list[DomainRecord]]:
    if datasets and isinstance(datasets[0], DomainRecord):
        return [list(datasets)]
    return [list(d) for d in datasets]


def _ppl_evaluator(model, val: dict[str, list[DomainRecord]] | None, cfg: TrainConfig, strategy="oracle", routers=False):
    if not val:
        return None
    from .evaluation import perplexity, routing_accuracy

    def run(step):
        row = {"val_ppl": {}}
        for name, recs in val.items():
            sub = recs[: cfg.eval_samples]
            row["val_ppl"][name] = perplexity(model, sub, strategy, mask_mode=cfg.loss_mask_mode)
        if routers:
            allrec = [r for recs in val.values() for r in recs[: cfg.eval_samples]]
            row["router_acc"] = {k: routing_accuracy(model, allrec, k) for k in ("last", "vote")}
        return row

    return run


def train_expert(
    base: BaseModel,
    datasets,
    cfg: TrainConfig,
    expert: LoraExpert | None = None,
    domain_id: int = 0,
    rank: int = 8,
    scale: float = 1.0,
    val: dict[str, list[DomainRecord]] | None = None,
    name: str = "stage1",
) -> tuple[LoraExpert, TrainHistory]:
    """Stage 1: fit one LoRA expert on its domain (or on an even mixture of several)."""
    datasets = _as_datasets(datasets)
    if expert is None:
        expert = LoraExpert.create(base.config, domain_id, rank=rank, seed=cfg.seed, scale=scale, dtype=base.dtype)
    model = SingleLoraModel(base, expert)
    steps = cfg.total_steps if cfg.total_steps is not None else epoch_steps(datasets, cfg.batch_size, cfg.accum_steps)
    stream = even_sample_batches(datasets, cfg.batch_size, cfg.seed)
    hist = fit(expert.parameters(), _lora_micro_loss(model), stream, cfg, steps, name, _ppl_evaluator(model, val, cfg))
    return expert, hist


def train_moa(
    base: BaseModel,
    experts: Sequence[LoraExpert],
    datasets,
    cfg: TrainConfig,
    mlp_hidden: int | None = None,
    val: dict[str, list[DomainRecord]] | None = None,
    copy_experts: bool = True,
) -> tuple[MoaModel, TrainHistory]:
    """Stage 2: routers and experts trained jointly with ``L = L_LM + eta * L_cls``."""
    datasets = _as_datasets(datasets)
    if len(experts) != len(datasets):
        raise ValueError(f"{len(experts)} experts for {len(datasets)} domain datasets")
    experts = [e.copy(domain_id=i) for i, e in enumerate(experts)] if copy_experts else list(experts)
    model = MoaModel.create(base, experts, eta=cfg.eta, seed=cfg.seed, mlp_hidden=mlp_hidden)
    steps = cfg.total_steps if cfg.total_steps is not None else epoch_steps(datasets, cfg.batch_size, cfg.accum_steps)
    eta = cfg.eta

    def loss_fn(b: Batch, n_tok: float, n_seq: float):
        pool = b.prompt_lengths if cfg.router_pool == "prompt" else b.valid_lengths
        lm, cls, _ = moa_train_forward(model, b.inputs, b.targets, b.loss_mask, pool, b.labels, n_tok, n_seq)
        total = moa_total_loss(lm, cls, eta)
        return total, {"loss": float(total.data), "lm_loss": float(lm.data), "cls_loss": float(cls.data)}

    params = model.parameters()
    router_ids = {id(p) for p in model.router_parameters()}
    scales = [cfg.router_lr_scale if id(p) in router_ids else 1.0 for p in params]
    stream = even_sample_batches(datasets, cfg.batch_size, cfg.seed)
    hist = fit(params, loss_fn, stream, cfg, steps, "stage2", _ppl_evaluator(model, val, cfg, "last", routers=True), scales)
    return model, hist


def train_classifier(
    base: BaseModel,
    datasets,
    cfg: TrainConfig,
    dim: int | None = None,
) -> tuple[DomainClassifier, TrainHistory]:
    datasets = _as_datasets(datasets)
    clf = DomainClassifier.create(base.config.vocab_size, dim or base.config.hidden_dim, len(datasets), seed=cfg.seed)

    def loss_fn(b: Batch, n_tok: float, n_seq: float):
        prompts, lengths = b.prompts()
        loss = T.cross_entropy(clf.logits(prompts, lengths), b.labels, denom=n_seq)
        return loss, {"loss": float(loss.data)}

    steps = cfg.total_steps if cfg.total_steps is not None else epoch_steps(datasets, cfg.batch_size, cfg.accum_steps)
    hist = fit(clf.parameters(), loss_fn, even_sample_batches(datasets, cfg.batch_size, cfg.seed), cfg, steps, "classifier")
    return clf, hist


def train_baseline(
    kind: str,
    base: BaseModel,
    datasets,
    cfg: TrainConfig,
    experts: Sequence[LoraExpert] | None = None,
    rank: int = 8,
    scale: float = 1.0,
    val: dict[str, list[DomainRecord]] | None = None,
):
    """Train one comparison model; returns ``(model, history)``.

    ``single_mixed`` fits one expert on the even mixture. ``moe_lora`` starts
    from the stage-1 experts with fresh token gates; ``moe_lora_naive`` is the
    same architecture from freshly initialized experts. ``classifier`` trains
    the prompt classifier that dispatches to stage-1 experts.
    """
    datasets = _as_datasets(datasets)
    if kind == "single_mixed":
        expert, hist = train_expert(base, datasets, cfg, domain_id=0, rank=rank, scale=scale, val=val, name="single_mixed")
        return SingleLoraModel(base, expert), hist
    if kind in ("moe_lora", "moe_lora_naive"):
        if kind == "moe_lora":
            if experts is None:
                raise ValueError("moe_lora starts from stage-1 experts")
            if len(experts) != len(datasets):
                raise ValueError(f"{len(experts)} experts for {len(datasets)} domain datasets")
            pool = [e.copy() for e in experts]
        else:
            n = len(experts) if experts is not None else len(datasets)
            pool = [
                LoraExpert.create(base.config, i, rank=rank, seed=cfg.seed * 7919 + i + 1, scale=scale, dtype=base.dtype)
                for i in range(n)
            ]
        model = MoeLoraModel.create(base, pool, seed=cfg.seed)

        def loss_fn(b: Batch, n_tok: float, n_seq: float):
            lm = moe_gate_forward(model, b.inputs, b.targets, b.loss_mask, n_tok)
            v = float(lm.data)
            return lm, {"loss": v, "lm_loss": v}

        steps = cfg.total_steps if cfg.total_steps is not None else epoch_steps(datasets, cfg.batch_size, cfg.accum_steps)
        stream = even_sample_batches(datasets, cfg.batch_size, cfg.seed)
        hist = fit(model.parameters(), loss_fn, stream, cfg, steps, kind, _ppl_evaluator(model, val, cfg, "last"))
        return model, hist
    if kind == "classifier":
        if experts is None:
            raise ValueError("classifier baseline dispatches to stage-1 experts")
        clf, hist = train_classifier(base, datasets, cfg)
        return ClassifierLoras(base, experts, clf), hist
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")


def warmup_base(base: BaseModel, texts: Sequence[str], steps: int, lr: float = 1e-3, batch_size: int = 16, seed: int = 0) -> TrainHistory:
    """Short full-parameter LM pass standing in for pretraining; the base is frozen again afterwards."""
    records = []
    for t in texts:
        ids = tokenize(t)
        cut = max(1, len(ids) // 2)
        records.append(DomainRecord(0, "generic", tuple(ids[:cut]), tuple(ids[cut:]) or (32,)))
    params = list(base.params.values())
    for p in params:
        p.requires_grad = True
    cfg = TrainConfig(peak_lr=lr, total_steps=steps, accum_steps=1, batch_size=batch_size, clip_norm=1.0, seed=seed)
    loss = _lora_micro_loss(SingleLoraModel(base, None))
    try:
        hist = fit(params, loss, even_sample_batches([records], batch_size, seed), cfg, steps, "base_warmup")
    finally:
        for p in params:
            p.requires_grad = False
            p.grad = None
    return hist
