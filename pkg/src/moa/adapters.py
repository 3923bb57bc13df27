"""LoRA experts, per-layer routers and the models built from them.

Model wrappers share one small interface used by training and evaluation:
``attachment()`` returns the :class:`AttachmentPlan` for the base forward and
``route(prompts, prompt_lengths, labels, strategy)`` returns the routing
context for a batch (``None`` when the model does not route by sequence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .transformer import (
    MATRICES,
    AttachmentPlan,
    BaseModel,
    ForwardOutput,
    ModelConfig,
    RoutingError,
    base_forward,
    lora_delta,
    tensors_checksum,
)

STRATEGIES = ("oracle", "vote", "last")


# ---------------------------------------------------------------------------
# experts


@dataclass
class LoraExpert:
    """One domain module: an ``(A, B)`` pair for each adapted matrix of each layer."""

    domain_id: int
    rank: int
    scale: float = 1.0
    A: dict[tuple[int, str], Tensor] = field(default_factory=dict)
    B: dict[tuple[int, str], Tensor] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        domain_id: int,
        rank: int = 8,
        seed: int = 0,
        scale: float = 1.0,
        matrices: Sequence[str] = MATRICES,
        dtype=np.float32,
    ) -> "LoraExpert":
        rng = np.random.default_rng(seed)
        expert = cls(domain_id, rank, scale)
        for layer in range(config.num_layers):
            for m in matrices:
                d_in, d_out = config.matrix_shape(m)
                expert.A[(layer, m)] = Tensor(rng.normal(0.0, 0.02, (d_in, rank)).astype(dtype), requires_grad=True)
                expert.B[(layer, m)] = Tensor(np.zeros((rank, d_out), dtype=dtype), requires_grad=True)
        return expert

    def has(self, layer: int, matrix: str) -> bool:
        return (layer, matrix) in self.A

    def factors(self, layer: int, matrix: str) -> tuple[Tensor, Tensor]:
        return self.A[(layer, matrix)], self.B[(layer, matrix)]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for (layer, m) in sorted(self.A, key=lambda k: (k[0], MATRICES.index(k[1]))):
            out[f"layer.{layer}.{m}.A"] = self.A[(layer, m)]
            out[f"layer.{layer}.{m}.B"] = self.B[(layer, m)]
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def copy(self, domain_id: int | None = None) -> "LoraExpert":
        dup = LoraExpert(self.domain_id if domain_id is None else domain_id, self.rank, self.scale)
        for key in self.A:
            dup.A[key] = Tensor(self.A[key].data.copy(), requires_grad=True)
            dup.B[key] = Tensor(self.B[key].data.copy(), requires_grad=True)
        return dup

    def checksum(self) -> str:
        return tensors_checksum(self.named_tensors())

    @classmethod
    def from_named(cls, named: dict[str, Tensor], domain_id: int, scale: float = 1.0) -> "LoraExpert":
        expert = cls(domain_id, 0, scale)
        for name, t in named.items():
            _, layer, m, which = name.split(".")
            target = expert.A if which == "A" else expert.B
            target[(int(layer), m)] = Tensor(t.data.copy(), requires_grad=True)
        expert.rank = next(iter(expert.A.values())).shape[1]
        return expert


def apply_expert(x: Tensor, w0: Tensor, expert: LoraExpert, layer: int, matrix: str) -> Tensor:
    """``x W0 + scale * (x A) B`` for one adapted matrix; never forms ``A B``."""
    A, B = expert.factors(layer, matrix)
    if x.shape[-1] != w0.shape[0] or A.shape[0] != w0.shape[0] or B.shape[1] != w0.shape[1]:
        raise T.ShapeError(f"apply_expert: x {x.shape}, W0 {w0.shape}, A {A.shape}, B {B.shape}")
    return T.add(T.matmul(x, w0), lora_delta(x, A, B, expert.scale))


def merge_expert(base: BaseModel, expert: LoraExpert) -> BaseModel:
    """Fold ``scale * A B`` into the base weights (dense, for verification and export)."""
    params = {name: Tensor(t.data.copy()) for name, t in base.params.items()}
    for (layer, m), A in expert.A.items():
        B = expert.B[(layer, m)]
        key = f"layer.{layer}.{m}"
        params[key] = Tensor(params[key].data + expert.scale * (A.data @ B.data))
    return BaseModel(base.config, params)


# ---------------------------------------------------------------------------
# routers


@dataclass
class RouterLayer:
    """Pooled hidden state -> N expert logits; linear unless ``mlp_hidden`` is set."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def create(cls, hidden_dim: int, n_experts: int, seed: int = 0, mlp_hidden: int | None = None, dtype=np.float32):
        rng = np.random.default_rng(seed)
        dims = [hidden_dim] + ([mlp_hidden] if mlp_hidden else []) + [n_experts]
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            ws.append(Tensor(rng.normal(0.0, 0.02, (a, b)).astype(dtype), requires_grad=True))
            bs.append(Tensor(np.zeros(b, dtype=dtype), requires_grad=True))
        return cls(ws, bs)

    @property
    def n_experts(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def mlp_hidden(self) -> int | None:
        return self.weights[0].shape[1] if len(self.weights) > 1 else None

    def __call__(self, pooled: Tensor) -> Tensor:
        z = pooled
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i:
                z = T.gelu(z)
            z = T.add(T.matmul(z, w), b)
        return z

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            suffix = "" if i == 0 else str(i)
            out[f"W{suffix}"] = w
            out[f"b{suffix}"] = b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    @classmethod
    def from_named(cls, named: dict[str, Tensor]) -> "RouterLayer":
        ws, bs, i = [], [], 0
        while True:
            suffix = "" if i == 0 else str(i)
            if f"W{suffix}" not in named:
                break
            ws.append(Tensor(named[f"W{suffix}"].data.copy(), requires_grad=True))
            bs.append(Tensor(named[f"b{suffix}"].data.copy(), requires_grad=True))
            i += 1
        return cls(ws, bs)


def router_logits(router: RouterLayer, layer_input: Tensor, valid_lengths) -> Tensor:
    """Sequence-level logits: mean over the first ``valid_lengths`` positions, then the router."""
    lengths = np.asarray(valid_lengths, dtype=np.int64)
    if lengths.size and lengths.max() > layer_input.shape[1]:
        raise T.ShapeError(f"valid length {lengths.max()} exceeds sequence dimension {layer_input.shape[1]}")
    return router(T.mean_pool(layer_input, lengths))


def count_router_params(num_layers: int, hidden_dim: int, n_experts: int, mlp_hidden: int | None = None) -> int:
    if mlp_hidden:
        return num_layers * (hidden_dim * mlp_hidden + mlp_hidden + mlp_hidden * n_experts + n_experts)
    return num_layers * (hidden_dim * n_experts + n_experts)


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "last"

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown selection strategy {self.kind!r}; expected one of {STRATEGIES}")


def _as_kind(strategy) -> str:
    return strategy.kind if isinstance(strategy, SelectionStrategy) else SelectionStrategy(str(strategy)).kind


def aggregate_votes(votes: np.ndarray, probs: np.ndarray, kind: str) -> np.ndarray:
    """Collapse per-layer decisions into one expert per sequence.

    ``votes`` is ``(L, B)`` argmaxes and ``probs`` is ``(L, B, N)`` router
    softmaxes. ``vote`` takes the majority; ties go to the higher summed
    probability, then the lower index.
    """
    if kind == "last":
        return votes[-1].copy()
    L, bsz, n = probs.shape
    out = np.empty(bsz, dtype=np.int64)
    for b in range(bsz):
        counts = np.bincount(votes[:, b], minlength=n)
        tied = np.flatnonzero(counts == counts.max())
        if len(tied) > 1:
            mass = probs[:, b, tied].sum(axis=0)
            tied = tied[mass == mass.max()]
        out[b] = tied.min()
    return out


# ---------------------------------------------------------------------------
# model wrappers


class SingleLoraModel:
    def __init__(self, base: BaseModel, expert: LoraExpert | None):
        self.base = base
        self.expert = expert

    def attachment(self) -> AttachmentPlan:
        if self.expert is None:
            return AttachmentPlan()
        return AttachmentPlan.uniform("single", [self.expert], self.base.config)

    def route(self, prompts, prompt_lengths, labels=None, strategy="oracle"):
        return None

    def parameters(self) -> list[Tensor]:
        return [] if self.expert is None else self.expert.parameters()


class MoaModel:
    """N domain experts routed per sequence by one router per transformer layer."""

    def __init__(self, base: BaseModel, experts: Sequence[LoraExpert], routers: Sequence[RouterLayer], eta: float = 0.1):
        if len(experts) < 2:
            raise ValueError("a mixture needs at least two experts")
        if len(routers) != base.config.num_layers:
            raise ValueError(f"need one router per layer ({base.config.num_layers}), got {len(routers)}")
        for r in routers:
            if r.n_experts != len(experts):
                raise ValueError(f"router emits {r.n_experts} logits for {len(experts)} experts")
        self.base = base
        self.experts = list(experts)
        self.routers = list(routers)
        self.eta = float(eta)

    @classmethod
    def create(cls, base: BaseModel, experts, eta: float = 0.1, seed: int = 0, mlp_hidden: int | None = None):
        cfg = base.config
        routers = [
            RouterLayer.create(cfg.hidden_dim, len(experts), seed=seed * 1000 + layer, mlp_hidden=mlp_hidden, dtype=base.dtype)
            for layer in range(cfg.num_layers)
        ]
        return cls(base, experts, routers, eta)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def attachment(self) -> AttachmentPlan:
        return AttachmentPlan.uniform("routed", self.experts, self.base.config)

    def parameters(self) -> list[Tensor]:
        return [p for e in self.experts for p in e.parameters()] + self.router_parameters()

    def router_parameters(self) -> list[Tensor]:
        return [p for r in self.routers for p in r.parameters()]

    def route(self, prompts, prompt_lengths, labels=None, strategy="last"):
        kind = _as_kind(strategy)
        if kind == "oracle":
            if labels is None:
                raise RoutingError("oracle strategy needs domain labels")
            return np.asarray(labels, dtype=np.int64)
        chosen, _, _ = select_experts(self, prompts, prompt_lengths, kind)
        return chosen


def select_experts(model: MoaModel, prompts, prompt_lengths, strategy="last"):
    """Batched expert selection from prompts.

    Each layer's router scores the state entering that layer and its argmax
    expert is applied in that layer for the rest of the pass. Returns
    ``(chosen (B,), votes (L, B), probs (L, B, N))``.
    """
    kind = _as_kind(strategy)
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim == 1:
        prompts = prompts[None, :]
    lengths = np.asarray(prompt_lengths, dtype=np.int64).reshape(-1)
    if prompts.shape[1] == 0 or lengths.min(initial=1) < 1:
        raise ValueError("empty prompt")
    votes, probs = [], []

    def choose(layer, h):
        logits = router_logits(model.routers[layer], h, lengths).data
        p = T._softmax_np(logits.astype(np.float64))
        probs.append(p)
        votes.append(logits.argmax(axis=-1))
        return votes[-1]

    with T.no_grad():
        base_forward(model.base, prompts, model.attachment(), choose)
    votes_arr = np.stack(votes)
    probs_arr = np.stack(probs)
    if kind == "oracle":
        raise RoutingError("oracle strategy needs domain labels")
    return aggregate_votes(votes_arr, probs_arr, kind), votes_arr, probs_arr


def select_expert(model: MoaModel, prompt: Sequence[int], strategy="last", label: int | None = None):
    """Pick one expert for a single request; returns ``(index, per-layer votes)``."""
    prompt = list(prompt)
    if not prompt:
        raise ValueError("empty prompt")
    kind = _as_kind(strategy)
    if kind == "oracle":
        if label is None:
            raise RoutingError("oracle strategy needs a domain label")
        return int(label), []
    chosen, votes, _ = select_experts(model, [prompt], [len(prompt)], kind)
    return int(chosen[0]), [int(v) for v in votes[:, 0]]


def moa_train_forward(
    model: MoaModel,
    inputs,
    targets,
    loss_mask,
    valid_lengths,
    labels,
    token_denom: float | None = None,
    seq_denom: float | None = None,
):
    """Teacher-forced forward: returns ``(lm_loss, cls_loss, per-layer router logits)``.

    Every sequence runs through the expert of its own domain label. The
    classification term averages cross-entropy over layers and sequences.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (np.asarray(inputs).shape[0],):
        raise RoutingError("every sequence needs a domain label")
    if labels.min() < 0 or labels.max() >= model.n_experts:
        raise RoutingError(f"domain label outside [0, {model.n_experts})")
    out: ForwardOutput = base_forward(model.base, inputs, model.attachment(), labels)
    lm = T.cross_entropy(out.logits, targets, loss_mask, denom=token_denom)
    L = len(model.routers)
    nseq = len(labels) if seq_denom is None else seq_denom
    per_layer = [router_logits(r, h, valid_lengths) for r, h in zip(model.routers, out.layer_inputs)]
    cls = None
    for logits in per_layer:
        term = T.cross_entropy(logits, labels, denom=nseq * L)
        cls = term if cls is None else T.add(cls, term)
    return lm, cls, per_layer


def moa_total_loss(lm: Tensor, cls: Tensor, eta: float) -> Tensor:
    return T.add(lm, T.scale(cls, eta))


# ---------------------------------------------------------------------------
# token-gated baseline


class MoeLoraModel:
    """Experts beside every matrix with a per-token top-1 softmax gate and no routing loss."""

    def __init__(self, base: BaseModel, experts: Sequence[LoraExpert], gates: dict[tuple[int, str], tuple[Tensor, Tensor]]):
        self.base = base
        self.experts = list(experts)
        self.gates = gates

    @classmethod
    def create(cls, base: BaseModel, experts, seed: int = 0):
        rng = np.random.default_rng(seed)
        d, n = base.config.hidden_dim, len(experts)
        keys = sorted({k for e in experts for k in e.A}, key=lambda k: (k[0], MATRICES.index(k[1])))
        gates = {
            k: (
                Tensor(rng.normal(0.0, 0.02, (d, n)).astype(base.dtype), requires_grad=True),
                Tensor(np.zeros(n, dtype=base.dtype), requires_grad=True),
            )
            for k in keys
        }
        return cls(base, experts, gates)

    def attachment(self) -> AttachmentPlan:
        return AttachmentPlan.uniform("gated", self.experts, self.base.config, gates=self.gates)

    def route(self, prompts, prompt_lengths, labels=None, strategy="last"):
        return None

    def gate_parameters(self) -> list[Tensor]:
        return [t for pair in self.gates.values() for t in pair]

    def parameters(self) -> list[Tensor]:
        return [p for e in self.experts for p in e.parameters()] + self.gate_parameters()


def moe_gate_forward(model: MoeLoraModel, inputs, targets, loss_mask, token_denom: float | None = None) -> Tensor:
    out = base_forward(model.base, inputs, model.attachment())
    return T.cross_entropy(out.logits, targets, loss_mask, denom=token_denom)


# ---------------------------------------------------------------------------
# classifier two-stage baseline


class DomainClassifier:
    """Mean of token embeddings followed by a linear layer."""

    def __init__(self, embed: Tensor, weight: Tensor, bias: Tensor):
        self.embed, self.weight, self.bias = embed, weight, bias

    @classmethod
    def create(cls, vocab_size: int, dim: int, n_domains: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        return cls(
            Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), (vocab_size, dim)).astype(dtype), requires_grad=True),
            Tensor(rng.normal(0.0, 0.02, (dim, n_domains)).astype(dtype), requires_grad=True),
            Tensor(np.zeros(n_domains, dtype=dtype), requires_grad=True),
        )

    def logits(self, prompts, lengths) -> Tensor:
        emb = T.embedding_lookup(self.embed, np.asarray(prompts, dtype=np.int64))
        return T.add(T.matmul(T.mean_pool(emb, lengths), self.weight), self.bias)

    def named_tensors(self) -> dict[str, Tensor]:
        return {"embed": self.embed, "W": self.weight, "b": self.bias}

    def parameters(self) -> list[Tensor]:
        return [self.embed, self.weight, self.bias]

    def predict(self, prompts, lengths) -> np.ndarray:
        with T.no_grad():
            return self.logits(prompts, lengths).data.argmax(axis=-1)


def classifier_select(classifier: DomainClassifier, prompt: Sequence[int]) -> int:
    prompt = list(prompt)
    if not prompt:
        raise ValueError("empty prompt")
    return int(classifier.predict([prompt], [len(prompt)])[0])


class ClassifierLoras:
    """A standalone classifier dispatches each request to one stage-1 expert."""

    def __init__(self, base: BaseModel, experts: Sequence[LoraExpert], classifier: DomainClassifier):
        self.base = base
        self.experts = list(experts)
        self.classifier = classifier

    def attachment(self) -> AttachmentPlan:
        return AttachmentPlan.uniform("routed", self.experts, self.base.config)

    def route(self, prompts, prompt_lengths, labels=None, strategy="last"):
        if _as_kind(strategy) == "oracle":
            if labels is None:
                raise RoutingError("oracle strategy needs domain labels")
            return np.asarray(labels, dtype=np.int64)
        return self.classifier.predict(prompts, prompt_lengths)

    def parameters(self) -> list[Tensor]:
        return self.classifier.parameters()
