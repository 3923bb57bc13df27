"""Frozen decoder-only transformer with LoRA hook points on every projection."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

MATRICES = ("q", "k", "v", "o", "up", "down")

# per-sequence expert indices, or a callback choosing them layer by layer
RoutingCtx = Union[np.ndarray, Sequence[int], Callable[[int, Tensor], np.ndarray], None]


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 256
    max_seq_len: int = 256
    rope_enabled: bool = True

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.rope_enabled and (self.hidden_dim // self.num_heads) % 2:
            raise ValueError("rotary encoding needs an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def matrix_shape(self, matrix: str) -> tuple[int, int]:
        d, f = self.hidden_dim, self.ffn_dim
        return {"up": (d, f), "down": (f, d)}.get(matrix, (d, d))

    def to_dict(self) -> dict:
        return asdict(self)


def count_base_params(config: ModelConfig) -> int:
    """Closed form: embeddings + L * (4 d^2 + 2 d f + 2 d) + final norm + head."""
    d, f, V, L = config.hidden_dim, config.ffn_dim, config.vocab_size, config.num_layers
    return V * d + L * (4 * d * d + 2 * d * f + 2 * d) + d + d * V


class BaseModel:
    """Named bag of frozen base tensors.

    Names: ``embed``, ``layer.{l}.{q,k,v,o,up,down}``, ``layer.{l}.attn_norm``,
    ``layer.{l}.ffn_norm``, ``final_norm``, ``head``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        for t in params.values():
            t.requires_grad = False
            t.grad = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def weight(self, layer: int, matrix: str) -> Tensor:
        return self.params[f"layer.{layer}.{matrix}"]

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def checksum(self) -> str:
        return tensors_checksum(self.params)


def tensors_checksum(named: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(named):
        h.update(name.encode())
        h.update(np.ascontiguousarray(named[name].data).tobytes())
    return h.hexdigest()


def init_base(config: ModelConfig, seed: int, dtype=np.float32) -> BaseModel:
    rng = np.random.default_rng(seed)
    d, V = config.hidden_dim, config.vocab_size

    def gauss(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype))

    params = {"embed": gauss(V, d)}
    for layer in range(config.num_layers):
        for m in MATRICES:
            params[f"layer.{layer}.{m}"] = gauss(*config.matrix_shape(m))
        params[f"layer.{layer}.attn_norm"] = Tensor(np.ones(d, dtype=dtype))
        params[f"layer.{layer}.ffn_norm"] = Tensor(np.ones(d, dtype=dtype))
    params["final_norm"] = Tensor(np.ones(d, dtype=dtype))
    params["head"] = gauss(d, V)
    return BaseModel(config, params)


# ---------------------------------------------------------------------------
# attachments


@dataclass
class Slot:
    """What sits beside one base matrix.

    ``single`` applies ``experts[0]``; ``routed`` applies the per-sequence
    expert named by the routing context; ``gated`` picks a top-1 expert per
    token with ``gate = (W, b)`` reading the layer input.
    """

    kind: str
    experts: tuple
    gate: tuple[Tensor, Tensor] | None = None

    def __post_init__(self):
        if self.kind not in ("single", "routed", "gated"):
            raise ValueError(f"unknown slot kind {self.kind!r}")
        if not self.experts:
            raise ValueError("slot needs at least one expert")
        if self.kind == "gated" and self.gate is None:
            raise ValueError("gated slot needs gate parameters")


@dataclass
class AttachmentPlan:
    slots: dict[tuple[int, str], Slot] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.slots

    @property
    def needs_routing(self) -> bool:
        return any(s.kind == "routed" for s in self.slots.values())

    def validate(self, config: ModelConfig) -> None:
        for (layer, m), slot in self.slots.items():
            shape = config.matrix_shape(m)
            for e in slot.experts:
                A, B = e.factors(layer, m)
                if (A.shape[0], B.shape[1]) != shape or A.shape[1] != B.shape[0]:
                    raise T.ShapeError(f"expert factors {A.shape}x{B.shape} do not fit layer {layer} {m} {shape}")

    @classmethod
    def uniform(cls, kind: str, experts: Sequence, config: ModelConfig, matrices=MATRICES, gates=None) -> "AttachmentPlan":
        slots = {}
        for layer in range(config.num_layers):
            for m in matrices:
                if not all(e.has(layer, m) for e in experts):
                    continue
                gate = gates[(layer, m)] if gates is not None else None
                slots[(layer, m)] = Slot(kind, tuple(experts), gate)
        return cls(slots)


def lora_delta(x: Tensor, A: Tensor, B: Tensor, scale: float) -> Tensor:
    return T.scale(T.matmul(T.matmul(x, A), B), scale)


def _project(x, w0, slot: Slot | None, layer: int, matrix: str, layer_input: Tensor, route: np.ndarray | None):
    y = T.matmul(x, w0)
    if slot is None:
        return y
    if slot.kind == "single":
        e = slot.experts[0]
        return T.add(y, lora_delta(x, *e.factors(layer, matrix), e.scale))
    if slot.kind == "routed":
        present = np.unique(route)
        if len(present) == 1:
            e = slot.experts[int(present[0])]
            return T.add(y, lora_delta(x, *e.factors(layer, matrix), e.scale))
        # group sequences by expert, run each group through its own factors, restore order
        order = np.argsort(route, kind="stable")
        sorted_route = route[order]
        shuffled = not np.array_equal(order, np.arange(len(route)))
        xs = T.take_rows(x, order) if shuffled else x
        pieces = []
        for idx in present:
            lo, hi = np.searchsorted(sorted_route, [idx, idx + 1])
            e = slot.experts[int(idx)]
            pieces.append(lora_delta(T.slice_axis(xs, 0, int(lo), int(hi)), *e.factors(layer, matrix), e.scale))
        delta = T.concat(pieces, axis=0)
        if shuffled:
            delta = T.take_rows(delta, np.argsort(order))
        return T.add(y, delta)
    # token-level top-1 gate, weighted by the winner's softmax probability
    gw, gb = slot.gate
    probs = T.softmax(T.add(T.matmul(layer_input, gw), gb))
    n = len(slot.experts)
    if n == 1:
        e = slot.experts[0]
        w = T.reshape(probs, probs.shape[:-1])
        return T.add(y, T.scale_rows(lora_delta(x, *e.factors(layer, matrix), e.scale), w))
    lead = x.shape[:-1]
    xf = T.reshape(x, (-1, x.shape[-1]))
    pf = T.reshape(probs, (-1, n))
    top = pf.data.argmax(axis=-1)
    pieces, perm = [], []
    for idx in range(n):
        rows = np.flatnonzero(top == idx)
        if not rows.size:
            continue
        e = slot.experts[idx]
        w = T.take_rows(T.reshape(T.slice_axis(pf, -1, idx, idx + 1), (-1,)), rows)
        pieces.append(T.scale_rows(lora_delta(T.take_rows(xf, rows), *e.factors(layer, matrix), e.scale), w))
        perm.append(rows)
    delta = T.take_rows(T.concat(pieces, axis=0), np.argsort(np.concatenate(perm)))
    return T.add(y, T.reshape(delta, lead + (delta.shape[-1],)))


@dataclass
class ForwardOutput:
    logits: Tensor
    layer_inputs: list[Tensor]
    routes: list[np.ndarray | None]


_rope_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def rope_tables(seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    key = (seq_len, head_dim)
    if key not in _rope_cache:
        half = head_dim // 2
        inv = 1.0 / (10000.0 ** (np.arange(half) / half))
        ang = np.arange(seq_len)[:, None] * inv[None, :]
        ang = np.concatenate([ang, ang], axis=-1)
        _rope_cache[key] = (np.cos(ang), np.sin(ang))
    return _rope_cache[key]


_mask_cache: dict[tuple[int, str], np.ndarray] = {}


def causal_mask(seq_len: int, dtype) -> np.ndarray:
    key = (seq_len, np.dtype(dtype).str)
    if key not in _mask_cache:
        m = np.triu(np.full((seq_len, seq_len), -1e9), k=1)
        _mask_cache[key] = m.astype(dtype)
    return _mask_cache[key]


def base_forward(
    model: BaseModel,
    tokens,
    attachment: AttachmentPlan | None = None,
    routing_ctx: RoutingCtx = None,
) -> ForwardOutput:
    """Run the transformer over a ``(batch, seq)`` token matrix.

    ``layer_inputs[l]`` is the residual stream entering layer ``l``. Routed
    slots read per-sequence expert indices from ``routing_ctx``; a callable
    context is asked for indices once per layer, with that layer's input.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    bsz, seq = tokens.shape
    if seq > cfg.max_seq_len:
        raise T.ShapeError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise T.ShapeError(f"token id out of vocabulary [0, {cfg.vocab_size})")
    attachment = attachment or AttachmentPlan()
    static_route = None
    if attachment.needs_routing:
        if routing_ctx is None:
            raise RoutingError("routed attachment requires a routing context")
        if not callable(routing_ctx):
            static_route = np.asarray(routing_ctx, dtype=np.int64).reshape(-1)
            if static_route.shape != (bsz,):
                raise RoutingError(f"routing context has {static_route.size} entries for batch of {bsz}")
            n_exp = max(len(s.experts) for s in attachment.slots.values())
            if static_route.min() < 0 or static_route.max() >= n_exp:
                raise RoutingError(f"expert index outside [0, {n_exp})")

    H, dh = cfg.num_heads, cfg.head_dim
    dtype = model.dtype
    mask = Tensor(causal_mask(seq, dtype))
    cos, sin = rope_tables(seq, dh)
    inv_sqrt = 1.0 / np.sqrt(dh)

    h = T.embedding_lookup(model["embed"], tokens)
    layer_inputs, routes = [], []
    for layer in range(cfg.num_layers):
        layer_inputs.append(h)
        route = static_route
        if attachment.needs_routing and route is None:
            route = np.asarray(routing_ctx(layer, h), dtype=np.int64)
        routes.append(route)

        def proj(x, m, _layer=layer, _h=h, _route=route):
            return _project(x, model.weight(_layer, m), attachment.slots.get((_layer, m)), _layer, m, _h, _route)

        a = T.rms_norm(h, model[f"layer.{layer}.attn_norm"])
        heads = []
        for m in ("q", "k", "v"):
            z = T.transpose(T.reshape(proj(a, m), (bsz, seq, H, dh)), (0, 2, 1, 3))
            if cfg.rope_enabled and m != "v":
                z = T.rope(z, cos, sin)
            heads.append(z)
        q, k, v = heads
        scores = T.add(T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt), mask)
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz, seq, cfg.hidden_dim))
        h = T.add(h, proj(ctx, "o"))
        f = T.rms_norm(h, model[f"layer.{layer}.ffn_norm"])
        h = T.add(h, proj(T.gelu(proj(f, "up")), "down"))
    h = T.rms_norm(h, model["final_norm"])
    logits = T.matmul(h, model["head"])
    return ForwardOutput(logits, layer_inputs, routes)
