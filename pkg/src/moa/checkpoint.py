"""Single-file checkpoints of named float32 tensors.

Layout::

    b"MOA1" | uint32 version | uint64 metadata length | metadata (UTF-8 JSON) | payload

All integers are little-endian. The metadata holds the model config,
tokenizer id, provenance fields and a tensor index of
``{name, shape, offset, nbytes, crc32}`` entries; offsets are relative to
the start of the payload, which stores row-major little-endian float32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from .adapters import (
    ClassifierLoras,
    DomainClassifier,
    LoraExpert,
    MoaModel,
    MoeLoraModel,
    RouterLayer,
    SingleLoraModel,
    count_router_params,
)
from .data import TOKENIZER_ID
from .tensor import Tensor
from .transformer import MATRICES, BaseModel, ModelConfig

MAGIC = b"MOA1"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
KINDS = ("base", "expert", "single_mixed", "moa", "moe_lora", "moe_lora_naive", "classifier")


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted checkpoint, or a missing tensor."""


def atomic_write_bytes(path: str | os.PathLike, chunks) -> None:
    """Write to a temporary sibling and rename into place only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} is {arr.dtype}; checkpoints store float32 only")
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob), "crc32": zlib.crc32(blob)})
        blobs.append(blob)
        offset += len(blob)
    if len({e["name"] for e in index}) != len(index):
        raise CheckpointError("duplicate tensor names")
    doc = dict(meta)
    doc["format_version"] = VERSION
    doc.setdefault("tokenizer", TOKENIZER_ID)
    doc["tensors"] = index
    raw = json.dumps(doc, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, [_HEADER.pack(MAGIC, VERSION, len(raw)), raw, *blobs])


def read_meta(path) -> tuple[dict, int, bytes]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _HEADER.size + mlen
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[_HEADER.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    return meta, start, data


def load_tensors(path, names: list[str] | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify tensors; ``names`` restricts the load to a subset."""
    meta, start, data = read_meta(path)
    payload = memoryview(data)[start:]
    index = {e["name"]: e for e in meta.get("tensors", [])}
    if len(index) != len(meta.get("tensors", [])):
        raise CheckpointError(f"{path}: duplicate tensor names in index")
    spans = sorted((e["offset"], e["offset"] + e["nbytes"], e["name"]) for e in index.values())
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"{path}: tensors {an!r} and {bn!r} overlap")
    wanted = list(index) if names is None else list(names)
    missing = [n for n in wanted if n not in index]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:5]}{'...' if len(missing) > 5 else ''}")
    out = {}
    for name in wanted:
        e = index[name]
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if lo < 0 or hi > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {name!r}")
        blob = payload[lo:hi]
        if zlib.crc32(blob) != e["crc32"]:
            raise CheckpointError(f"{path}: integrity check failed for tensor {name!r}")
        shape = tuple(e["shape"])
        if int(np.prod(shape, dtype=np.int64)) * 4 != e["nbytes"]:
            raise CheckpointError(f"{path}: size of {name!r} disagrees with its shape")
        out[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
    return meta, out


# ---------------------------------------------------------------------------
# models <-> named tensors


def _expert_info(e: LoraExpert, name: str | None = None) -> dict:
    return {"domain_id": e.domain_id, "rank": e.rank, "scale": e.scale, "name": name}


def model_tensors(model) -> tuple[str, dict[str, np.ndarray], dict]:
    """Flatten a model into ``(kind, named arrays, structural metadata)``."""
    if isinstance(model, BaseModel):
        base, experts, kind = model, [], "base"
    else:
        base = model.base
        if isinstance(model, SingleLoraModel):
            experts, kind = ([] if model.expert is None else [model.expert]), "expert"
        elif isinstance(model, MoaModel):
            experts, kind = model.experts, "moa"
        elif isinstance(model, MoeLoraModel):
            experts, kind = model.experts, "moe_lora"
        elif isinstance(model, ClassifierLoras):
            experts, kind = model.experts, "classifier"
        else:
            raise CheckpointError(f"cannot serialize {type(model).__name__}")
    named = {f"base.{k}": v.data for k, v in base.params.items()}
    for i, e in enumerate(experts):
        named.update({f"expert.{i}.{k}": v.data for k, v in e.named_tensors().items()})
    struct_meta: dict[str, Any] = {"experts": [_expert_info(e) for e in experts]}
    if isinstance(model, MoaModel):
        for l, r in enumerate(model.routers):
            named.update({f"router.{l}.{k}": v.data for k, v in r.named_tensors().items()})
        struct_meta.update(eta=model.eta, mlp_hidden=model.routers[0].mlp_hidden)
    elif isinstance(model, MoeLoraModel):
        for (l, m), (w, b) in model.gates.items():
            named[f"gate.layer.{l}.{m}.W"] = w.data
            named[f"gate.layer.{l}.{m}.b"] = b.data
    elif isinstance(model, ClassifierLoras):
        named.update({f"classifier.{k}": v.data for k, v in model.classifier.named_tensors().items()})
    return kind, named, struct_meta


def save_model(model, path, kind: str | None = None, **meta) -> None:
    """Save ``model``; extra keyword metadata (stage, seed, step, config, ...) is stored verbatim."""
    auto_kind, named, struct_meta = model_tensors(model)
    config = model.config if isinstance(model, BaseModel) else model.base.config
    doc = {"kind": kind or auto_kind, "model_config": config.to_dict(), **struct_meta}
    names = meta.pop("expert_names", None)
    if names:
        for info, n in zip(doc["experts"], names):
            info["name"] = n
    doc.update(meta)
    save_tensors(path, named, doc)


def _prefixed(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: Tensor(v) for k, v in tensors.items() if k.startswith(prefix)}


def _base_from(meta: dict, tensors: dict[str, np.ndarray]) -> BaseModel:
    config = ModelConfig(**meta["model_config"])
    params = _prefixed(tensors, "base.")
    if not params:
        raise CheckpointError("checkpoint has no base tensors")
    return BaseModel(config, params)


def _experts_from(meta: dict, tensors: dict[str, np.ndarray]) -> list[LoraExpert]:
    out = []
    for i, info in enumerate(meta.get("experts", [])):
        named = _prefixed(tensors, f"expert.{i}.")
        if not named:
            raise CheckpointError(f"missing tensors for expert {i}")
        out.append(LoraExpert.from_named(named, info["domain_id"], info["scale"]))
    return out


def load_model(path):
    """Rebuild the model saved at ``path``; returns ``(model, metadata)``."""
    meta, tensors = load_tensors(path)
    kind = meta.get("kind")
    base = _base_from(meta, tensors)
    experts = _experts_from(meta, tensors)
    if kind == "base":
        return base, meta
    if kind in ("expert", "single_mixed"):
        return SingleLoraModel(base, experts[0] if experts else None), meta
    if kind == "moa":
        routers = []
        for l in range(base.config.num_layers):
            named = _prefixed(tensors, f"router.{l}.")
            if not named:
                raise CheckpointError(f"missing router tensors for layer {l}")
            routers.append(RouterLayer.from_named(named))
        return MoaModel(base, experts, routers, meta.get("eta", 0.1)), meta
    if kind in ("moe_lora", "moe_lora_naive"):
        gates = {}
        for l in range(base.config.num_layers):
            for m in MATRICES:
                w = tensors.get(f"gate.layer.{l}.{m}.W")
                if w is not None:
                    gates[(l, m)] = (Tensor(w, requires_grad=True), Tensor(tensors[f"gate.layer.{l}.{m}.b"], requires_grad=True))
        return MoeLoraModel(base, experts, gates), meta
    if kind == "classifier":
        c = _prefixed(tensors, "classifier.")
        if set(c) != {"embed", "W", "b"}:
            raise CheckpointError("missing classifier tensors")
        return ClassifierLoras(base, experts, DomainClassifier(c["embed"], c["W"], c["b"])), meta
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


# ---------------------------------------------------------------------------
# expert modularity


def load_expert(path, index: int = 0) -> LoraExpert:
    """Extract one expert by name prefix ``expert.{index}.`` from any checkpoint."""
    meta, _, _ = read_meta(path)
    infos = meta.get("experts", [])
    if not 0 <= index < len(infos):
        raise CheckpointError(f"{path}: no expert {index} (checkpoint has {len(infos)})")
    prefix = f"expert.{index}."
    names = [e["name"] for e in meta["tensors"] if e["name"].startswith(prefix)]
    if not names:
        raise CheckpointError(f"{path}: missing tensors for expert {index}")
    _, tensors = load_tensors(path, names)
    info = infos[index]
    return LoraExpert.from_named(_prefixed(tensors, prefix), info["domain_id"], info["scale"])


def attach_expert(model: MoaModel, expert: LoraExpert, seed: int = 0) -> MoaModel:
    """New MoaModel with ``expert`` appended; routers gain one freshly initialized column."""
    rng = np.random.default_rng(seed)
    routers = []
    for r in model.routers:
        ws = [Tensor(w.data.copy(), requires_grad=True) for w in r.weights]
        bs = [Tensor(b.data.copy(), requires_grad=True) for b in r.biases]
        last = ws[-1].data
        col = rng.normal(0.0, 0.02, (last.shape[0], 1)).astype(last.dtype)
        ws[-1] = Tensor(np.concatenate([last, col], axis=1), requires_grad=True)
        bs[-1] = Tensor(np.concatenate([bs[-1].data, np.zeros(1, dtype=last.dtype)]), requires_grad=True)
        routers.append(RouterLayer(ws, bs))
    dup = expert.copy(domain_id=model.n_experts)
    return MoaModel(model.base, [*model.experts, dup], routers, model.eta)


def detach_expert(model: MoaModel, index: int) -> MoaModel:
    """New MoaModel without expert ``index``; its router column is dropped, everything else is shared."""
    if not 0 <= index < model.n_experts:
        raise IndexError(f"no expert {index}")
    keep = [i for i in range(model.n_experts) if i != index]
    routers = []
    for r in model.routers:
        ws = list(r.weights[:-1]) + [Tensor(r.weights[-1].data[:, keep].copy(), requires_grad=True)]
        bs = list(r.biases[:-1]) + [Tensor(r.biases[-1].data[keep].copy(), requires_grad=True)]
        routers.append(RouterLayer(ws, bs))
    return MoaModel(model.base, [model.experts[i] for i in keep], routers, model.eta)


def param_counts(meta: dict) -> dict[str, int]:
    """Parameter totals from a checkpoint's metadata alone."""
    groups: dict[str, int] = {}
    for e in meta.get("tensors", []):
        g = e["name"].split(".")[0]
        groups[g] = groups.get(g, 0) + int(np.prod(e["shape"], dtype=np.int64))
    cfg = meta.get("model_config", {})
    n = len(meta.get("experts", []))
    if meta.get("kind") == "moa" and cfg:
        groups["router_formula"] = count_router_params(cfg["num_layers"], cfg["hidden_dim"], n, meta.get("mlp_hidden"))
    return groups
