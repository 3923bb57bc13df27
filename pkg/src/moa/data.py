"""Byte tokenizer, synthetic multi-domain corpora and mixed-domain batches.

Token ids 0..255 are raw bytes. The four specials reuse byte values that can
never occur in well-formed UTF-8 (0xFC..0xFF), so the vocabulary stays at
256 and every valid string round-trips exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

PAD, BOS, EOS, SEP = 0xFF, 0xFE, 0xFD, 0xFC
SPECIALS = frozenset((PAD, BOS, EOS, SEP))
TOKENIZER_ID = "byte-utf8-v1"
SPLITS = ("train", "validation", "test")


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(ids: Sequence[int]) -> str:
    return bytes(i for i in ids if i not in SPECIALS).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# archetypes: each returns (prompt, response, gold) from an rng

_CITIES = ["paris", "tokyo", "lima", "oslo", "cairo", "delhi", "quito", "rome", "seoul", "dakar",
           "hanoi", "perth", "accra", "bern", "doha", "kyiv", "riga", "sofia", "tunis", "baku"]
_DAYS = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"]
_WORDS = ["alpha", "bravo", "delta", "echo", "golf", "hotel", "india", "kilo", "lima", "mike",
          "oscar", "papa", "romeo", "sierra", "tango", "victor", "whisky", "yankee", "zulu", "nova"]
_NAMES = ["Ann", "Ben", "Cal", "Dee", "Eve", "Fay", "Gus", "Hal", "Ivy", "Jon", "Kim", "Lou", "Max", "Ned"]
_ITEMS = ["pens", "eggs", "cards", "coins", "books", "shells", "stamps", "beads"]
_SYMPTOMS = {
    "fever": "rest and drink fluids",
    "cough": "try warm tea and honey",
    "rash": "keep the skin clean and dry",
    "headache": "rest in a dark room",
    "sore throat": "gargle with salt water",
    "back pain": "apply gentle heat",
    "insomnia": "keep a fixed bedtime",
    "nausea": "eat small bland meals",
    "dizziness": "sit down and hydrate",
    "fatigue": "sleep eight hours",
}
_SYMPTOM_KEYS = sorted(_SYMPTOMS)


def _exam_mcq(rng: random.Random):
    kind = rng.random()
    if kind < 0.15:
        a, b = rng.randint(2, 12), rng.randint(2, 12)
        shown = a * b + rng.choice([0, 0, rng.randint(1, 5)])
        gold = "T" if shown == a * b else "F"
        return f"Exam T/F: {a} x {b} = {shown}", f"Answer: {gold}", gold
    if kind < 0.3:
        vals = rng.sample(range(1, 60), 4)
        gold = "".join("ABCD"[i] for i, v in enumerate(vals) if v % 2 == 0) or None
        if gold is None:
            vals[rng.randrange(4)] += 1
            gold = "".join("ABCD"[i] for i, v in enumerate(vals) if v % 2 == 0)
        opts = " ".join(f"({'ABCD'[i]}) {v}" for i, v in enumerate(vals))
        return f"Exam select even: {opts}", f"Answer: {gold}", gold
    a, b = rng.randint(10, 99), rng.randint(10, 99)
    op = rng.choice("+-")
    right = a + b if op == "+" else a - b
    wrong = rng.sample([d for d in range(-9, 10) if d], 3)
    vals = [right] + [right + d for d in wrong]
    rng.shuffle(vals)
    gold = "ABCD"[vals.index(right)]
    opts = " ".join(f"({'ABCD'[i]}) {v}" for i, v in enumerate(vals))
    return f"Exam Q: {a} {op} {b} = ? {opts}", f"Answer: {gold}", gold


def exam_oracle(prompt: str) -> str:
    """Recompute the gold option(s) of an exam prompt from its arithmetic."""
    if prompt.startswith("Exam T/F:"):
        lhs, shown = prompt[len("Exam T/F:"):].split("=")
        a, b = (int(t) for t in lhs.split("x"))
        return "T" if a * b == int(shown) else "F"
    body = prompt.split(":", 1)[1]
    opts = {}
    for chunk in body.split("(")[1:]:
        letter, value = chunk.split(")")
        opts[letter] = int(value)
    if prompt.startswith("Exam select even:"):
        return "".join(k for k in "ABCD" if opts[k] % 2 == 0)
    expr = body.split("=")[0].split()
    a, op, b = int(expr[0]), expr[1], int(expr[2])
    right = a + b if op == "+" else a - b
    return next(k for k in "ABCD" if opts[k] == right)


def _strict_tool(rng: random.Random):
    kind = rng.randrange(4)
    if kind == 0:
        city, day, hour = rng.choice(_CITIES), rng.choice(_DAYS), rng.randint(0, 23)
        prompt = f"<tool> weather in {city} on {day} at {hour}h"
        resp = json.dumps({"tool": "weather", "city": city, "day": day, "hour": hour}, separators=(",", ":"))
    elif kind == 1:
        mins = rng.randint(1, 180)
        label = rng.choice(_WORDS)
        prompt = f"<tool> timer {mins} min named {label}"
        resp = json.dumps({"tool": "timer", "minutes": mins, "label": label}, separators=(",", ":"))
    elif kind == 2:
        amt, src, dst = rng.randint(1, 999), rng.choice(["usd", "eur", "jpy", "gbp"]), rng.choice(["chf", "cad", "aud", "inr"])
        prompt = f"<tool> convert {amt} {src} to {dst}"
        resp = json.dumps({"tool": "fx", "amount": amt, "from": src, "to": dst}, separators=(",", ":"))
    else:
        a, b = rng.choice(_CITIES), rng.choice(_CITIES)
        day = rng.choice(_DAYS)
        prompt = f"<tool> route {a} -> {b} {day}"
        resp = json.dumps({"tool": "route", "src": a, "dst": b, "day": day}, separators=(",", ":"))
    return prompt, resp, None


def _arithmetic(rng: random.Random):
    a, b = rng.randint(0, 999), rng.randint(0, 999)
    op = rng.choice("+-*")
    if op == "*":
        b = rng.randint(0, 30)
    val = {"+": a + b, "-": a - b, "*": a * b}[op]
    return f"calc {a} {op} {b}", f"= {val}", None


def _code(rng: random.Random):
    kind = rng.randrange(3)
    if kind == 0:
        words = rng.sample(_WORDS, rng.randint(2, 3))
        camel = "".join(w.capitalize() for w in words)
        return f"py> snake('{camel}')", "_".join(words), None
    if kind == 1:
        xs = [rng.randint(0, 99) for _ in range(rng.randint(3, 5))]
        return f"py> rev({xs})", str(xs[::-1]), None
    xs = [rng.randint(0, 99) for _ in range(rng.randint(3, 5))]
    return f"py> sort({xs})", str(sorted(xs)), None


def _cot(rng: random.Random):
    name, item = rng.choice(_NAMES), rng.choice(_ITEMS)
    have, boxes, per = rng.randint(1, 20), rng.randint(2, 6), rng.randint(2, 9)
    prompt = f"Story: {name} has {have} {item}, buys {boxes} packs of {per}. Total?"
    resp = f"{boxes}*{per}={boxes * per}; {have}+{boxes * per}={have + boxes * per}. So {have + boxes * per}."
    return prompt, resp, None


def _templated_qa(rng: random.Random):
    symptom = rng.choice(_SYMPTOM_KEYS)
    age, days = rng.randint(18, 90), rng.randint(1, 14)
    prompt = f"Patient, age {age}, {symptom} for {days} days. Advice?"
    advice = _SYMPTOMS[symptom]
    tail = "see a doctor" if days > 7 or age > 70 else "recheck in 3 days"
    return prompt, f"Doctor: {advice}; {tail}.", None


ARCHETYPES: dict[str, Callable[[random.Random], tuple[str, str, str | None]]] = {
    "exam-mcq": _exam_mcq,
    "strict-format-tool": _strict_tool,
    "arithmetic-qa": _arithmetic,
    "code-transform": _code,
    "cot-chain": _cot,
    "templated-qa": _templated_qa,
}


@dataclass(frozen=True)
class DomainSpec:
    name: str
    archetype: str
    params: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise DataError(f"unknown archetype {self.archetype!r}")

    def sample(self, rng: random.Random) -> tuple[str, str, str | None]:
        return ARCHETYPES[self.archetype](rng)


DEFAULT_DOMAINS = (
    DomainSpec("exam", "exam-mcq"),
    DomainSpec("tools", "strict-format-tool"),
    DomainSpec("arith", "arithmetic-qa"),
    DomainSpec("code", "code-transform"),
    DomainSpec("cot", "cot-chain"),
    DomainSpec("medqa", "templated-qa"),
)


def default_specs(n: int | None = None) -> list[DomainSpec]:
    specs = list(DEFAULT_DOMAINS)
    return specs if n is None else specs[:n]


@dataclass(frozen=True)
class DomainRecord:
    domain_id: int
    domain: str
    prompt: tuple[int, ...]
    response: tuple[int, ...]
    gold: str | None = None

    @property
    def sequence(self) -> list[int]:
        return [BOS, *self.prompt, SEP, *self.response, EOS]

    @property
    def prompt_sequence(self) -> list[int]:
        return [BOS, *self.prompt, SEP]

    def to_json(self) -> str:
        return json.dumps(
            {"domain": self.domain, "prompt": detokenize(self.prompt), "response": detokenize(self.response), "gold": self.gold},
            ensure_ascii=False,
        )


def make_record(domain_id: int, domain: str, prompt: str, response: str, gold: str | None, max_seq_len: int) -> DomainRecord:
    if not prompt or not response:
        raise DataError(f"{domain}: prompt and response must be non-empty")
    rec = DomainRecord(domain_id, domain, tuple(tokenize(prompt)), tuple(tokenize(response)), gold)
    if len(rec.sequence) > max_seq_len:
        raise DataError(f"{domain}: record of {len(rec.sequence)} tokens exceeds max_seq_len {max_seq_len}")
    return rec


Corpus = dict[str, dict[str, list[DomainRecord]]]


def split_sizes(n_per_domain: int) -> dict[str, int]:
    held = max(1, n_per_domain // 10)
    return {"train": n_per_domain, "validation": held, "test": held}


def gen_corpus(specs: Sequence[DomainSpec], n_per_domain: int, seed: int, max_seq_len: int = 256) -> Corpus:
    """Deterministic disjoint train/validation/test splits for every domain.

    Held-out splits get ``n_per_domain // 10`` records each. Prompts are
    unique within a domain, so no record can appear in two splits.
    """
    if n_per_domain < 10:
        raise DataError("n_per_domain must be at least 10")
    sizes = split_sizes(n_per_domain)
    need = sum(sizes.values())
    corpus: Corpus = {}
    for domain_id, spec in enumerate(specs):
        digest = hashlib.sha256(f"{seed}:{spec.name}:{spec.archetype}".encode()).digest()
        rng = random.Random(int.from_bytes(digest[:8], "little"))
        seen: set[str] = set()
        records: list[DomainRecord] = []
        attempts = 0
        while len(records) < need:
            attempts += 1
            if attempts > need * 50:
                raise DataError(f"{spec.name}: could only produce {len(records)} unique prompts of {need}")
            prompt, response, gold = spec.sample(rng)
            if prompt in seen:
                continue
            seen.add(prompt)
            records.append(make_record(domain_id, spec.name, prompt, response, gold, max_seq_len))
        cut1, cut2 = sizes["train"], sizes["train"] + sizes["validation"]
        corpus[spec.name] = {"train": records[:cut1], "validation": records[cut1:cut2], "test": records[cut2:]}
    return corpus


def write_corpus(corpus: Corpus, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``{domain}.{split}.jsonl`` files atomically (temp dir, then rename)."""
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        for domain, splits in corpus.items():
            for split, recs in splits.items():
                with open(tmp / f"{domain}.{split}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
                    for r in recs:
                        fh.write(r.to_json() + "\n")
        (tmp / "domains.json").write_text(json.dumps({"domains": list(corpus), "tokenizer": TOKENIZER_ID}) + "\n")
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return sorted(out.glob("*.jsonl"))


def read_split(path: str | os.PathLike, domain_id: int, max_seq_len: int = 256) -> list[DomainRecord]:
    recs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                recs.append(make_record(domain_id, obj["domain"], obj["prompt"], obj["response"], obj.get("gold"), max_seq_len))
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return recs


def read_corpus(data_dir: str | os.PathLike, domains: Sequence[str] | None = None, max_seq_len: int = 256) -> Corpus:
    """Load a corpus directory; domain ids follow ``domains`` order (default: sorted names)."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a dataset directory")
    found = sorted({p.name.split(".")[0] for p in root.glob("*.train.jsonl")})
    names = list(domains) if domains else domain_order(root)
    missing = [n for n in names if n not in found]
    if not names or missing:
        raise DataError(f"{root}: missing train split for {missing or 'any domain'}")
    corpus: Corpus = {}
    for domain_id, name in enumerate(names):
        corpus[name] = {}
        for split in SPLITS:
            path = root / f"{name}.{split}.jsonl"
            corpus[name][split] = read_split(path, domain_id, max_seq_len) if path.exists() else []
    return corpus


def domain_order(data_dir: str | os.PathLike) -> list[str]:
    """Domains in generation order when a manifest exists, else sorted."""
    manifest = Path(data_dir) / "domains.json"
    if manifest.exists():
        return json.loads(manifest.read_text())["domains"]
    return sorted({p.name.split(".")[0] for p in Path(data_dir).glob("*.train.jsonl")})


def generic_texts(n: int, seed: int) -> list[str]:
    """Domain-neutral word/number text for warming up the synthetic base model."""
    rng = random.Random(seed)
    vocab = _WORDS + _CITIES + _DAYS + [w.lower() for w in _NAMES] + _ITEMS + ["the", "and", "of", "to", "is", "in"]
    out = []
    for _ in range(n):
        parts = []
        for _ in range(rng.randint(6, 14)):
            r = rng.random()
            parts.append(str(rng.randint(0, 999)) if r < 0.2 else rng.choice(vocab))
        out.append(" ".join(parts) + rng.choice([".", "!", "?", ","]))
    return out


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Teacher-forcing view of padded sequences.

    ``inputs``/``targets`` are ``tokens[:, :-1]``/``tokens[:, 1:]``;
    ``loss_mask`` is aligned with ``targets``. ``valid_lengths`` counts
    non-padding input positions and ``prompt_lengths`` counts BOS + prompt + SEP.
    """

    tokens: np.ndarray
    loss_mask: np.ndarray
    valid_lengths: np.ndarray
    prompt_lengths: np.ndarray
    labels: np.ndarray
    records: list[DomainRecord] = field(default_factory=list, repr=False)

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tokens(self) -> float:
        return float(self.loss_mask.sum())

    def prompts(self) -> tuple[np.ndarray, np.ndarray]:
        width = int(self.prompt_lengths.max())
        return self.tokens[:, :width], self.prompt_lengths


def make_batch(records: Sequence[DomainRecord], mask_mode: str = "full", dtype=np.float32) -> Batch:
    if not records:
        raise DataError("cannot batch zero records")
    if mask_mode not in ("full", "response"):
        raise DataError(f"unknown loss mask mode {mask_mode!r}")
    seqs = [r.sequence for r in records]
    width = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width - 1), dtype=dtype)
    for i, (s, r) in enumerate(zip(seqs, records)):
        tokens[i, : len(s)] = s
        # target position j predicts tokens[j + 1]
        start = 0 if mask_mode == "full" else len(r.prompt) + 1
        mask[i, start : len(s) - 1] = 1.0
    return Batch(
        tokens=tokens,
        loss_mask=mask,
        valid_lengths=np.array([len(s) - 1 for s in seqs], dtype=np.int64),
        prompt_lengths=np.array([len(r.prompt) + 2 for r in records], dtype=np.int64),
        labels=np.array([r.domain_id for r in records], dtype=np.int64),
        records=list(records),
    )


def prompt_batch(prompts: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad already-framed prompt sequences."""
    width = max(len(p) for p in prompts)
    out = np.full((len(prompts), width), PAD, dtype=np.int64)
    for i, p in enumerate(prompts):
        out[i, : len(p)] = p
    return out, np.array([len(p) for p in prompts], dtype=np.int64)


def even_epoch(datasets: Sequence[Sequence[DomainRecord]], rng: random.Random, per_domain: int | None = None) -> list[DomainRecord]:
    """One epoch of an even mixture: ``per_domain`` records from each domain, shuffled together."""
    if not datasets or any(len(d) == 0 for d in datasets):
        raise DataError("every domain dataset must be non-empty")
    k = min(len(d) for d in datasets) if per_domain is None else per_domain
    pool = []
    for d in datasets:
        idx = list(range(len(d)))
        rng.shuffle(idx)
        # cycle when a domain has fewer than k records
        pool.extend(d[idx[i % len(d)]] for i in range(k))
    rng.shuffle(pool)
    return pool


def even_sample_batches(
    datasets: Sequence[Sequence[DomainRecord]],
    batch_size: int,
    seed: int,
    per_domain: int | None = None,
) -> Iterator[list[DomainRecord]]:
    """Endless stream of mixed-domain record lists, epoch after epoch.

    Every epoch draws the same number of records from each domain and
    shuffles them together, so within-batch composition is random while
    per-domain totals stay equal.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    rng = random.Random(seed)
    carry: list[DomainRecord] = []
    while True:
        carry.extend(even_epoch(datasets, rng, per_domain))
        while len(carry) >= batch_size:
            yield carry[:batch_size]
            carry = carry[batch_size:]


def epoch_steps(datasets: Sequence[Sequence[DomainRecord]], batch_size: int, accum_steps: int = 1) -> int:
    k = min(len(d) for d in datasets)
    return max(1, (k * len(datasets)) // (batch_size * accum_steps))
