"""Metrics and evaluation protocols."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import EOS, DomainRecord, detokenize, make_batch, prompt_batch
from .transformer import base_forward

BLEU_METHOD = "sentence BLEU-4 on byte tokens; add-one smoothing for zero-count 2..4-gram precisions; per-domain mean"


# ---------------------------------------------------------------------------
# perplexity


def nll_totals(model, records: Sequence[DomainRecord], strategy="oracle", batch_size: int = 32, mask_mode: str = "full"):
    """Summed NLL and masked-token count over ``records`` (expert chosen by ``strategy``)."""
    total, count = 0.0, 0.0
    plan = model.attachment()
    with T.no_grad():
        for i in range(0, len(records), batch_size):
            b = make_batch(records[i : i + batch_size], mask_mode)
            prompts, lengths = b.prompts()
            ctx = model.route(prompts, lengths, b.labels, strategy)
            logits = base_forward(model.base, b.inputs, plan, ctx).logits.data.astype(np.float64)
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            nll = -np.take_along_axis(logp, b.targets[..., None], axis=-1)[..., 0]
            total += float((nll * b.loss_mask).sum())
            count += float(b.loss_mask.sum())
    return total, count


def ppl_from_nll(total_nll: float, count: float) -> float:
    if count <= 0:
        raise ValueError("perplexity over an empty loss mask")
    return math.exp(total_nll / count)


def perplexity(model, records: Sequence[DomainRecord], strategy="oracle", batch_size: int = 32, mask_mode: str = "full") -> float:
    if not records:
        raise ValueError("perplexity needs a non-empty dataset")
    return ppl_from_nll(*nll_totals(model, records, strategy, batch_size, mask_mode))


def routing_accuracy(model, records: Sequence[DomainRecord], strategy="last", batch_size: int = 64) -> float:
    """Fraction of records whose selected expert equals the domain label."""
    right = 0
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        prompts, lengths = prompt_batch([r.prompt_sequence for r in chunk])
        labels = np.array([r.domain_id for r in chunk])
        with T.no_grad():
            chosen = model.route(prompts, lengths, labels, strategy)
        right += int((np.asarray(chosen) == labels).sum())
    return right / len(records)


# ---------------------------------------------------------------------------
# overlap metrics


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu4(candidate: Sequence, reference: Sequence) -> float:
    """Sentence BLEU-4 with brevity penalty.

    Zero-match 2..4-gram precisions are smoothed to ``1 / (count + 1)``;
    a zero unigram precision still gives 0.
    """
    if not reference:
        raise ValueError("bleu4 needs a non-empty reference")
    cand, ref = list(candidate), list(reference)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        total = max(len(cand) - n + 1, 0)
        match = sum(min(k, r[g]) for g, k in c.items())
        if match == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = match / total
        log_p += math.log(p) / 4
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(log_p)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    if not reference:
        raise ValueError("rouge_l needs a non-empty reference")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


# ---------------------------------------------------------------------------
# exam answers

_EDGE_L = r"(?<![A-Za-z0-9'])"
_EDGE_R = r"(?![A-Za-z0-9'])"
_MC_RE = re.compile(_EDGE_L + r"([A-D]{2,4}|[A-Da-d])" + _EDGE_R)
_TF_RE = re.compile(_EDGE_L + r"(true|false|t|f)" + _EDGE_R, re.IGNORECASE)
_ARTICLE_RE = re.compile(r"\s+[a-z]")


def extract_answer(text: str, judgement: bool = False) -> str | None:
    """Last standalone option mention in ``text``.

    Multiple-choice answers are one letter (any case) or an uppercase run
    such as ``ACD``, returned as a sorted letter set. A lowercase ``a``
    followed by a word reads as the article and is skipped. With
    ``judgement`` the T/F (or true/false) mention is returned instead.
    """
    if judgement:
        hits = _TF_RE.findall(text)
        return hits[-1][0].upper() if hits else None
    found = None
    for m in _MC_RE.finditer(text):
        tok = m.group(1)
        if tok == "a" and _ARTICLE_RE.match(text, m.end()):
            continue
        if len(tok) > 1 and len(set(tok)) != len(tok):
            continue
        found = "".join(sorted(tok.upper()))
    return found


def exam_accuracy(outputs: Sequence[str], golds: Sequence[str]) -> tuple[int, int, float]:
    if len(outputs) != len(golds):
        raise ValueError("one output per gold answer")
    right = 0
    for out, gold in zip(outputs, golds):
        g = "".join(sorted(gold.strip().upper()))
        got = extract_answer(out, judgement=g in ("T", "F"))
        right += int(got == g)
    total = len(golds)
    return total, right, (right / total if total else 0.0)


# ---------------------------------------------------------------------------
# generation


def generate_batch(model, prompts: Sequence[Sequence[int]], strategy="last", max_new_tokens: int = 64, labels=None) -> list[list[int]]:
    """Greedy decoding for framed prompts (BOS + prompt + SEP).

    The expert is chosen once from each prompt and reused for every
    generated token. Prefixes are recomputed each step.
    """
    if max_new_tokens < 0:
        raise ValueError("max_new_tokens must be >= 0")
    if not prompts or any(len(p) == 0 for p in prompts):
        raise ValueError("empty prompt")
    seqs = [list(p) for p in prompts]
    outs: list[list[int]] = [[] for _ in seqs]
    if max_new_tokens == 0:
        return outs
    limit = model.base.config.max_seq_len
    tokens, lengths = prompt_batch(seqs)
    plan = model.attachment()
    with T.no_grad():
        ctx = model.route(tokens, lengths, labels, strategy)
        live = [i for i in range(len(seqs)) if len(seqs[i]) < limit]
        for _ in range(max_new_tokens):
            if not live:
                break
            toks, _ = prompt_batch([seqs[i] for i in live])
            sub_ctx = None if ctx is None else np.asarray(ctx)[live]
            logits = base_forward(model.base, toks, plan, sub_ctx).logits.data
            still = []
            for row, i in enumerate(live):
                nxt = int(logits[row, len(seqs[i]) - 1].argmax())
                if nxt == EOS:
                    continue
                seqs[i].append(nxt)
                outs[i].append(nxt)
                if len(seqs[i]) < limit:
                    still.append(i)
            live = still
    return outs


def generate(model, prompt: Sequence[int], strategy="last", max_new_tokens: int = 64, label: int | None = None) -> list[int]:
    labels = None if label is None else [label]
    return generate_batch(model, [prompt], strategy, max_new_tokens, labels)[0]


# ---------------------------------------------------------------------------
# judge prompt

JUDGE_TEMPLATE = (
    "You will receive three parts of content: the questioner's question, the user's answer, and the reference answer.\n"
    "Your task is to score the accuracy of the user's answer based on the following criteria.\n"
    "Please ensure that you read and understand these instructions carefully.\n"
    "Evaluation Criteria:\n"
    "Accuracy - Whether the user's answer is consistent with the reference answer and has addressed the questioner's "
    "question. We define this dimension as 'whether the user's answer includes all the key points from the reference "
    "answer and has addressed the questioner's question.'\n"
    "Evaluation Steps:\n"
    "1. Carefully read the questioner's question, understand the key points of the question.\n"
    "2. Carefully read the reference answer, understand the key points related to the question contained in the "
    "reference answer.\n"
    "3. Check if the user's answer includes the key points from the reference answer and has addressed the "
    "questioner's question.\n"
    "4. Based on the evaluation criteria, score within a range of 0 to 100, where 0 means the user's answer does not "
    "contain any key points from the reference answer and has completely failed to address the questioner's question; "
    "100 means the user's answer includes all the key points from the reference answer and has correctly and "
    "completely addressed the questioner's question.\n"
    "Example: Questioner's question: {{[query]}} User's answer: {{[llm_answer]}} Reference answer: {{[fact]}}\n"
    "Evaluation result (score only):\n"
    "Accuracy (0-100):"
)
_PLACEHOLDER = re.compile(r"\[(query|llm_answer|fact)\]")


def format_judge_prompt(query: str, llm_answer: str, fact: str) -> str:
    fields = {"query": query, "llm_answer": llm_answer, "fact": fact}
    for k, v in fields.items():
        if not v:
            raise ValueError(f"judge prompt field {k!r} is empty")
    return _PLACEHOLDER.sub(lambda m: fields[m.group(1)], JUDGE_TEMPLATE)


# ---------------------------------------------------------------------------
# reports


@dataclass
class DomainMetrics:
    domain: str
    n: int
    ppl: float
    bleu4: float | None = None
    rouge_l: float | None = None
    router_acc: float | None = None
    exam_acc: float | None = None


_COLUMNS = ("ppl", "bleu4", "rouge_l", "router_acc", "exam_acc")


@dataclass
class EvalReport:
    model: str
    strategy: str
    rows: list[DomainMetrics]
    method: str = BLEU_METHOD
    extra: dict = field(default_factory=dict)

    def average(self, column: str) -> float | None:
        vals = [getattr(r, column) for r in self.rows if getattr(r, column) is not None]
        return sum(vals) / len(vals) if vals else None

    def averages(self) -> dict[str, float | None]:
        return {c: self.average(c) for c in _COLUMNS}

    def row(self, domain: str) -> DomainMetrics:
        return next(r for r in self.rows if r.domain == domain)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "strategy": self.strategy,
            "method": self.method,
            "rows": [asdict(r) for r in self.rows],
            "average": self.averages(),
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["model"], d["strategy"], [DomainMetrics(**r) for r in d["rows"]], d.get("method", BLEU_METHOD), d.get("extra", {}))

    def to_table(self) -> str:
        """Aligned text table: one row per domain plus the macro average."""

        def fmt(v, c):
            if v is None:
                return "-"
            return f"{v:.4f}" if c == "ppl" else f"{100 * v:.2f}"

        header = ["Domain", "N", "PPL", "BLEU", "ROUGE-L", "Router%", "Exam%"]
        body = [[r.domain, str(r.n)] + [fmt(getattr(r, c), c) for c in _COLUMNS] for r in self.rows]
        avg = self.averages()
        body.append(["Average", str(sum(r.n for r in self.rows))] + [fmt(avg[c], c) for c in _COLUMNS])
        widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
        line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        rule = "-" * len(line(header))
        out = [f"# {self.model} (strategy={self.strategy})", f"# {self.method}", line(header), rule]
        out += [line(b) for b in body[:-1]] + [rule, line(body[-1])]
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "n", *_COLUMNS])
        for r in self.rows:
            w.writerow([r.domain, r.n, *("" if getattr(r, c) is None else repr(getattr(r, c)) for c in _COLUMNS)])
        avg = self.averages()
        w.writerow(["average", sum(r.n for r in self.rows), *("" if avg[c] is None else repr(avg[c]) for c in _COLUMNS)])
        return buf.getvalue()


def evaluate(
    model,
    split: dict[str, Sequence[DomainRecord]],
    strategy="last",
    name: str = "model",
    gen_samples: int = 0,
    max_new_tokens: int = 64,
    mask_mode: str = "full",
) -> EvalReport:
    """Per-domain PPL, plus generation metrics on the first ``gen_samples`` records."""
    rows = []
    routes_by_seq = hasattr(model, "routers") or hasattr(model, "classifier")
    for domain, recs in split.items():
        recs = list(recs)
        ppl = perplexity(model, recs, strategy, mask_mode=mask_mode)
        router = routing_accuracy(model, recs, strategy) if routes_by_seq and strategy != "oracle" else None
        m = DomainMetrics(domain, len(recs), ppl, router_acc=router)
        if gen_samples:
            sub = recs[:gen_samples]
            labels = [r.domain_id for r in sub]
            outs = generate_batch(model, [r.prompt_sequence for r in sub], strategy, max_new_tokens, labels)
            m.bleu4 = float(np.mean([bleu4(o, r.response) for o, r in zip(outs, sub)]))
            m.rouge_l = float(np.mean([rouge_l(o, r.response) for o, r in zip(outs, sub)]))
            golds = [r.gold for r in sub if r.gold]
            if golds:
                texts = [detokenize(o) for o, r in zip(outs, sub) if r.gold]
                m.exam_acc = exam_accuracy(texts, golds)[2]
        rows.append(m)
    return EvalReport(name, str(getattr(strategy, "kind", strategy)), rows)
