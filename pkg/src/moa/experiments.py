"""End-to-end comparison runs on the synthetic suite.

One seed builds a warmed-up base, a corpus, the stage-1 experts, the MoA
model and every baseline, then scores all of them on the test split.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapters import SingleLoraModel
from .data import default_specs, gen_corpus, generic_texts
from .evaluation import perplexity, routing_accuracy
from .training import TrainConfig, train_baseline, train_expert, train_moa, warmup_base
from .transformer import ModelConfig, init_base

log = logging.getLogger(__name__)


@dataclass
class SuiteConfig:
    n_domains: int = 6
    n_per_domain: int = 400
    model: ModelConfig = field(default_factory=ModelConfig)
    rank: int = 8
    warmup_steps: int = 600
    warmup_lr: float = 3e-3
    warmup_texts: int = 4000
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=1e-2, total_steps=200))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=1e-2, total_steps=300, router_lr_scale=30.0))
    # steps for both token-gated baselines; None means the stage-2 count
    moe_steps: int | None = 600
    # steps for the mixed single expert; None means every stage-1 step plus stage 2
    mixed_steps: int | None = None
    baselines: tuple[str, ...] = ("single_mixed", "moe_lora", "moe_lora_naive", "classifier")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SeedResult:
    seed: int
    domains: list[str]
    ppl: dict[str, dict[str, float]]
    router_acc: dict[str, float]
    seconds: dict[str, float]
    models: dict = field(default_factory=dict, repr=False)

    def macro(self, model: str) -> float:
        return float(np.mean([self.ppl[model][d] for d in self.domains]))


def _ppl_table(model, test, strategy) -> dict[str, float]:
    return {d: perplexity(model, recs, strategy) for d, recs in test.items()}


def run_seed(cfg: SuiteConfig, seed: int, keep_models: bool = False) -> SeedResult:
    clock = {}
    t = time.perf_counter()

    def lap(name):
        nonlocal t
        now = time.perf_counter()
        clock[name] = now - t
        t = now
        log.info("seed %d: %s %.1fs", seed, name, clock[name])

    base = init_base(cfg.model, seed)
    warmup_base(base, generic_texts(cfg.warmup_texts, seed), cfg.warmup_steps, lr=cfg.warmup_lr, seed=seed)
    lap("warmup")
    corpus = gen_corpus(default_specs(cfg.n_domains), cfg.n_per_domain, seed, cfg.model.max_seq_len)
    names = list(corpus)
    train = [corpus[d]["train"] for d in names]
    test = {d: corpus[d]["test"] for d in names}
    lap("corpus")

    s1 = replace(cfg.stage1, seed=seed)
    experts = [train_expert(base, train[i], s1, domain_id=i, rank=cfg.rank)[0] for i in range(len(names))]
    lap("stage1")
    ppl = {"single_lora": {d: perplexity(SingleLoraModel(base, experts[i]), test[d]) for i, d in enumerate(names)}}

    s2 = replace(cfg.stage2, seed=seed)
    moa, hist2 = train_moa(base, experts, train, s2)
    lap("stage2")
    ppl["moa_oracle"] = _ppl_table(moa, test, "oracle")
    ppl["moa"] = _ppl_table(moa, test, "last")
    ppl["moa_vote"] = _ppl_table(moa, test, "vote")
    held = [r for d in names for r in test[d]]
    acc = {"last": routing_accuracy(moa, held, "last"), "vote": routing_accuracy(moa, held, "vote")}
    lap("eval_moa")
    models = {"base": base, "experts": experts, "moa": moa}

    stage2_steps = len(hist2.steps)
    for kind in cfg.baselines:
        if kind == "single_mixed":
            steps = cfg.mixed_steps or (len(names) * (s1.total_steps or 0) + stage2_steps)
        elif kind in ("moe_lora", "moe_lora_naive"):
            steps = cfg.moe_steps or stage2_steps
        else:
            steps = stage2_steps
        bcfg = replace(cfg.stage2, seed=seed, total_steps=steps, router_lr_scale=1.0)
        model, _ = train_baseline(kind, base, train, bcfg, experts=experts, rank=cfg.rank)
        ppl[kind] = _ppl_table(model, test, "last")
        if kind == "classifier":
            acc["classifier"] = routing_accuracy(model, held, "last")
        models[kind] = model
        lap(kind)
    return SeedResult(seed, names, ppl, acc, clock, models if keep_models else {})


def run_suite(cfg: SuiteConfig, seeds: Sequence[int] = (0, 1, 2), keep_models: bool = False) -> list[SeedResult]:
    return [run_seed(cfg, s, keep_models) for s in seeds]
