"""Command-line entry point: ``moa <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or
checkpoint error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plots
from .adapters import ClassifierLoras, MoaModel, SingleLoraModel, count_router_params, select_expert
from .checkpoint import CheckpointError, atomic_write_bytes, load_model, param_counts, read_meta, save_model
from .config import ConfigError, RunConfig, load_config, parse_overrides
from .data import (
    DataError,
    default_specs,
    detokenize,
    domain_order,
    gen_corpus,
    generic_texts,
    read_corpus,
    tokenize,
    write_corpus,
    BOS,
    SEP,
)
from .evaluation import evaluate, generate
from .tensor import NonFiniteError, ShapeError
from .training import NumericalError, train_baseline, train_expert, train_moa, warmup_base, BASELINES
from .transformer import BaseModel, count_base_params, init_base

log = logging.getLogger("moa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="moa", description="Mixture of LoRA experts on a small numpy transformer.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write synthetic multi-domain train/validation/test files")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-domain", type=int)

    p = sub.add_parser("train-expert", help="stage 1: train one LoRA expert on one domain")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--base", help="base checkpoint; otherwise the base is initialized from the seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-moa", help="stage 2: train routers and experts jointly")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--experts", nargs="+", required=True, help="stage-1 expert checkpoints")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-baseline", help="train a comparison model")
    _common(p)
    p.add_argument("--kind", required=True, choices=BASELINES)
    p.add_argument("--data", required=True)
    p.add_argument("--experts", nargs="*", default=[], help="stage-1 expert checkpoints (moe_lora, classifier)")
    p.add_argument("--base", help="base checkpoint (single_mixed, moe_lora_naive)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score checkpoints on a split; writes JSON, text table, CSV and figures")
    _common(p)
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--strategy", choices=("oracle", "vote", "last"))
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("infer", help="continue one prompt (argument or stdin)")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", help="prompt text; read from stdin when omitted")
    p.add_argument("--strategy", choices=("vote", "last"))
    p.add_argument("--max-new-tokens", type=int)

    p = sub.add_parser("inspect", help="print a checkpoint's tensor index and parameter counts")
    p.add_argument("checkpoint")
    return ap


def _resolve(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for flag, key in (("n_per_domain", "n_per_domain"), ("strategy", "strategy"), ("max_new_tokens", "max_new_tokens")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    cfg = load_config(args.config, overrides)
    log.info("resolved config:\n%s", cfg.dump())
    return cfg


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, [text.encode("utf-8")])


def _metrics_path(out: str) -> Path:
    return Path(out).with_suffix(".metrics.jsonl")


def _write_history(out: str, hist) -> None:
    _write_text(_metrics_path(out), "".join(json.dumps(row) + "\n" for row in hist.steps + hist.evals))


def _base_for(cfg: RunConfig, path: str | None) -> BaseModel:
    if path:
        model, _ = load_model(path)
        return model if isinstance(model, BaseModel) else model.base
    base = init_base(cfg.model, cfg.train.seed)
    if cfg.warmup_steps:
        warmup_base(base, generic_texts(4000, cfg.train.seed), cfg.warmup_steps, lr=cfg.warmup_lr, seed=cfg.train.seed)
    return base


def _load_experts(paths, names: list[str]):
    """Stage-1 checkpoints ordered by the corpus domain order, plus the shared base."""
    by_name, base = {}, None
    for p in paths:
        model, meta = load_model(p)
        if not isinstance(model, SingleLoraModel) or model.expert is None:
            raise CheckpointError(f"{p}: not a single-expert checkpoint")
        if base is None:
            base = model.base
        elif model.base.checksum() != base.checksum():
            raise CheckpointError(f"{p}: expert was trained on a different base model")
        by_name[meta["experts"][0].get("name")] = model.expert
    missing = [n for n in names if n not in by_name]
    if missing:
        raise DataError(f"no expert checkpoint for domains {missing}")
    return base, [by_name[n].copy(domain_id=i) for i, n in enumerate(names)]


def _meta(cfg: RunConfig, stage: str, hist=None, names=None) -> dict:
    return {
        "stage": stage,
        "seed": cfg.train.seed,
        "step": len(hist.steps) if hist is not None else 0,
        "config": cfg.to_flat(),
        "expert_names": names,
    }


def cmd_gen_corpus(args) -> int:
    cfg = _resolve(args)
    specs = default_specs(cfg.n_domains)
    wanted = cfg.domain_list()
    if wanted:
        specs = [s for s in specs if s.name in wanted]
        if len(specs) != len(wanted):
            raise DataError(f"unknown domains in {wanted}")
    corpus = gen_corpus(specs, cfg.n_per_domain, cfg.train.seed, cfg.model.max_seq_len)
    files = write_corpus(corpus, args.out)
    print(f"wrote {len(files)} files to {args.out}")
    return 0


def cmd_train_expert(args) -> int:
    cfg = _resolve(args)
    names = domain_order(args.data)
    if args.domain not in names:
        raise DataError(f"domain {args.domain!r} not in {args.data} (have {names})")
    corpus = read_corpus(args.data, names, cfg.model.max_seq_len)
    base = _base_for(cfg, args.base)
    val = {args.domain: corpus[args.domain]["validation"]}
    expert, hist = train_expert(
        base, corpus[args.domain]["train"], cfg.train, domain_id=names.index(args.domain), rank=cfg.rank, scale=cfg.lora_scale, val=val
    )
    save_model(SingleLoraModel(base, expert), args.out, **_meta(cfg, "stage1", hist, [args.domain]))
    _write_history(args.out, hist)
    print(f"saved {args.out} ({expert.num_params()} expert parameters, {len(hist.steps)} steps)")
    return 0


def cmd_train_moa(args) -> int:
    cfg = _resolve(args)
    names = domain_order(args.data)
    corpus = read_corpus(args.data, names, cfg.model.max_seq_len)
    base, experts = _load_experts(args.experts, names)
    val = {n: corpus[n]["validation"] for n in names}
    model, hist = train_moa(base, experts, [corpus[n]["train"] for n in names], cfg.train, mlp_hidden=cfg.mlp_hidden, val=val, copy_experts=False)
    save_model(model, args.out, **_meta(cfg, "stage2", hist, names))
    _write_history(args.out, hist)
    print(f"saved {args.out} ({len(experts)} experts, {sum(p.size for p in model.router_parameters())} router parameters)")
    return 0


def cmd_train_baseline(args) -> int:
    cfg = _resolve(args)
    names = domain_order(args.data)
    corpus = read_corpus(args.data, names, cfg.model.max_seq_len)
    experts = None
    if args.experts:
        base, experts = _load_experts(args.experts, names)
    elif args.kind in ("moe_lora", "classifier"):
        raise UsageError(f"--kind {args.kind} needs --experts")
    else:
        base = _base_for(cfg, args.base)
    train = [corpus[n]["train"] for n in names]
    model, hist = train_baseline(args.kind, base, train, cfg.train, experts=experts, rank=cfg.rank, scale=cfg.lora_scale)
    save_model(model, args.out, kind=args.kind, **_meta(cfg, args.kind, hist, names if experts or args.kind != "single_mixed" else ["mixed"]))
    _write_history(args.out, hist)
    print(f"saved {args.out} ({args.kind}, {len(hist.steps)} steps)")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    names = domain_order(args.data)
    corpus = read_corpus(args.data, names, cfg.model.max_seq_len)
    split = {n: corpus[n][args.split] for n in names}
    out = Path(args.out)
    reports = []
    for path in args.model:
        model, meta = load_model(path)
        if isinstance(model, BaseModel):
            model = SingleLoraModel(model, None)
        name = Path(path).stem
        rep = evaluate(model, split, cfg.strategy, name, cfg.gen_samples, cfg.max_new_tokens, cfg.train.loss_mask_mode)
        rep.extra = {"checkpoint": str(path), "kind": meta.get("kind"), "split": args.split}
        _write_text(out / f"{name}.json", rep.to_json() + "\n")
        _write_text(out / f"{name}.txt", rep.to_table())
        _write_text(out / f"{name}.csv", rep.to_csv())
        reports.append(rep)
        print(rep.to_table(), end="")
    for fig in plots.report_figures(reports, out):
        print(f"figure {fig}")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve(args)
    text = args.prompt if args.prompt is not None else sys.stdin.read().rstrip("\n")
    if not text:
        raise UsageError("empty prompt")
    model, meta = load_model(args.model)
    if isinstance(model, BaseModel):
        model = SingleLoraModel(model, None)
    prompt = [BOS, *tokenize(text), SEP]
    votes: list[int] = []
    expert = 0
    if isinstance(model, MoaModel):
        expert, votes = select_expert(model, prompt, cfg.strategy)
    elif isinstance(model, ClassifierLoras):
        expert = int(model.route(np.array([prompt]), np.array([len(prompt)]))[0])
    out = generate(model, prompt, cfg.strategy, cfg.max_new_tokens)
    names = [e.get("name") for e in meta.get("experts", [])]
    print(detokenize(out))
    label = names[expert] if expert < len(names) and names[expert] else "-"
    print(f"expert: {expert} ({label})")
    print(f"votes: {votes}")
    return 0


def cmd_inspect(args) -> int:
    meta, _, _ = read_meta(args.checkpoint)
    print(f"kind: {meta.get('kind')}  stage: {meta.get('stage')}  seed: {meta.get('seed')}  step: {meta.get('step')}")
    print(f"tokenizer: {meta.get('tokenizer')}  format: {meta.get('format_version')}")
    cfg = meta.get("model_config", {})
    if cfg:
        print("model: " + " ".join(f"{k}={v}" for k, v in cfg.items()))
    print(f"{'name':40s} {'shape':>16s} {'offset':>12s} {'crc32':>10s}")
    for e in meta.get("tensors", []):
        print(f"{e['name']:40s} {'x'.join(map(str, e['shape'])) or 'scalar':>16s} {e['offset']:>12d} {e['crc32']:>10d}")
    counts = param_counts(meta)
    for g, n in counts.items():
        if g != "router_formula":
            print(f"params[{g}]: {n:,}")
    n_exp = len(meta.get("experts", []))
    if meta.get("kind") == "moa" and cfg:
        total = count_router_params(cfg["num_layers"], cfg["hidden_dim"], n_exp, meta.get("mlp_hidden"))
        print(f"router parameters (L={cfg['num_layers']}, d={cfg['hidden_dim']}, N={n_exp}): {total:,}")
    if cfg and "base" in counts:
        from .transformer import ModelConfig

        print(f"base parameters (formula): {count_base_params(ModelConfig(**cfg)):,}")
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-expert": cmd_train_expert,
    "train-moa": cmd_train_moa,
    "train-baseline": cmd_train_baseline,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("moa: missing command (try --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (DataError, CheckpointError, ShapeError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # remaining invalid arguments (strategy without routers, bad values) are usage errors
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        # argparse --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
