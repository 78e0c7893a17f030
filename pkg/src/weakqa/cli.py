"""Command-line entry point: ``weakqa <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence, get_type_hints

import numpy as np

from .checkpoint import (Checkpoint, CheckpointError, load_checkpoint, save_checkpoint,
                         state_from_checkpoint)
from .data import (DataError, GenConfig, Question, build_vocab, check_gold_chains,
                   generate_synthetic, load_passages, load_questions, read_jsonl, save_passages,
                   save_questions, write_jsonl)
from .encoder import BagCache, NumericError, init_encoder, init_opt_state
from .index import build_lexical_index
from .metrics import evaluate
from .reader import predict_answer, rerank
from .retriever import EvidenceChain, RetrievalConfig, lexical_beam_retrieve
from .trainer import (PRESETS, EmConfig, EmData, IterationStats, dump_embeddings, embeddings_tsv, retrieve,
                      run_em, warm_start, write_json)

SEED_ENV = "WEAKQA_SEED"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("weakqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which we reserve for data errors
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config plumbing: defaults < preset < config file < WEAKQA_SEED < flags


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _converter(tp):
    if tp is bool:
        return _parse_bool
    if tp in (int, float, str):
        return tp
    if tp == Optional[float]:
        return lambda s: None if s.lower() in ("none", "") else float(s)
    raise TypeError(f"unsupported config field type {tp!r}")


def _parse_bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def add_config_flags(parser: argparse.ArgumentParser, cls) -> None:
    hints = get_type_hints(cls)
    group = parser.add_argument_group(f"{cls.__name__} fields")
    for f in dataclasses.fields(cls):
        group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", default=None, metavar="V",
                           type=_converter(hints[f.name]), help=f"(default: {f.default!r})")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"{path}: cannot parse config file ({exc})") from None
    return {k: v.strip().strip('"').strip("'") for k, v in cp["config"].items()}


def build_config(cls, args: argparse.Namespace, env: Optional[dict] = None):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values: dict = {}
    preset = getattr(args, "preset", None)
    if preset and cls is EmConfig:
        values.update(PRESETS[preset])
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            key = key.replace("-", "_")
            if key not in names:
                continue  # one file may carry keys for several stages
            try:
                values[key] = _converter(hints[key])(raw)
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
    env = os.environ if env is None else env
    if SEED_ENV in env and "seed" in names:
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for name in names:
        v = getattr(args, f"cfg_{name}", None)
        if v is not None:
            values[name] = v
    cfg = cls(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------------------
# data helpers


def load_data(data_dir) -> EmData:
    d = Path(data_dir)
    for name in ("passages.jsonl", "train.jsonl", "dev.jsonl"):
        if not (d / name).exists():
            raise DataError(f"{d / name} not found")
    store = load_passages(d / "passages.jsonl")
    train, dev = load_questions(d / "train.jsonl"), load_questions(d / "dev.jsonl")
    check_gold_chains(train + dev, store)
    return EmData(store, train, dev)


def _questions(args, data: EmData) -> list[Question]:
    if args.questions:
        qs = load_questions(args.questions)
        check_gold_chains(qs, data.store)
        return qs
    return data.dev if args.split == "dev" else data.train


def _load_retrievals(path) -> dict[str, list[EvidenceChain]]:
    out = {}
    for lineno, obj in read_jsonl(path):
        try:
            out[obj["question_id"]] = [EvidenceChain.from_json(c) for c in obj["chains"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed retrieval record ({exc})") from None
    return out


def _load_predictions(path) -> dict[str, str]:
    out = {}
    for lineno, obj in read_jsonl(path):
        if not isinstance(obj.get("question_id"), str) or not isinstance(obj.get("answer"), str):
            raise DataError(f"{path}:{lineno}: prediction needs string question_id and answer")
        out[obj["question_id"]] = obj["answer"]
    return out


def _restore(args, data: EmData):
    try:
        cp = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise DataError(f"{args.checkpoint}: {exc}") from None
    if cp.reader is None:
        raise DataError(f"{args.checkpoint}: encoder-only checkpoint (from warm-start); train first")
    cfg = EmConfig.from_json(cp.config)
    return state_from_checkpoint(cp, data.store), cfg, cp


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = build_config(GenConfig, args)
    store, train, dev = generate_synthetic(cfg)
    out = Path(args.out)
    save_passages(out / "passages.jsonl", store)
    save_questions(out / "train.jsonl", train)
    save_questions(out / "dev.jsonl", dev)
    write_json(out / "gen_config.json", dataclasses.asdict(cfg))
    print(f"wrote {len(store)} passages, {len(train)} train / {len(dev)} dev questions to {out}")
    return EXIT_OK


def cmd_warm_start(args) -> int:
    cfg = build_config(EmConfig, args)
    data = load_data(args.data)
    rng = np.random.default_rng(cfg.seed)
    vocab = build_vocab(data.store, list(data.train) + list(data.dev))
    params = init_encoder(len(vocab), cfg.dim, rng, cfg.embed_scale)
    opt = init_opt_state(params, cfg.lr)
    params, opt, n = warm_start(params, opt, build_lexical_index(data.store), data.store, data.train,
                                vocab, cfg, rng, BagCache(vocab, data.store))
    save_checkpoint(args.out, Checkpoint(vocab, params, opt, None, None, cfg.to_json(),
                                         rng.bit_generator.state))
    print(f"warm start used {n}/{len(data.train)} questions; encoder saved to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(EmConfig, args)
    data = load_data(args.data)
    resume = encoder = None
    if args.resume:
        try:
            cp = load_checkpoint(args.resume)
        except CheckpointError as exc:
            raise DataError(f"{args.resume}: {exc}") from None
        if cp.reader is None:
            raise DataError(f"{args.resume}: encoder-only checkpoint; pass it with --init instead")
        resume = state_from_checkpoint(cp, data.store)
    elif args.init:
        try:
            cp = load_checkpoint(args.init)
        except CheckpointError as exc:
            raise DataError(f"{args.init}: {exc}") from None
        encoder = cp.encoder
    _, stats = run_em(data, cfg, out_dir=args.out, resume=resume, encoder=encoder)
    last = stats[-1]
    print(f"iteration {last.iteration}: chain recall {last.chain_recall:.3f}, "
          f"answer recall {last.answer_recall:.3f}, EM {last.exact_match:.3f}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    data = load_data(args.data)
    state, cfg, _ = _restore(args, data)
    qs = _questions(args, data)
    records = [{"question_id": q.id, "chains": [c.to_json() for c in retrieve(state, data.store, q, cfg, args.k)]}
               for q in qs]
    write_jsonl(args.out, records)
    print(f"wrote top-{args.k} chains for {len(records)} questions to {args.out}")
    return EXIT_OK


def cmd_answer(args) -> int:
    data = load_data(args.data)
    state, cfg, _ = _restore(args, data)
    qs = _questions(args, data)
    records = []
    for q in qs:
        pool = retrieve(state, data.store, q, cfg, args.pool)
        if not pool:
            records.append({"question_id": q.id, "answer": "", "span_prob": 0.0, "rerank_prob": 0.0})
            continue
        probs = rerank(state.reader, state.vocab, q, pool, data.store, state.rcache)
        order = sorted(range(len(pool)), key=lambda i: (-probs[i], i))[: args.rerank_k]
        kept = [pool[i] for i in order]
        pred = predict_answer(state.reader, state.vocab, q, kept, data.store, state.rcache)
        records.append({"question_id": q.id, "answer": pred.answer_text, "span_prob": pred.span_prob,
                        "rerank_prob": pred.rerank_prob, "chains": [c.to_json() for c in kept]})
    write_jsonl(args.out, records)
    print(f"wrote {len(records)} predictions to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.retrievals and not args.predictions:
        raise UsageError("eval needs --retrievals and/or --predictions")
    store = load_passages(args.passages) if args.passages else None
    qs = load_questions(args.questions)
    retrievals = _load_retrievals(args.retrievals) if args.retrievals else None
    predictions = _load_predictions(args.predictions) if args.predictions else None
    if retrievals is not None and store is None:
        raise UsageError("retrieval metrics need --passages")
    report = evaluate(qs, store, retrievals, predictions, k=args.k, single_chain=args.single_chain)
    payload = report.to_json()
    if args.out:
        write_json(args.out, payload)
    summary = {k: payload[k] for k in ("k", "answer_recall", "passage_recall", "chain_recall", "exact_match")}
    print(json.dumps(summary))
    return EXIT_OK


def _comparison_table(runs: dict[str, list[IterationStats]]) -> str:
    lines = [f"{'run':<32} {'iter':>4} {'used':>6} {'gold':>6} {'AR':>6} {'CR':>6} {'EM':>6}"]
    for name, stats in runs.items():
        s = stats[-1]
        used = "-" if s.used_fraction is None else f"{s.used_fraction:.3f}"
        gold = "-" if s.gold_match_fraction is None else f"{s.gold_match_fraction:.3f}"
        lines.append(f"{name:<32} {s.iteration:>4} {used:>6} {gold:>6} {s.answer_recall:>6.3f} "
                     f"{s.chain_recall:>6.3f} {s.exact_match:>6.3f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    base = build_config(EmConfig, args)
    data = load_data(args.data)
    modes = [m for m in args.modes.split(",") if m]
    selections = [s for s in args.positive_selection_sweep.split(",") if s]
    variants = []
    for mode in modes:
        for sel in selections:
            variants.append((f"filter={mode},positive={sel}",
                             dataclasses.replace(base, filter_mode=mode, positive_selection=sel)))
    if args.with_gold_only:
        variants.append(("gold_only", dataclasses.replace(base, gold_only=True)))
    runs: dict[str, list[IterationStats]] = {}
    for name, cfg in variants:
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(f"{name}: {exc}") from None
        out = Path(args.out) / name.replace(",", "_").replace("=", "-") if args.out else None
        _, runs[name] = run_em(data, cfg, out_dir=out)
    report = {"schema_version": 1, "base_config": base.to_json(),
              "runs": {name: [s.to_json() for s in stats] for name, stats in runs.items()}}
    if args.out:
        write_json(Path(args.out) / "ablation.json", report)
    print(_comparison_table(runs))
    return EXIT_OK


def cmd_baseline_tfidf(args) -> int:
    data = load_data(args.data)
    qs = _questions(args, data)
    lex = build_lexical_index(data.store)
    rcfg = RetrievalConfig(n_hops=args.hops, beam_width=max(args.beam_width, args.k), top_k=args.k)
    retrievals = {q.id: lexical_beam_retrieve(lex, data.store, q, rcfg) for q in qs}
    if args.out:
        write_jsonl(args.out, ({"question_id": q.id, "chains": [c.to_json() for c in retrievals[q.id]]}
                               for q in qs))
    report = evaluate(qs, data.store, retrievals, k=args.k)
    print(json.dumps({k: v for k, v in report.to_json().items() if k != "per_question"}))
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    data = load_data(args.data)
    state, _, _ = _restore(args, data)
    qs = _questions(args, data)
    if args.question_id:
        qs = [q for q in qs if q.id == args.question_id]
        if not qs:
            raise DataError(f"question {args.question_id!r} not found")
    chunks = [embeddings_tsv(dump_embeddings(state, data.store, q, args.k)) for q in qs[: args.limit]]
    text = "".join(chunks)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="weakqa", description="Weakly supervised retriever and reader trained by hard EM.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def with_config(sp, cls):
        sp.add_argument("--config", help="key = value config file (flags override it)")
        if cls is EmConfig:
            sp.add_argument("--preset", choices=sorted(PRESETS), default="default",
                            help="named EmConfig overrides applied before --config")
        add_config_flags(sp, cls)

    def with_questions(sp):
        sp.add_argument("--data", required=True, help="directory with passages/train/dev JSONL")
        sp.add_argument("--questions", help="questions JSONL (default: --split of --data)")
        sp.add_argument("--split", choices=("dev", "train"), default="dev")

    sp = sub.add_parser("gen-data", help="write a seeded synthetic world")
    sp.add_argument("--out", required=True)
    with_config(sp, GenConfig)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("warm-start", help="lexically warm-started encoder checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    with_config(sp, EmConfig)
    sp.set_defaults(func=cmd_warm_start)

    sp = sub.add_parser("train", help="run hard EM; writes stats.json and per-iteration checkpoints")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--init", help="encoder checkpoint from warm-start")
    sp.add_argument("--resume", help="full checkpoint to resume from")
    with_config(sp, EmConfig)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("retrieve", help="top-k evidence chains per question")
    sp.add_argument("--checkpoint", required=True)
    with_questions(sp)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_retrieve)

    sp = sub.add_parser("answer", help="rerank a retrieval pool and extract answers")
    sp.add_argument("--checkpoint", required=True)
    with_questions(sp)
    sp.add_argument("--pool", type=int, default=100, help="retrieved chains per question")
    sp.add_argument("--rerank-k", type=int, default=10, help="chains kept after reranking")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_answer)

    sp = sub.add_parser("eval", help="metrics report for retrievals and/or predictions")
    sp.add_argument("--questions", required=True)
    sp.add_argument("--passages")
    sp.add_argument("--retrievals")
    sp.add_argument("--predictions")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--single-chain", action="store_true",
                    help="chain recall requires all gold pieces inside one retrieved chain")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="sweep filter modes / positive selection / gold-only")
    sp.add_argument("--data", required=True)
    sp.add_argument("--modes", default="none,answer,answer+reader")
    sp.add_argument("--positive-selection-sweep", default="top1")
    sp.add_argument("--with-gold-only", action="store_true", help="add a gold-only filtering run")
    sp.add_argument("--out")
    with_config(sp, EmConfig)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("baseline-tfidf", help="TF-IDF beam retrieval baseline")
    with_questions(sp)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--hops", type=int, default=2)
    sp.add_argument("--beam-width", type=int, default=10)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_baseline_tfidf)

    sp = sub.add_parser("dump-embeddings", help="TSV of query and top-k passage vectors")
    sp.add_argument("--checkpoint", required=True)
    with_questions(sp)
    sp.add_argument("--question-id")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--limit", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
