"""ardiff command line: train, generate, eval, trace, dump-schedule and synth.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Failures print a single ``error: <category>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .config import ConfigError, RunConfig, load_config
from .evaluate import corpus_bleu, exact_match, few_step_report, rows_to_csv, self_bleu
from .infer import decode_corpus, generate, make_plan
from .model import Denoiser, load_checkpoint
from .schedule import TimestepPlan, ar_plan, build_sqrt_schedule, schedule_rows, uniform_plan
from .train import train_loop

log = logging.getLogger("ardiff")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _plan_from(kind: str, target_len: int, total_steps: int, anchor, rounding: str) -> TimestepPlan:
    if kind not in ("ar", "uniform"):
        raise ConfigError(f"unknown plan {kind!r} (expected ar or uniform)")
    try:
        if kind == "ar":
            return ar_plan(target_len, total_steps, anchor, rounding)
        return uniform_plan(target_len, total_steps, rounding)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _schedule_from(total_steps: int, offset: float):
    try:
        return build_sqrt_schedule(total_steps, offset)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _meta_plan(meta: dict) -> TimestepPlan:
    return _plan_from(meta["plan"], meta["target_len"], meta["total_steps"], tuple(meta["anchor"]),
                      meta["rounding"])


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    overrides = list(args.overrides or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _snapshot(cfg: RunConfig, out: Path):
    (out / "config.resolved").write_text(cfg.dump(), encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _load(args)
    if not cfg.train_data:
        raise ConfigError("train_data is not set")
    out = _out_dir(args)
    _snapshot(cfg, out)
    corpus = D.read_jsonl(cfg.train_data, cfg.tokenize)
    vocab = D.Vocabulary.build(corpus.sources + corpus.targets)
    target_len = cfg.target_len or corpus.max_tgt_len + 1
    src_len = cfg.max_src_len or corpus.max_src_len
    src, tgt = D.encode_corpus(corpus, vocab, src_len, target_len)
    tcfg = cfg.train_config(target_len)
    plan = _plan_from(cfg.plan, target_len, cfg.total_steps, tcfg.anchor, cfg.rounding)
    schedule = _schedule_from(cfg.total_steps, cfg.schedule_offset)
    torch.manual_seed(cfg.seed)
    model = Denoiser(cfg.model_config(len(vocab), src_len, target_len))
    vocab.save(out / "vocab.txt")
    meta = {"plan": plan.kind, "anchor": list(plan.anchor), "rounding": plan.rounding,
            "target_len": target_len, "total_steps": cfg.total_steps,
            "schedule_offset": cfg.schedule_offset, "tokenize": cfg.tokenize}
    result = train_loop(tcfg, src, tgt, model, plan, schedule, out, vocab.tokens, meta)
    last = result.records[-1]
    print(json.dumps({"checkpoint": str(result.checkpoint), "final_loss": last["loss"]}))
    return 0


def _restore(path: str):
    if not path:
        raise ConfigError("checkpoint is not set")
    if not Path(path).is_file():
        raise D.DataError(f"checkpoint not found: {path}")
    model, tokens, meta = load_checkpoint(path)
    vocab = D.Vocabulary(tokens)
    plan = _meta_plan(meta)
    schedule = _schedule_from(meta["total_steps"], meta["schedule_offset"])
    return model, vocab, plan, schedule, meta


def _eval_sources(cfg: RunConfig, vocab: D.Vocabulary, model: Denoiser, meta: dict):
    if not cfg.eval_data:
        raise ConfigError("eval_data is not set")
    corpus = D.read_jsonl(cfg.eval_data, meta.get("tokenize", cfg.tokenize))
    sources, refs = D.group_references(corpus)
    src_ids = [vocab.encode(s) for s in sources]
    ref_ids = [[vocab.encode(r) for r in rs] for rs in refs]
    return sources, D.pad_sources(src_ids, model.cfg.max_src_len), ref_ids


def cmd_generate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    model, vocab, plan, schedule, meta = _restore(cfg.checkpoint)
    sources, src, _ = _eval_sources(cfg, vocab, model, meta)
    iplan = make_plan(plan, cfg.steps, cfg.candidates, cfg.seed, schedule)
    _, details = decode_corpus(model, src, iplan, return_candidates=True)
    mode = meta.get("tokenize", "whitespace")
    with open(out / "generate.jsonl", "w", encoding="utf-8") as fh:
        for s, (cands, idx, risks) in zip(sources, details):
            fh.write(json.dumps({"src": D.detokenize(s, mode),
                                 "candidates": [D.detokenize(vocab.decode(c), mode) for c in cands],
                                 "mbr_index": idx, "risks": [round(r, 6) for r in risks]}) + "\n")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    model, vocab, plan, schedule, meta = _restore(cfg.checkpoint)
    _, src, refs = _eval_sources(cfg, vocab, model, meta)
    iplan = make_plan(plan, cfg.steps, cfg.candidates, cfg.seed, schedule)
    hyps, details = decode_corpus(model, src, iplan, return_candidates=True)
    sb = float(np.mean([self_bleu(c) for c, _, _ in details])) if cfg.candidates >= 2 else None
    systems = {plan.kind: (model, plan, schedule)}
    if cfg.baseline_checkpoint:
        b_model, _, b_plan, b_schedule, _ = _restore(cfg.baseline_checkpoint)
        systems[f"baseline-{b_plan.kind}"] = (b_model, b_plan, b_schedule)
    table = few_step_report(systems, src, refs, cfg.step_count_list(), candidates=cfg.candidates,
                            seed=cfg.seed, timing=cfg.timing)
    table.bleu = corpus_bleu(hyps, refs)
    table.exact_match = exact_match(hyps, refs)
    table.self_bleu = sb
    (out / "report.json").write_text(json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "few_step.csv").write_text(rows_to_csv(table.rows), encoding="utf-8")
    print(json.dumps({"bleu": round(table.bleu, 4), "exact_match": table.exact_match, "self_bleu": sb}))
    return 0


def cmd_trace(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    model, vocab, plan, schedule, meta = _restore(cfg.checkpoint)
    _, src, _ = _eval_sources(cfg, vocab, model, meta)
    if not 0 <= cfg.example < src.shape[0]:
        raise D.DataError(f"example {cfg.example} outside the {src.shape[0]} available sources")
    iplan = make_plan(plan, cfg.steps, 1, cfg.seed, schedule)
    _, trace = generate(model, src[cfg.example], iplan)
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for st in trace.steps:
            fh.write(json.dumps(vars(st)) + "\n")
    return 0


def cmd_dump_schedule(args) -> int:
    try:
        anchor = tuple(float(x) for x in args.anchor.split(",")) if args.anchor else None
        if anchor is not None and len(anchor) != 2:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--anchor expects n_e,t_e, got {args.anchor!r}") from None
    plan = _plan_from("uniform" if args.uniform else "ar", args.N, args.T, anchor, args.rounding)
    schedule = _schedule_from(args.T, args.offset)
    lines = ["t,n,f,alpha_bar"]
    lines += [f"{t},{n},{f},{ab:.10f}" for t, n, f, ab in schedule_rows(plan, schedule)]
    text = "\n".join(lines) + "\n"
    if args.out:
        _out_dir(args).joinpath("schedule.csv").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    corpus = D.synth_task(args.kind, args.V, args.N, args.count, args.seed, args.min_len)
    if args.out:
        D.write_jsonl(_out_dir(args) / f"{args.kind}.jsonl", corpus)
    else:
        for src, tgt in corpus.pairs:
            sys.stdout.write(json.dumps({"src": " ".join(src), "tgt": " ".join(tgt)}) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ardiff", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_cmd(name, func, help_):
        p = sub.add_parser(name, help=help_,
                           description=f"{help_}. Settings come from --config, ARDIFF_<KEY> "
                                       "environment variables and trailing key=value overrides.")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, help="shorthand for seed=<n>")
        p.add_argument("overrides", nargs="*", metavar="key=value")
        p.set_defaults(func=func)

    run_cmd("train", cmd_train, "train a denoiser on a JSONL corpus")
    run_cmd("generate", cmd_generate, "generate MBR-selected candidates for eval_data")
    run_cmd("eval", cmd_eval, "score a checkpoint and write the few-step table")
    run_cmd("trace", cmd_trace, "dump per-step intermediate states for one example")

    p = sub.add_parser("dump-schedule", help="CSV of token-level timesteps over the whole domain")
    p.add_argument("--N", type=int, required=True, help="target length")
    p.add_argument("--T", type=int, required=True, help="diffusion steps")
    p.add_argument("--anchor", help="n_e,t_e (default 2N,T)")
    p.add_argument("--offset", type=float, default=1e-4, help="square-root schedule offset")
    p.add_argument("--rounding", choices=("nearest", "floor"), default="nearest")
    p.add_argument("--uniform", action="store_true", help="dump the uniform baseline plan")
    p.add_argument("--out", help="output directory (default: stdout)")
    p.set_defaults(func=cmd_dump_schedule)

    p = sub.add_parser("synth", help="write a synthetic seq2seq corpus as JSONL")
    p.add_argument("--kind", choices=D.SYNTH_KINDS, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--V", type=int, default=20, help="vocabulary size including reserved ids")
    p.add_argument("--N", type=int, default=8, help="maximum sequence length")
    p.add_argument("--min-len", type=int, default=1)
    p.add_argument("--out", help="output directory (default: stdout)")
    p.set_defaults(func=cmd_synth)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except D.DataError as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
