"""``albert-lab {params|data|pretrain|probe|eval}``.

Every command reads one JSON run config (``--config``); flags override its
fields.  Errors go to stderr as a single line and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as D
from . import model as M
from .checkpoint import CheckpointError
from .data import DataError, generate_instances, instance_stats, pack_batch, read_documents, read_instances, validate_instance, write_instances
from .optim import NonFiniteGradientError
from .presets import PRESETS, get_preset, table_rows
from .training import RunConfig, RunConfigError, TrainingAborted, load_corpus, load_model, pretrain

log = logging.getLogger("albert_lab")


class CliError(Exception):
    pass


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    for flag, attr in (("corpus", "corpus"), ("out", "output_dir"), ("seed", "seed"), ("max_steps", "max_steps"),
                       ("batch_size", "batch_size"), ("max_len", "max_len"), ("lr", "lr")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(run, attr, val)
    if getattr(args, "objective", None):
        run.model.objective = args.objective
    if getattr(args, "no_dropout", False):
        run.model.dropout_p = 0.0
    return run


# -- params -------------------------------------------------------------

def _override_model(cfg: M.ModelConfig, args) -> M.ModelConfig:
    changes = {}
    if args.sharing:
        changes["sharing_strategy"] = args.sharing
    if args.embedding:
        changes["embedding_size"] = args.embedding
        changes["factorize_embedding"] = None
    if args.group_size:
        changes["group_size"] = args.group_size
    if args.layers:
        changes["num_layers"] = args.layers
    if args.vocab:
        changes["vocab_size"] = args.vocab
    return dataclasses.replace(cfg, **changes)


def cmd_params(args) -> int:
    if args.table:
        rows = table_rows(args.table)
        if args.json:
            _emit(rows, None)
        else:
            print(f"{'table':<6}{'row':<26}{'published':>10}{'computed':>10}{'dev':>8}")
            for r in rows:
                print(f"{r['table']:<6}{r['row']:<26}{r['published_M']:>9.0f}M{r['computed_M']:>9.1f}M"
                      f"{100 * r['rel_dev']:>7.1f}%")
        return 0

    if args.compare:
        a, b = (_override_model(get_preset(n), args) for n in args.compare)
        ca, cb = M.count_parameters(a), M.count_parameters(b)
        report = {
            "a": {"preset": args.compare[0], **ca.to_dict()},
            "b": {"preset": args.compare[1], **cb.to_dict()},
            "ratio_a_over_b": ca.total / cb.total,
            "param_memory_ratio": D.parameter_memory_ratio(a, b),
        }
        if args.throughput:
            ta = _throughput(a, args)
            tb = _throughput(b, args)
            report["throughput"] = {"a": ta, "b": tb, "speedup_b_over_a": tb["examples_per_sec"] / ta["examples_per_sec"]}
        if args.json:
            _emit(report, None)
        else:
            print(f"{args.compare[0]}: {ca.total:,} parameters")
            print(f"{args.compare[1]}: {cb.total:,} parameters")
            print(f"ratio {args.compare[0]}/{args.compare[1]}: {report['ratio_a_over_b']:.2f}")
            if args.throughput:
                print(f"throughput speedup {args.compare[1]} vs {args.compare[0]}: "
                      f"{report['throughput']['speedup_b_over_a']:.2f}x")
        return 0

    if args.preset:
        cfg, name = get_preset(args.preset), args.preset
    elif args.config:
        cfg, name = RunConfig.load(args.config).model, str(args.config)
    else:
        raise CliError("params needs --preset, --config, --compare or --table")
    cfg = M.validate_config(_override_model(cfg, args))
    br = M.count_parameters(cfg)
    report = {"config": name, "model": cfg.to_dict(), **br.to_dict()}
    if args.throughput:
        report["throughput"] = _throughput(cfg, args)
    if args.json:
        _emit(report, None)
    else:
        print(f"config      {name}")
        print(f"embeddings  {br.embeddings:>14,}")
        print(f"encoder     {br.encoder:>14,}  ({br.attention_groups} attention x {br.attention_per_group:,}, "
              f"{br.ffn_groups} ffn x {br.ffn_per_group:,})")
        print(f"heads       {br.heads:>14,}")
        print(f"total       {br.total:>14,}  ({br.total / 1e6:.1f}M)")
        if args.throughput:
            t = report["throughput"]
            print(f"throughput  {t['examples_per_sec']:.2f} examples/sec (batch {t['batch_size']}, len {t['seq_len']})")
    return 0


def _throughput(cfg: M.ModelConfig, args) -> dict:
    params = M.build_model(cfg, seed=0, dtype=np.float32)
    return D.measure_throughput(params, cfg, args.batch, args.seq, steps=args.steps)


# -- data ---------------------------------------------------------------

def cmd_data(args) -> int:
    run = _run_config(args)
    if not run.corpus or not Path(run.corpus).is_file():
        raise CliError(f"corpus {run.corpus or '(unset)'} does not exist")
    vocab, docs = load_corpus(run)
    insts = generate_instances(docs, run.model.objective, args.count, run.max_len, run.masking, len(vocab),
                               seed=run.seed, short_prob=run.short_prob)
    bad = [(i, p) for i, inst in enumerate(insts) for p in validate_instance(inst, run.max_len, docs)]
    if bad:
        raise CliError(f"instance {bad[0][0]} violates contract: {bad[0][1]}")
    if args.dump:
        write_instances(args.dump, insts)
    stats = instance_stats(insts, run.masking, run.max_len)
    stats["vocab_size"] = len(vocab)
    stats["validated"] = len(insts)
    stats["config_digest"] = run.digest()
    _emit(stats, args.stats)
    return 0


# -- pretrain -----------------------------------------------------------

def cmd_pretrain(args) -> int:
    run = _run_config(args)
    try:
        res = pretrain(run, warm_start=args.warm_start)
    except TrainingAborted as exc:
        kept = f"; last good checkpoint {exc.last_checkpoint}" if exc.last_checkpoint else ""
        raise CliError(f"{exc}{kept}") from None
    first, last = res.losses[0], res.losses[-1]
    _emit({
        "checkpoint": str(res.checkpoint),
        "steps": len(res.losses),
        "initial_mlm_loss": first["mlm_loss"],
        "final_mlm_loss": last["mlm_loss"],
        "config_digest": run.digest(),
    }, None)
    return 0


# -- probe / eval -------------------------------------------------------

def _eval_instances(args, params, vocab, meta, objective, count, masked=True):
    run = RunConfig.from_dict(meta["run"]) if "run" in meta else RunConfig(model=params.config)
    docs = list(read_documents(args.corpus, vocab))
    if not docs:
        raise CliError(f"corpus {args.corpus} is empty")
    return generate_instances(docs, objective, count, run.max_len, run.masking if masked else None, len(vocab),
                              seed=args.seed, short_prob=0.0), run


def cmd_probe(args) -> int:
    params, vocab, meta, _ = load_model(args.checkpoint)
    cfg = params.config
    objective = cfg.objective
    insts, run = _eval_instances(args, params, vocab, meta, objective, args.count, masked=False)
    batch = pack_batch(insts, run.max_len)
    rows = D.layer_io_similarity(params, cfg, batch)
    text = D.trace_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if "config_digest" in meta:
        log.info("probe config_digest=%s", meta["config_digest"])
    return 0


def cmd_eval(args) -> int:
    params, vocab, meta, _ = load_model(args.checkpoint)
    cfg = params.config
    sets = {}
    for name in ("set", "nsp_set", "sop_set"):
        path = getattr(args, name)
        if path:
            data = read_instances(path)
            if not data:
                raise CliError(f"evaluation set {path} is empty")
            sets[name] = data
    if args.corpus:
        if cfg.uses_sentence_pair:
            sets.setdefault("nsp_set", _eval_instances(args, params, vocab, meta, "mlm_nsp", args.count)[0])
            sets.setdefault("sop_set", _eval_instances(args, params, vocab, meta, "mlm_sop", args.count)[0])
        else:
            sets.setdefault("set", _eval_instances(args, params, vocab, meta, "mlm_only", args.count)[0])
    if not sets:
        raise CliError("eval needs at least one of --set, --nsp-set, --sop-set or --corpus")
    max_len = max(len(i) for data in sets.values() for i in data)
    report: dict = {"checkpoint": str(args.checkpoint), "config_digest": meta.get("config_digest")}
    for name, data in sets.items():
        report[name] = D.intrinsic_eval(params, cfg, data, max_len=max_len).to_dict()
    if "nsp_set" in sets and "sop_set" in sets and cfg.uses_sentence_pair:
        cross = D.cross_objective_eval(params, cfg, sets["nsp_set"], sets["sop_set"], max_len=max_len)
        report.update(cross.to_dict())
    _emit(report, args.out)
    return 0


# -- entry point --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="albert-lab", description="Toy-scale ALBERT pretraining laboratory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="parameter-count breakdown for a preset or config")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--compare", nargs=2, metavar=("A", "B"))
    p.add_argument("--table", choices=["1", "2", "3", "4", "all"])
    p.add_argument("--sharing", choices=M.SHARING_STRATEGIES)
    p.add_argument("--embedding", type=int)
    p.add_argument("--group-size", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--throughput", action="store_true", help="also time forward+backward+step")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seq", type=int, default=16)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("data", help="generate, validate and dump training instances")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus")
    p.add_argument("--objective", choices=M.OBJECTIVES)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--dump", help="JSON-lines instance output")
    p.add_argument("--stats", help="write stats JSON here instead of stdout")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("pretrain", help="run toy pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--objective", choices=M.OBJECTIVES)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warm-start", help="checkpoint of a shallower model to expand from")
    p.add_argument("--no-dropout", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    for name, fn, helptext in (("probe", cmd_probe, "layer input/output similarity CSV"),
                               ("eval", cmd_eval, "intrinsic MLM / sentence-pair accuracy")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", help="ignored when the checkpoint sidecar carries the config")
        p.add_argument("--corpus", help="held-out corpus to build instances from")
        p.add_argument("--count", type=int, default=64 if name == "probe" else 1000)
        p.add_argument("--seed", type=int, default=1234)
        p.add_argument("--out")
        if name == "eval":
            p.add_argument("--set", help="JSON-lines instance dump")
            p.add_argument("--nsp-set")
            p.add_argument("--sop-set")
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "probe" and not args.corpus:
        print("albert-lab: error: probe needs --corpus", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, RunConfigError, CheckpointError, DataError, M.ConfigError, NonFiniteGradientError,
            KeyError, OSError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"albert-lab: error: {msg}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
