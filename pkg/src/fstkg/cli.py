"""Command-line entry point: ``fstkg <subcommand> [--config PATH] [--seed N] [--mode M] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import kgstore
from .encoder import load_checkpoint, save_checkpoint
from .experiment import (ExperimentConfig, StageError, build_config, load_config, load_graph, prepare, pretrain,
                         run_ablation_suite, run_cross_shot, run_experiment, train, evaluate, with_seed)
from .meta import MODES, meta_test_adapt
from .objective import METRICS_SCHEMA, aggregate_metrics, metrics_csv
from .synthetic import SyntheticSpec, audit_synthetic, generate_synthetic

log = logging.getLogger("fstkg")


def _experiment(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig(synthetic=SyntheticSpec())
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    if overrides:
        exp = build_config({k.strip(): v.strip() for k, v in overrides.items()}, exp)
    if getattr(args, "data", None):
        exp = replace(exp, dataset=args.data, synthetic=None)
    if args.seed is not None:
        exp = with_seed(exp, args.seed)
    if args.mode is not None:
        exp = replace(exp, mode=args.mode)
    if args.out is not None:
        exp = replace(exp, out_dir=args.out)
    exp.validate()
    return exp


def cmd_ingest(args, exp):
    kg = kgstore.ingest_tsv(args.data)
    lo, hi = kg.time_span()
    print(json.dumps({"entities": kg.num_entities, "relations": kg.num_relations, "quadruples": len(kg),
                      "t_min": lo, "t_max": hi}, sort_keys=True))


def cmd_split(args, exp):
    kg = load_graph(exp)
    split = kgstore.chronological_split(kg, exp.ratios)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kgstore.write_split_manifest(kg, split, out / "split.txt")
    print(json.dumps({"boundaries": list(split.boundaries), **split.counts()}, sort_keys=True))


def cmd_synth(args, exp):
    spec = exp.synthetic or SyntheticSpec(seed=exp.seed)
    kg = generate_synthetic(spec)
    bad = audit_synthetic(kg, spec)
    if bad:
        raise RuntimeError(f"generated graph breaks its rule on {len(bad)} facts")
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kgstore.write_tsv(kg, out / "synthetic.tsv")
    print(f"wrote {len(kg)} facts to {out / 'synthetic.tsv'}")


def cmd_train(args, exp):
    """Pretrain + meta-train only; writes checkpoint.json and train_log.jsonl."""
    prep = prepare(exp)
    phi0, losses = pretrain(prep, exp.train)
    records = []
    state = train(prep, exp.train, phi0, exp.mode, records.append)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.phi, out / "checkpoint.json", extra={"mode": exp.mode})
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for i, loss in enumerate(losses):
            fh.write(json.dumps({"stage": "pretrain", "epoch": i, "emp_loss": loss}) + "\n")
        for r in records:
            fh.write(json.dumps({"stage": "meta", **r}) + "\n")
    kgstore.write_split_manifest(prep.kg, prep.split, out / "split.txt")
    print(f"checkpoint written to {out / 'checkpoint.json'}")


def _eval_from_checkpoint(args, exp):
    prep = prepare(exp)
    phi = load_checkpoint(args.checkpoint)
    return prep, phi


def cmd_adapt(args, exp):
    """Adapt a checkpoint to one evaluation entity and save the entity-specific parameters."""
    prep, phi = _eval_from_checkpoint(args, exp)
    by_name = {prep.kg.entities.name(t.entity): t for t in prep.eval_tasks}
    if args.entity not in by_name:
        raise KeyError(f"{args.entity!r} is not an evaluation entity with enough facts")
    task = by_name[args.entity]
    rng = np.random.default_rng([exp.seed, 3, task.entity])
    adapted = meta_test_adapt(phi, prep.eval_ctx, prep.kg, task.entity, task.support, exp.train, rng,
                              known_entities=prep.known_entities)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(adapted, out / f"adapted_{args.entity}.json", extra={"entity": args.entity})
    print(f"adapted parameters written to {out / f'adapted_{args.entity}.json'}")


def cmd_eval(args, exp):
    prep, phi = _eval_from_checkpoint(args, exp)
    ranked = evaluate(prep, exp.train, phi)
    report = aggregate_metrics(ranked)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(exp.directions), encoding="utf-8")
    print(report.to_json(exp.directions), end="")


def cmd_run(args, exp):
    res = run_experiment(exp)
    print(res.report.to_json(exp.directions) if res.report else "{}", end="")


def cmd_ablate(args, exp):
    seeds = [exp.seed + i for i in range(args.seeds)]
    rows, _ = run_ablation_suite(exp, seeds=seeds)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = metrics_csv(rows)
    (out / "ablation.csv").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_cross_shot(args, exp):
    rows = run_cross_shot(exp, train_shots=tuple(args.train_shots), test_shots=tuple(args.test_shots))
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = metrics_csv(rows)
    (out / "cross_shot.csv").write_text(text, encoding="utf-8")
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fstkg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.set_defaults(fn=fn)
        return sp

    add("ingest", cmd_ingest, "parse a TSV of quadruples and print statistics").add_argument("data")
    add("split", cmd_split, "chronological entity split; writes split.txt").add_argument("--data")
    add("synth", cmd_synth, "generate the synthetic drift graph as TSV")
    add("train", cmd_train, "pretrain and meta-train; writes a checkpoint").add_argument("--data")
    sp = add("adapt", cmd_adapt, "adapt a checkpoint to one evaluation entity")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--entity", required=True)
    sp.add_argument("--data")
    sp = add("eval", cmd_eval, "evaluate a checkpoint on the evaluation entities")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    add("run", cmd_run, "full pipeline with all output files").add_argument("--data")
    sp = add("ablate", cmd_ablate, "all four modes on shared data and pretraining")
    sp.add_argument("--seeds", type=int, default=1)
    sp.add_argument("--data")
    sp = add("cross-shot", cmd_cross_shot, "train at one support size, evaluate at others")
    sp.add_argument("--train-shots", type=int, nargs="+", default=[1, 3])
    sp.add_argument("--test-shots", type=int, nargs="+", default=[1, 3, 5])
    sp.add_argument("--data")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        exp = _experiment(args)
        args.fn(args, exp)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        print(f"error: [{args.command}] {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
