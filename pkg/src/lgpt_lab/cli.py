"""Command-line entry point: data generation, LM pretraining, training,
evaluation, gradient checks, ablations and report rendering.

All file outputs are written atomically (temp file + rename) and every
command is reproducible from its flags plus --seed alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict

import numpy as np

from .data import DatasetError, load_dataset, textualize, write_dataset
from .lm import LmConfig, load_lm, pretrain_lm, save_lm
from .reporting import ReportError, render_table, run_report_as_arm
from .tensor import FrozenParameterError, GradientError, TensorError
from .trainer import (ConfigError, EncoderParams, RunConfig, TrainingError,
                      ablate, ablation_preset, evaluate, generate_task_data,
                      gradient_check_suite, train)

log = logging.getLogger("lgpt_lab")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def write_atomic(path: str, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config(path: str | None, overrides: dict) -> RunConfig:
    base = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    base.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**base)


def _cmd_gen_data(args) -> int:
    split = generate_task_data(args.task, args.n, args.seed, k=args.k,
                               nodes_per_graph=args.nodes, num_attributes=args.attrs)
    tmp_fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(args.out)) or ".")
    os.close(tmp_fd)
    write_dataset(split, tmp)
    os.replace(tmp, args.out)
    print(f"wrote {args.n} examples to {args.out}")
    return EXIT_OK


def _cmd_pretrain_lm(args) -> int:
    split = load_dataset(args.data)
    corpus = [(f"{textualize(ex.graph)}\n{ex.query}", ex.answer)
              for ex in split.train]
    config = LmConfig(d_llm=args.d_llm, n_blocks=args.blocks, heads=args.heads,
                      t_max=args.t_max, vocab_size=args.vocab_size)
    lm = pretrain_lm(corpus, config, seed=args.seed, max_steps=args.steps, lr=args.lr)
    save_lm(lm, args.out)
    print(f"pretrained LM saved to {args.out} (digest {lm.digest()[:12]})")
    return EXIT_OK


def _save_encoder(enc: EncoderParams, path: str) -> None:
    arrays = {name: p.data for name, p in enc.named().items()}
    fd, tmp = tempfile.mkstemp(suffix=".npz",
                               dir=os.path.dirname(os.path.abspath(path)) or ".")
    os.close(fd)
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def _load_encoder(path: str, config: RunConfig) -> EncoderParams:
    enc = EncoderParams(config, np.random.default_rng(config.seed))
    with np.load(path) as blob:
        for name, p in enc.named().items():
            p.data = blob[name].copy()
    return enc


def _cmd_train(args) -> int:
    config = _load_config(args.config, {"seed": args.seed})
    data = load_dataset(args.data)
    lm = load_lm(args.lm)
    report, enc = train(config, data, lm)
    write_atomic(args.out, json.dumps(report.to_dict(), indent=2))
    if args.params_out:
        _save_encoder(enc, args.params_out)
    print(f"final test metric {report.final_test_metric:.4f} "
          f"(digest equal: {report.digest_pre == report.digest_post})")
    return EXIT_OK


def _cmd_eval(args) -> int:
    config = _load_config(args.config, {})
    data = load_dataset(args.data)
    lm = load_lm(args.lm)
    enc = _load_encoder(args.params, config)
    split = {"train": data.train, "validation": data.validation, "test": data.test}[args.split]
    metric = evaluate(enc, split, lm, config)
    print(f"{args.split} metric: {metric:.4f}")
    if args.out:
        write_atomic(args.out, json.dumps({"split": args.split, "metric": metric}))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    config = _load_config(args.config, {})
    results = gradient_check_suite(config, seed=args.seed)
    all_ok = True
    for name, res in results.items():
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}  {name}: max rel err {res.max_rel_err:.3e} "
              f"({res.checked} coords)")
        if not res.passed:
            all_ok = False
            print(f"      worst coord {res.worst_coord}")
    return EXIT_OK if all_ok else EXIT_RUNTIME


def _cmd_ablate(args) -> int:
    overrides = {}
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if args.eval_every is not None:
        overrides["eval_every"] = args.eval_every
    base = _load_config(args.config, overrides)
    if args.task:
        base = RunConfig(**{**asdict(base), "task": args.task})
    configs = ablation_preset(args.preset, base)
    data = load_dataset(args.data)
    lm = load_lm(args.lm)
    seeds = [int(s) for s in args.seeds.split(",")]
    jobs = args.jobs or int(os.environ.get("LGPT_LAB_JOBS", "1"))
    arms = ablate(configs, data, lm, seeds, jobs=jobs)
    arm_dicts = [a.to_dict() for a in arms]
    fmt = "csv" if args.out.endswith(".csv") else "md"
    write_atomic(args.out, render_table(arm_dicts, fmt))
    if args.json_out:
        write_atomic(args.json_out, json.dumps(arm_dicts, indent=2))
    print(render_table(arm_dicts, "md"))
    return EXIT_OK


def _cmd_report(args) -> int:
    arms = []
    for path in args.inputs:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        if isinstance(obj, list):
            arms.extend(obj)
        else:
            arms.append(run_report_as_arm(obj))
    text = render_table(arms, args.format)
    if args.out:
        write_atomic(args.out, text)
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgpt-lab",
                                     description="graph soft-prompting lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic QA dataset")
    p.add_argument("--task", required=True,
                   choices=["attribute_lookup", "multifact", "stance"])
    p.add_argument("--n", type=int, required=True, help="number of examples")
    p.add_argument("--k", type=int, default=4, help="facts per answer (multifact)")
    p.add_argument("--nodes", type=int, default=4, help="nodes per graph (attribute task)")
    p.add_argument("--attrs", type=int, default=3, help="attribute types (attribute task)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain-lm", help="pretrain and freeze the tiny LM")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--d-llm", type=int, default=64)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--t-max", type=int, default=256)
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pretrain_lm)

    p = sub.add_parser("train", help="train the graph encoder against a frozen LM")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run report JSON")
    p.add_argument("--params-out", help="trained encoder parameters (npz)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate stored encoder parameters")
    p.add_argument("--config", help="JSON run config (must match training)")
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all trainable groups")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=3)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation preset")
    p.add_argument("--preset", required=True, choices=["table3", "table4", "fig4"])
    p.add_argument("--config", help="base JSON run config")
    p.add_argument("--task")
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True, help="table output (.csv or .md)")
    p.add_argument("--json-out", help="full arm reports as JSON")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="render stored reports as a table")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--format", default="md", choices=["md", "csv"])
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    return parser


def run_cli(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ReportError, TensorError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, GradientError, FrozenParameterError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())
