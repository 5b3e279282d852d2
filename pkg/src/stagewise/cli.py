"""Command-line entry point: ``stagewise <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .core import PipelineConfig, StageKind, ensure_valid, load_config, load_suite, write_suite
from .dpo import DpoHyperparams, eval_accuracy, train_scorer
from .exceptions import StagewiseError
from .experiments import AblationSpec, make_synthetic_suite, render_rows, report, run_ablation, run_scale, summarize
from .pipeline import PipelineError, default_executor, run_pipeline, write_traces
from .prefdata import (
    PairingPolicy,
    build_pairs,
    collect_rollouts,
    dataset_stats,
    format_pair_table,
    read_pairs,
    split_dataset,
    write_pairs,
    write_rollouts,
)
from .scoring import ScorerParams

log = logging.getLogger("stagewise")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.parallelism is not None:
        changes["parallelism"] = args.parallelism
    if args.keep_sandboxes:
        changes["keep_sandboxes"] = True
    return ensure_valid(cfg.replace(**changes))


def _suite(args):
    if args.suite:
        return load_suite(args.suite), Path(args.suite).stem
    return make_synthetic_suite(args.synthetic_problems), "synthetic"


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args):
    cfg = _config(args)
    problems, name = _suite(args)
    out = _out(args)
    label = {"configuration": "run", "n": cfg.n_formulations, "seed": cfg.seed, "suite": name}
    traces, failures = [], 0
    for p in problems:
        try:
            traces.append(run_pipeline(p, cfg, label=label))
        except PipelineError as exc:
            log.error("%s: %s", p.id, exc)
            traces.append(exc.trace)
            failures += 1
    write_traces(out / "traces.jsonl", traces, keep_candidates=args.keep_candidates)
    rows = summarize(traces)
    (out / "report.txt").write_text(render_rows(rows, "table"))
    (out / "report.csv").write_text(render_rows(rows, "csv"))
    sys.stdout.write(render_rows(rows, "table"))
    return 1 if failures == len(problems) else 0


def cmd_build_prefs(args):
    cfg = _config(args)
    problems, name = _suite(args)
    out = _out(args)
    n = args.n or cfg.n_formulations
    rollouts = collect_rollouts(problems, cfg, n, default_executor(cfg), run_id=f"{name}-{cfg.seed}")
    write_rollouts(out / "rollouts.jsonl", rollouts)
    ds_f, ds_s = build_pairs(rollouts, PairingPolicy(args.cap, cfg.seed))
    write_pairs(out / "prefs_f.jsonl", ds_f)
    write_pairs(out / "prefs_s.jsonl", ds_s)
    table = format_pair_table([(f"{name} ({len(problems)})", len(problems), ds_f, ds_s)])
    (out / "prefs_stats.txt").write_text(table)
    sys.stdout.write(table)
    stats = {"formulation": dataset_stats(ds_f).to_dict(), "solution": dataset_stats(ds_s).to_dict()}
    (out / "prefs_stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    if len(ds_f) == 0 and len(ds_s) == 0:
        log.warning("no preference pairs were built: every context was all-positive or all-negative")
    return 0


def cmd_train_rm(args):
    ds = read_pairs(args.prefs)
    hp = DpoHyperparams(args.beta, args.lr, args.epochs, args.batch_size, args.seed or 0, args.eval_ratio)
    train, held = split_dataset(ds, hp.eval_ratio, hp.seed)
    init = ScorerParams.load(args.init) if args.init else None
    rep = train_scorer(train, init=init, hp=hp, ds_eval=held if len(held) else None)
    out = _out(args)
    tag = "f" if ds.stage is StageKind.FORMULATION else "s"
    rep.final_params.save(out / f"rm_{tag}.json")
    rep.save(out / f"rm_{tag}_report.json", out / f"rm_{tag}_loss.csv")
    print(json.dumps({"stage": ds.stage.value, "n_train": len(train), "n_eval": len(held),
                      "final_loss": rep.loss_curve[-1], "train_accuracy": rep.train_accuracy,
                      "eval_accuracy": rep.eval_accuracy if len(held) else None}))
    return 0


def cmd_eval_rm(args):
    ds = read_pairs(args.prefs)
    acc = eval_accuracy(ScorerParams.load(args.params), ds)
    print(json.dumps({"stage": ds.stage.value, "n_pairs": len(ds), "accuracy": acc}))
    return 0


def _spec_from_args(args, default_configs):
    if args.spec:
        spec = AblationSpec.load(args.spec)
    else:
        problems, name = _suite(args)
        base = load_config(args.config) if args.config else PipelineConfig(debug_iterations=0)
        spec = AblationSpec(default_configs, (32,), tuple(range(args.seeds)), tuple(problems), base, name)
    changes = {}
    if getattr(args, "n", None):
        changes["n_values"] = tuple(int(x) for x in args.n.split(","))
    if args.parallelism is not None:
        changes["base"] = spec.base.replace(parallelism=args.parallelism)
    return dataclasses.replace(spec, **changes)


def cmd_ablate(args):
    spec = _spec_from_args(args, ("no_rm", "rm_f_only", "rm_s_only", "full"))
    rep = run_ablation(spec)
    rep.write(_out(args), keep_candidates=args.keep_candidates)
    sys.stdout.write(render_rows(rep.rows(), "table"))
    return 0


def cmd_scale(args):
    if not args.n:
        args.n = "4,8,16"
    spec = _spec_from_args(args, ("full", "random_of_n"))
    rep = run_scale(spec)
    rep.write(_out(args), keep_candidates=args.keep_candidates)
    sys.stdout.write(render_rows(rep.rows(), "table"))
    return 0


def cmd_report(args):
    text = report(args.traces, args.format)
    if args.out:
        out = _out(args)
        suffix = {"table": "txt", "csv": "csv", "jsonl": "jsonl"}[args.format]
        (out / f"report.{suffix}").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_make_suite(args):
    out = Path(args.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_suite(out, make_synthetic_suite(args.n, args.seed or 0))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config (TOML or JSON)")
    common.add_argument("--suite", help="task suite JSONL; omitted means a synthetic suite")
    common.add_argument("--synthetic-problems", type=int, default=50)
    common.add_argument("--out", default="out")
    common.add_argument("--seed", type=int)
    common.add_argument("--parallelism", type=int)
    common.add_argument("--keep-sandboxes", action="store_true")
    common.add_argument("--keep-candidates", action="store_true",
                        help="embed candidate bodies in traces instead of a sidecar directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stagewise", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="run the pipeline over a suite").set_defaults(func=cmd_run)

    bp = sub.add_parser("build-prefs", parents=[common], help="collect rollouts and build preference pairs")
    bp.add_argument("--n", type=int, help="formulations per problem and solutions per formulation")
    bp.add_argument("--cap", type=int, help="maximum pairs per context")
    bp.set_defaults(func=cmd_build_prefs)

    tr = sub.add_parser("train-rm", parents=[common], help="fit a linear scorer on preference pairs")
    tr.add_argument("--prefs", required=True)
    tr.add_argument("--init", help="initial scorer params JSON")
    tr.add_argument("--beta", type=float, default=0.1)
    tr.add_argument("--lr", type=float, default=0.1)
    tr.add_argument("--epochs", type=int, default=5)
    tr.add_argument("--batch-size", type=int, default=16)
    tr.add_argument("--eval-ratio", type=float, default=0.1)
    tr.set_defaults(func=cmd_train_rm)

    ev = sub.add_parser("eval-rm", parents=[common], help="pairwise accuracy of scorer params")
    ev.add_argument("--params", required=True)
    ev.add_argument("--prefs", required=True)
    ev.set_defaults(func=cmd_eval_rm)

    ab = sub.add_parser("ablate", parents=[common], help="run an ablation matrix")
    ab.add_argument("--spec", help="ablation spec (TOML or JSON)")
    ab.add_argument("--n", help="comma-separated N values, overriding the --spec file")
    ab.add_argument("--seeds", type=int, default=5)
    ab.set_defaults(func=cmd_ablate)

    sc = sub.add_parser("scale", parents=[common], help="best-of-N vs random-of-N over N")
    sc.add_argument("--spec")
    sc.add_argument("--n", help="comma-separated N values (default 4,8,16)")
    sc.add_argument("--seeds", type=int, default=20)
    sc.set_defaults(func=cmd_scale)

    rp = sub.add_parser("report", help="render a report from persisted traces")
    rp.add_argument("traces", help="traces.jsonl or a directory containing it")
    rp.add_argument("--format", choices=("table", "csv", "jsonl"), default="table")
    rp.add_argument("--out")
    rp.add_argument("-v", "--verbose", action="store_true")
    rp.set_defaults(func=cmd_report)

    ms = sub.add_parser("make-suite", help="write a synthetic task suite")
    ms.add_argument("out_file")
    ms.add_argument("--n", type=int, default=50)
    ms.add_argument("--seed", type=int)
    ms.set_defaults(func=cmd_make_suite)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (StagewiseError, OSError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "violations", None):
            err["violations"] = [str(v) for v in exc.violations]
        print(json.dumps(err), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
