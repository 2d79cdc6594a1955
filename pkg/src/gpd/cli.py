"""Command-line surface: expand, extract, train, eval, verify, plot, config."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint, config as config_mod
from .errors import GpdError
from .expand import ExpansionPlan, IR_MODES, expand_model
from .model import forward
from .reparam import materialize_student
from .tensor import Tensor
from .train import evaluate, track_gap, train
from .verify import SUITES, run_suites

PRESERVATION_TOL = 1e-9


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpd", description="Gap-preserving distillation engine")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("expand", help="grow a student checkpoint into a dynamic teacher")
    sp.add_argument("--in", dest="in_path", required=True, metavar="CKPT")
    sp.add_argument("--out", required=True, metavar="CKPT")
    sp.add_argument("--ratio", type=int, default=2)
    sp.add_argument("--branches", type=int, default=6)
    sp.add_argument("--epsilon", type=float, default=0.0)
    sp.add_argument("--mode", choices=IR_MODES, default="bn_safe")
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("extract", help="write the compact student implied by a teacher checkpoint")
    sp.add_argument("--in", dest="in_path", required=True, metavar="CKPT")
    sp.add_argument("--out", required=True, metavar="CKPT")

    sp = sub.add_parser("train", help="run a training protocol from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the config's dataset")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--view", choices=("student", "teacher"), default="student")

    sp = sub.add_parser("verify", help="run the numerical verification suites")
    sp.add_argument("suite", nargs="?", default="all", choices=SUITES + ("all",))
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("plot", help="render accuracy curves from a records CSV")
    sp.add_argument("--records", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("config", help="configuration helpers")
    sp.add_argument("action", choices=("print-defaults",))
    return p


def cmd_expand(args) -> int:
    student = checkpoint.load(args.in_path)
    plan = ExpansionPlan(ratio=args.ratio, branches=args.branches,
                         epsilon=args.epsilon, ir_mode=args.mode, seed=args.seed)
    teacher = expand_model(student, plan)

    rng = np.random.default_rng(args.seed)
    probes = Tensor(rng.normal(size=(8,) + student.input_shape))
    base = forward(student, probes, "student", "eval").data
    wide = forward(teacher, probes, "teacher", "eval").data
    deviation = float(np.max(np.abs(wide - base)))

    checkpoint.save(teacher, args.out)
    print(f"expanded ratio={args.ratio} branches={args.branches} "
          f"epsilon={args.epsilon} mode={args.mode} -> {args.out}")
    print(f"function preservation: max output deviation {deviation:.3e} "
          f"over {probes.shape[0]} probe inputs (seed {args.seed})")
    if args.epsilon == 0.0 and deviation >= PRESERVATION_TOL:
        print(f"FAIL: deviation above tolerance {PRESERVATION_TOL:.0e}", file=sys.stderr)
        return 2
    return 0


def cmd_extract(args) -> int:
    teacher = checkpoint.load(args.in_path)
    student = materialize_student(teacher)
    checkpoint.save(student, args.out)
    print(f"extracted student ({student.arch}, ratio {teacher.ratio}, "
          f"branches {teacher.branches}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    values = config_mod.load_config(args.config)
    values = config_mod.apply_env_overrides(values)
    if args.seed is not None:
        values["seed"] = args.seed
    settings = config_mod.to_run_settings(values)

    model, records = train(settings.train, out_dir=settings.out_dir)
    summary = track_gap(records)
    final = records[-1]
    print(f"trained {settings.train.protocol} for {settings.train.epochs} epochs "
          f"(seed {settings.train.seed}) -> {settings.out_dir}")
    print(f"final: student acc {final.acc_s:.4f}, teacher acc {final.acc_t:.4f}, "
          f"gap {final.gap:+.4f}")
    print(f"gap >= 0 on {summary.frac_nonneg:.0%} of evaluated epochs")

    if settings.plot:
        from .plotting import plot_records

        out_svg = os.path.join(settings.out_dir, "accuracy.svg")
        plot_records(os.path.join(settings.out_dir, "records.csv"), out_svg)
        print(f"accuracy chart -> {out_svg}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset

    values = config_mod.load_config(args.config)
    settings = config_mod.to_run_settings(values)
    model = checkpoint.load(args.ckpt)
    _, eval_ds = load_dataset(settings.train.dataset)
    acc, ce = evaluate(model, args.view, eval_ds)
    print(f"{args.view} view on {len(eval_ds)} samples: accuracy {acc:.4f}, mean CE {ce:.4f}")
    return 0


def cmd_verify(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    results = run_suites(names, seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print(f"replay failing checks with --seed {args.seed}", file=sys.stderr)
        return 2
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_records

    points = plot_records(args.records, args.out)
    print(f"plotted {points} epoch points -> {args.out}")
    return 0


def cmd_config(args) -> int:
    if args.action == "print-defaults":
        sys.stdout.write(config_mod.print_config(config_mod.defaults()))
    return 0


_HANDLERS = {
    "expand": cmd_expand,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "plot": cmd_plot,
    "config": cmd_config,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (GpdError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
