"""Command-line entry point.

Subcommands: train, attack, evaluate, sweep, ladder, oracle-check, plot.
Common flags: --config, --set k=v (repeatable, dotted paths), --seed,
--out. Exit code 0 on success; on failure a machine-readable error JSON is
printed to stdout and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

from .attacks import AttackSpec, run_attack
from .harness import (
    ExperimentConfig,
    apply_seed,
    build_dataset,
    export_plot_data,
    oracle_report,
    oracle_report_summary,
    parse_override,
    run_experiment,
    run_ladder,
    set_by_path,
    sweep,
    write_ladder_csv,
)
from .margins import MarginEstimate, NormSpec, batch_logit_margins
from .data import split as split_dataset
from .nets import load_checkpoint


def _load_config(args) -> ExperimentConfig:
    with open(args.config) as fh:
        cfg_dict = json.load(fh)
    if getattr(args, "seed", None) is not None:
        apply_seed(cfg_dict, args.seed)
    for override in getattr(args, "set", None) or []:
        key, value = parse_override(override)
        set_by_path(cfg_dict, key, value)
    if getattr(args, "out", None):
        cfg_dict["output_dir"] = args.out
    return ExperimentConfig.from_dict(cfg_dict)


def _cmd_train(args) -> int:
    config = _load_config(args)
    report = run_experiment(config)
    print(json.dumps({
        "name": config.name,
        "clean_test_acc": report["clean_test_acc"],
        "robust_worst_acc": report["robust_worst_acc"],
        "best_epoch": report["train_summary"]["best_epoch"],
    }, indent=2))
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_config(args)
    net = load_checkpoint(args.checkpoint)
    dataset = build_dataset(config.dataset)
    _, _, te = split_dataset(dataset, config.split_spec["fractions"], config.split_spec["seed"])
    phi, _ = batch_logit_margins(net(te.inputs).data, te.labels)
    out = {"clean_test_acc": float((phi > 0).mean())}
    from .attacks import robust_accuracy

    for spec in config.evaluation:
        out[spec.label()] = robust_accuracy(net, te, [spec])
    out["robust_worst_acc"] = robust_accuracy(net, te, config.evaluation)
    print(json.dumps(out, indent=2))
    return 0


def _cmd_attack(args) -> int:
    config = _load_config(args)
    net = load_checkpoint(args.checkpoint)
    dataset = build_dataset(config.dataset)
    _, _, te = split_dataset(dataset, config.split_spec["fractions"], config.split_spec["seed"])
    norm = NormSpec.from_name(args.norm)
    spec = AttackSpec(kind=args.kind, norm=norm, epsilon=args.epsilon, steps=args.steps,
                      step_size=args.step_size, restarts=args.restarts,
                      clip_min=args.clip_min, clip_max=args.clip_max,
                      seed=args.seed if args.seed is not None else 0)
    result = run_attack(net, te.inputs, te.labels, spec)
    phi, _ = batch_logit_margins(net(te.inputs).data, te.labels)
    out_path = args.out or "attack.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "clean_correct", "attacked_correct", "margin_if_fab"])
        for i in range(len(te)):
            margin = ""
            if result.fab_margins is not None and isinstance(result.fab_margins[i], MarginEstimate):
                margin = result.fab_margins[i].value
            writer.writerow([i, int(phi[i] > 0), int(not result.success_mask[i]), margin])
    print(json.dumps({
        "attack": spec.label(),
        "success_rate": float(result.success_mask.mean()),
        "csv": out_path,
    }, indent=2))
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    grid = json.loads(args.grid)
    summary = sweep(config, grid, workers=args.workers)
    out_path = args.out or "sweep.json"
    with open(out_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps({
        "runs": len(summary["runs"]),
        "best_robust": {"name": summary["best_robust"]["name"],
                        "robust_worst": summary["best_robust"]["robust_worst"]},
        "best_clean": {"name": summary["best_clean"]["name"],
                       "clean_test": summary["best_clean"]["clean_test"]},
        "summary": out_path,
    }, indent=2))
    return 0


def _cmd_ladder(args) -> int:
    config = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    ladder = run_ladder(config, seeds, burn_in=args.burn_in,
                        hinge_lambda=args.hinge_lambda, exp_lambda=args.exp_lambda)
    out_path = args.out or "ladder.csv"
    write_ladder_csv(ladder, out_path)
    print(json.dumps({"medians": ladder["medians"], "monotonicity": ladder["monotonicity"],
                      "failures": ladder["failures"], "csv": out_path}, indent=2))
    if ladder["enforced"] and not all(ladder["monotonicity"].values()):
        print(json.dumps({"error": "LadderOrderingViolation",
                          "message": "median robust accuracy ordering violated",
                          "monotonicity": ladder["monotonicity"]}))
        return 3
    return 0


def _cmd_oracle_check(args) -> int:
    config = _load_config(args)
    net = load_checkpoint(args.checkpoint)
    dataset = build_dataset(config.dataset)
    _, _, te = split_dataset(dataset, config.split_spec["fractions"], config.split_spec["seed"])
    out_path = args.out or "oracle_check.csv"
    rows = oracle_report(net, te, args.n, norm=config.train.loss.norm,
                         beta=config.train.loss.beta, fab_steps=config.train.loss.fab_steps,
                         path=out_path)
    print(json.dumps({"rows": len(rows), "median_abs_err": oracle_report_summary(rows),
                      "csv": out_path}, indent=2))
    return 0


def _cmd_plot(args) -> int:
    config = _load_config(args)
    net = load_checkpoint(args.checkpoint)
    dataset = build_dataset(config.dataset)
    _, _, te = split_dataset(dataset, config.split_spec["fractions"], config.split_spec["seed"])
    eps = config.evaluation[0].epsilon if config.evaluation else 0.1
    csv_path, svg_path = export_plot_data(net, te, args.resolution,
                                          args.out or "plot", epsilon=eps)
    print(json.dumps({"grid_csv": csv_path, "svg": svg_path}, indent=2))
    return 0


def _add_common(parser):
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--set", action="append", metavar="K=V",
                        help="override a config field by dotted path (JSON value)")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed applied to every seed field")
    parser.add_argument("--out", default=None, help="output path or directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marginlab",
                                     description="margin-maximization training laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a full experiment from a config")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint under the config's attacks")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("attack", help="attack a checkpoint, emit per-sample CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=["fgsm", "pgd", "fab"], required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    p.add_argument("--clip-min", dest="clip_min", type=float, default=None)
    p.add_argument("--clip-max", dest="clip_max", type=float, default=None)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("sweep", help="cartesian sweep over dotted config paths")
    _add_common(p)
    p.add_argument("--grid", required=True, help='JSON, e.g. {"train.lr0": [0.1, 0.01]}')
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("ladder", help="run the ablation ladder over seeds")
    _add_common(p)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    p.add_argument("--hinge-lambda", dest="hinge_lambda", type=float, default=25.0)
    p.add_argument("--exp-lambda", dest="exp_lambda", type=float, default=1000.0)
    p.set_defaults(func=_cmd_ladder)

    p = sub.add_parser("oracle-check", help="per-sample margin comparison CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=50)
    p.set_defaults(func=_cmd_oracle_check)

    p = sub.add_parser("plot", help="export decision-region grid CSV and SVG")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=80)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
