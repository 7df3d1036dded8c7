"""Config-driven experiment orchestration: single runs, the ablation
ladder, hyperparameter sweeps, oracle comparison reports, and plot-data
export.

Experiment configs are JSON with the exact field names of the typed
configs; every result embeds the fully resolved config so a run can be
reproduced bit-exactly from its own result file. Wall-clock timings live
in a sidecar (timing.json), never in result.json.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, robust_accuracy
from .data import Dataset, gen_gaussian_blobs, gen_two_moons, load_cifar10_subset, split
from .margins import (
    MarginEstimate,
    NormSpec,
    batch_logit_margins,
    fab_margins,
    oracle_margin,
    taylor_margins_batch,
)
from .nets import CnnSpec, InitSpec, Network, build_cnn, build_mlp, save_checkpoint
from .training import TrainConfig, train

LADDER_RUNGS = (
    "ce-only",
    "elsayed-hinge",
    "hinge-burnin",
    "exp-burnin",
    "hinge-burnin-fab",
    "hinge-burnin-fab-soft",
    "exp-burnin-fab-soft-implicit",
)

LADDER_COLUMNS = ("rung", "seed", "clean_val", "clean_test", "robust_pgd", "robust_fab",
                  "robust_worst")


class ConfigError(ValueError):
    pass


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


@dataclass
class ExperimentConfig:
    """Typed view of an experiment config file."""

    name: str
    dataset: dict
    net: dict
    train: TrainConfig
    evaluation: list[AttackSpec]
    oracle_check: dict = field(default_factory=lambda: {"enabled": False, "samples": 0})
    split_spec: dict = field(default_factory=lambda: {"fractions": [0.7, 0.15, 0.15], "seed": 0})
    output_dir: str = "runs"

    def __post_init__(self):
        _require(bool(self.name), "experiment name must be non-empty")
        _require(not set(self.name) & set('/\\:*?"<>| '),
                 f"experiment name {self.name!r} is not filesystem-safe")
        _require(self.dataset.get("kind") in ("two-moons", "gaussian-blobs", "cifar10-subset"),
                 f"unknown dataset kind {self.dataset.get('kind')!r}")
        _require(self.net.get("kind") in ("mlp", "cnn"), f"unknown net kind {self.net.get('kind')!r}")
        _require(len(self.evaluation) > 0, "evaluation must list at least one attack")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset,
            "split": self.split_spec,
            "net": self.net,
            "train": self.train.to_dict(),
            "evaluation": [a.to_dict() for a in self.evaluation],
            "oracle_check": self.oracle_check,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        return cls(
            name=d["name"],
            dataset=d["dataset"],
            net=d["net"],
            train=TrainConfig.from_dict(d["train"]),
            evaluation=[AttackSpec.from_dict(a) for a in d["evaluation"]],
            oracle_check=d.get("oracle_check", {"enabled": False, "samples": 0}),
            split_spec=d.get("split", {"fractions": [0.7, 0.15, 0.15], "seed": 0}),
            output_dir=d.get("output_dir", "runs"),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def set_by_path(config_dict: dict, dotted_key: str, value) -> None:
    """Override a nested config entry by dotted path, e.g. train.lr0=0.01."""
    parts = dotted_key.split(".")
    node = config_dict
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        elif part in node:
            node = node[part]
        else:
            raise ConfigError(f"config has no section {part!r} (from {dotted_key!r})")
    leaf = parts[-1]
    if isinstance(node, list):
        node[int(leaf)] = value
    else:
        if leaf not in node:
            raise ConfigError(f"config has no field {dotted_key!r}")
        node[leaf] = value


def parse_override(text: str):
    """k=v with JSON-decoded value (bare words fall back to strings)."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_seed(config_dict: dict, seed: int) -> None:
    """Point every seed field in the config at one master seed."""
    config_dict["dataset"]["seed"] = seed
    config_dict["split"]["seed"] = seed
    if "init" in config_dict["net"]:
        config_dict["net"]["init"]["seed"] = seed
    config_dict["train"]["seed"] = seed
    config_dict["train"]["adv_val"]["seed"] = seed
    for attack in config_dict["evaluation"]:
        attack["seed"] = seed


def build_dataset(spec: dict) -> Dataset:
    kind = spec["kind"]
    if kind == "two-moons":
        return gen_two_moons(spec["n"], spec["noise"], spec["seed"])
    if kind == "gaussian-blobs":
        return gen_gaussian_blobs(spec["k"], spec["n"], spec["centers"], spec["std"], spec["seed"])
    if kind == "cifar10-subset":
        return load_cifar10_subset(spec["path"], spec["n_per_class"], spec["classes"],
                                   flatten=spec.get("flatten", False))
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_net(spec: dict, num_classes: int, input_shape) -> Network:
    init_spec = spec.get("init", {})
    init = InitSpec(scheme=init_spec.get("scheme", "kaiming-uniform"),
                    seed=init_spec.get("seed", 0))
    if spec["kind"] == "mlp":
        sizes = list(spec["layer_sizes"])
        _require(sizes[0] == int(np.prod(input_shape)),
                 f"mlp input size {sizes[0]} does not match data dimension {input_shape}")
        _require(sizes[-1] == num_classes,
                 f"mlp output size {sizes[-1]} does not match {num_classes} classes")
        return build_mlp(sizes, activation=spec.get("activation", "relu"), init=init)
    cnn = CnnSpec(
        input_shape=tuple(spec["input_shape"]),
        channels=tuple(spec["channels"]),
        kernel=spec["kernel"],
        hidden=tuple(spec.get("hidden", ())),
        num_classes=num_classes,
        init=init,
    )
    return build_cnn(cnn)


def _margin_stats(net, dataset: Dataset, norm: NormSpec, oracle_check: dict,
                  fab_steps: int = 20) -> dict:
    """Mean/median/quantiles of FAB (and optionally oracle) margins on
    correctly classified points."""
    phi, _ = batch_logit_margins(net(dataset.inputs).data, dataset.labels)
    correct = np.nonzero(phi > 0)[0]
    limit = int(oracle_check.get("samples") or 64)
    idx = correct[:limit]
    stats: dict = {"n_points": len(idx)}
    if len(idx) == 0:
        return stats
    sub_x, sub_y = dataset.inputs[idx], dataset.labels[idx]
    fab = fab_margins(net, sub_x, sub_y, norm, steps=fab_steps)
    fab_vals = np.array([r.value for r in fab if isinstance(r, MarginEstimate)])
    if len(fab_vals):
        stats["fab"] = _quantile_block(fab_vals)
    if oracle_check.get("enabled") and int(np.prod(dataset.input_shape)) <= 3:
        oracle_vals = []
        for i in range(len(idx)):
            try:
                oracle_vals.append(oracle_margin(net, sub_x[i], int(sub_y[i]), norm).value)
            except Exception:
                continue
        if oracle_vals:
            stats["oracle"] = _quantile_block(np.array(oracle_vals))
    return stats


def _quantile_block(values: np.ndarray) -> dict:
    qs = np.quantile(values, [0.1, 0.25, 0.5, 0.75, 0.9])
    return {
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "q10": float(qs[0]), "q25": float(qs[1]), "q75": float(qs[3]), "q90": float(qs[4]),
        "count": int(len(values)),
    }


def run_experiment(config: ExperimentConfig, base_dir=None) -> dict:
    """Train, select, evaluate, and persist one experiment.

    Writes result.json (deterministic, reproducible bit-exactly), a
    summary.csv row file, timing.json, history.csv, and checkpoints into
    the experiment's own directory. Returns the result dict.
    """
    t_start = time.perf_counter()
    out_root = base_dir if base_dir is not None else config.output_dir
    out_dir = os.path.join(out_root, config.name)
    os.makedirs(out_dir, exist_ok=True)

    dataset = build_dataset(config.dataset)
    tr, va, te = split(dataset, config.split_spec["fractions"], config.split_spec["seed"])
    net = build_net(config.net, dataset.num_classes, dataset.input_shape)

    t_train = time.perf_counter()
    result = train(net, (tr, va), config.train, out_dir=out_dir)
    train_seconds = time.perf_counter() - t_train
    best = result.best_checkpoint

    clean_test = float(
        (batch_logit_margins(best(te.inputs).data, te.labels)[0] > 0).mean()
    )
    per_attack = {}
    for spec in config.evaluation:
        per_attack[spec.label()] = robust_accuracy(best, te, [spec])
    robust_worst = robust_accuracy(best, te, config.evaluation)

    stats = _margin_stats(best, te, config.train.loss.norm, config.oracle_check,
                          fab_steps=config.train.loss.fab_steps)

    report = {
        "config": config.to_dict(),
        "train_summary": {
            "best_epoch": result.best_epoch,
            "stopped_reason": result.stopped_reason,
            "epochs_run": len(result.history),
            "best_robust_val_acc": result.history[result.best_epoch].robust_val_acc,
            "final_robust_val_acc": result.history[-1].robust_val_acc,
            "final_clean_val_acc": result.history[-1].clean_val_acc,
        },
        "clean_test_acc": clean_test,
        "robust_test_acc": per_attack,
        "robust_worst_acc": robust_worst,
        "margin_stats": stats,
    }
    with open(os.path.join(out_dir, "result.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "timing.json"), "w") as fh:
        json.dump({"train_seconds": train_seconds,
                   "total_seconds": time.perf_counter() - t_start}, fh, indent=2)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "clean_test", "robust_worst", "best_epoch"])
        writer.writerow([config.name, clean_test, robust_worst, result.best_epoch])
    save_checkpoint(best, os.path.join(out_dir, "best.ckpt"))
    return report


# ----------------------------------------------------------------------
# the ablation ladder
# ----------------------------------------------------------------------


def _rung_config(base: dict, rung: str, seed: int, burn_in: int,
                 hinge_lambda: float, exp_lambda: float) -> dict:
    cfg = json.loads(json.dumps(base))  # deep copy
    apply_seed(cfg, seed)
    cfg["name"] = f"{base['name']}-{rung}-s{seed}"
    loss = cfg["train"]["loss"]
    cfg["train"]["burn_in_epochs"] = 0
    loss["use_margin_param_gradient"] = False
    loss["margin_source"] = "taylor"
    if rung == "ce-only":
        loss["variant"] = "ce-only"
    elif rung == "elsayed-hinge":
        loss["variant"] = "elsayed-hinge"
        loss["lambda"] = hinge_lambda
    elif rung == "hinge-burnin":
        loss["variant"] = "elsayed-hinge"
        loss["lambda"] = hinge_lambda
        cfg["train"]["burn_in_epochs"] = burn_in
    elif rung == "exp-burnin":
        loss["variant"] = "exp-loss"
        loss["lambda"] = exp_lambda
        cfg["train"]["burn_in_epochs"] = burn_in
    elif rung == "hinge-burnin-fab":
        loss["variant"] = "elsayed-hinge"
        loss["lambda"] = hinge_lambda
        loss["margin_source"] = "fab"
        cfg["train"]["burn_in_epochs"] = burn_in
    elif rung == "hinge-burnin-fab-soft":
        loss["variant"] = "elsayed-hinge"
        loss["lambda"] = hinge_lambda
        loss["margin_source"] = "fab-soft"
        cfg["train"]["burn_in_epochs"] = burn_in
    elif rung == "exp-burnin-fab-soft-implicit":
        loss["variant"] = "exp-loss"
        loss["lambda"] = exp_lambda
        loss["margin_source"] = "fab-soft"
        loss["use_margin_param_gradient"] = True
        cfg["train"]["burn_in_epochs"] = burn_in
    else:
        raise ConfigError(f"unknown ladder rung {rung!r}")
    return cfg


def run_ladder(base_config: ExperimentConfig, seeds: list[int], base_dir=None,
               burn_in: int | None = None, hinge_lambda: float = 25.0,
               exp_lambda: float = 1000.0) -> dict:
    """The six-component ablation (fab and fab-soft as separate rows).

    Returns {"rows": [...], "medians": {...}, "monotonicity": {...}}; rows
    carry exactly the columns rung, seed, clean_val, clean_test, robust_pgd,
    robust_fab, robust_worst. The monotonicity block checks, on medians
    over the seeds, that the hinge rung beats ce-only and burn-in does not
    hurt; with 5+ seeds a violation is an error for CI to fail on.
    """
    if not seeds:
        raise ConfigError("run_ladder: seeds must be non-empty")
    base = base_config.to_dict()
    if burn_in is None:
        burn_in = max(1, base["train"]["epochs"] // 4)
    rows = []
    failures = []
    for rung in LADDER_RUNGS:
        for seed in seeds:
            cfg_dict = _rung_config(base, rung, seed, burn_in, hinge_lambda, exp_lambda)
            cfg = ExperimentConfig.from_dict(cfg_dict)
            try:
                report = run_experiment(cfg, base_dir=base_dir)
            except Exception as exc:  # rung failures recorded, table completes
                failures.append({"rung": rung, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
                rows.append({"rung": rung, "seed": seed, "clean_val": None, "clean_test": None,
                             "robust_pgd": None, "robust_fab": None, "robust_worst": None})
                continue
            attacks = report["robust_test_acc"]
            pgd_acc = next((v for k, v in attacks.items() if k.startswith("pgd")), None)
            fab_acc = next((v for k, v in attacks.items() if k.startswith("fab")), None)
            rows.append({
                "rung": rung, "seed": seed,
                "clean_val": report["train_summary"]["final_clean_val_acc"],
                "clean_test": report["clean_test_acc"],
                "robust_pgd": pgd_acc, "robust_fab": fab_acc,
                "robust_worst": report["robust_worst_acc"],
            })

    medians = {}
    for rung in LADDER_RUNGS:
        vals = [r["robust_worst"] for r in rows if r["rung"] == rung and r["robust_worst"] is not None]
        clean = [r["clean_test"] for r in rows if r["rung"] == rung and r["clean_test"] is not None]
        medians[rung] = {
            "robust_worst": float(np.median(vals)) if vals else None,
            "clean_test": float(np.median(clean)) if clean else None,
        }
    checks = {}
    m = medians
    if m["ce-only"]["robust_worst"] is not None and m["elsayed-hinge"]["robust_worst"] is not None:
        checks["hinge_beats_baseline"] = m["elsayed-hinge"]["robust_worst"] > m["ce-only"]["robust_worst"]
    if m["elsayed-hinge"]["robust_worst"] is not None and m["hinge-burnin"]["robust_worst"] is not None:
        checks["burnin_not_worse"] = m["hinge-burnin"]["robust_worst"] >= m["elsayed-hinge"]["robust_worst"]
    return {"rows": rows, "medians": medians, "monotonicity": checks, "failures": failures,
            "enforced": len(seeds) >= 5}


def write_ladder_csv(ladder: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LADDER_COLUMNS)
        for row in ladder["rows"]:
            writer.writerow([row[c] for c in LADDER_COLUMNS])


# ----------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------


def _run_sweep_entry(args):
    cfg_dict, base_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    report = run_experiment(cfg, base_dir=base_dir)
    return {
        "name": cfg.name,
        "clean_test": report["clean_test_acc"],
        "robust_worst": report["robust_worst_acc"],
        "config": cfg_dict,
    }


def sweep(base_config: ExperimentConfig, grid: dict, base_dir=None, workers: int = 1) -> dict:
    """Cartesian product over dotted-path config entries.

    Every grid key must name an existing config field (validated before any
    run). Returns the per-run summary sorted by worst-case robust accuracy,
    plus the best-clean and best-robust entries.
    """
    if not grid:
        raise ConfigError("sweep: grid must be non-empty")
    base = base_config.to_dict()
    for key, values in grid.items():
        if not values:
            raise ConfigError(f"sweep: grid for {key!r} is empty")
        probe = json.loads(json.dumps(base))
        set_by_path(probe, key, values[0])  # raises ConfigError on bad keys

    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    entries = []
    for combo in combos:
        cfg_dict = json.loads(json.dumps(base))
        suffix = []
        for key, value in zip(keys, combo):
            set_by_path(cfg_dict, key, value)
            suffix.append(f"{key.split('.')[-1]}{value}")
        cfg_dict["name"] = f"{base['name']}-" + "-".join(suffix).replace("/", "")
        entries.append((cfg_dict, base_dir))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_sweep_entry, entries))
    else:
        results = [_run_sweep_entry(e) for e in entries]

    ranked = sorted(results, key=lambda r: r["robust_worst"], reverse=True)
    best_clean = max(results, key=lambda r: r["clean_test"])
    return {"runs": ranked, "best_robust": ranked[0], "best_clean": best_clean}


# ----------------------------------------------------------------------
# oracle report and plot export
# ----------------------------------------------------------------------

ORACLE_COLUMNS = ("index", "y", "phi", "R_taylor", "R_fab", "R_fab_soft", "R_oracle")


def oracle_report(net: Network, dataset: Dataset, n: int, norm: NormSpec = NormSpec(),
                  beta: float = 5.0, fab_steps: int = 20, path=None) -> list[dict]:
    """Per-sample margin comparison rows plus a median-absolute-error summary.

    Rows: index, y, phi, R_taylor, R_fab, R_fab_soft, R_oracle. Requires
    input dimension <= 3 (the oracle refuses above that).
    """
    dim = int(np.prod(dataset.input_shape))
    if dim > 3:
        raise ValueError(f"oracle_report: input dimension {dim} > 3")
    rows = []
    if n > 0:
        sub_x = dataset.inputs[:n]
        sub_y = dataset.labels[:n]
        phi, _ = batch_logit_margins(net(sub_x).data, sub_y)
        taylor_vals, _, _, _, degenerate = taylor_margins_batch(net, sub_x, sub_y, norm)
        fab = fab_margins(net, sub_x, sub_y, norm, steps=fab_steps)
        fab_soft = fab_margins(net, sub_x, sub_y, norm, steps=fab_steps, use_soft=True, beta=beta)
        for i in range(len(sub_x)):
            try:
                o_val = oracle_margin(net, sub_x[i], int(sub_y[i]), norm).value
            except Exception:
                o_val = None
            rows.append({
                "index": i,
                "y": int(sub_y[i]),
                "phi": float(phi[i]),
                "R_taylor": None if degenerate[i] else float(taylor_vals[i]),
                "R_fab": fab[i].value if isinstance(fab[i], MarginEstimate) else None,
                "R_fab_soft": fab_soft[i].value if isinstance(fab_soft[i], MarginEstimate) else None,
                "R_oracle": o_val,
            })
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ORACLE_COLUMNS)
            for row in rows:
                writer.writerow([row[c] for c in ORACLE_COLUMNS])
            summary = oracle_report_summary(rows)
            if summary:
                writer.writerow(["median_abs_err", "", "",
                                 summary.get("taylor"), summary.get("fab"),
                                 summary.get("fab_soft"), 0.0])
    return rows


def oracle_report_summary(rows: list[dict]) -> dict:
    """Median |estimate - oracle| per estimator over rows with an oracle value."""
    out = {}
    for key, col in (("taylor", "R_taylor"), ("fab", "R_fab"), ("fab_soft", "R_fab_soft")):
        errs = [abs(r[col] - r["R_oracle"]) for r in rows
                if r[col] is not None and r["R_oracle"] is not None]
        if errs:
            out[key] = float(np.median(errs))
    return out


def export_plot_data(net: Network, dataset: Dataset, grid_resolution: int, out_prefix,
                     epsilon: float = 0.1, n_balls: int = 12) -> tuple[str, str]:
    """Grid CSV of the logit margin over a bounding box plus an SVG of the
    decision regions, data points, and epsilon-balls; 2-d datasets only."""
    if dataset.inputs.shape[1:] != (2,):
        raise ValueError("export_plot_data: dataset must be 2-d")
    if grid_resolution < 2:
        raise ValueError("export_plot_data: grid_resolution must be >= 2")
    lo = dataset.inputs.min(axis=0) - 0.3
    hi = dataset.inputs.max(axis=0) + 0.3
    xs = np.linspace(lo[0], hi[0], grid_resolution)
    ys = np.linspace(lo[1], hi[1], grid_resolution)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    logits = net(pts).data
    preds = np.argmax(logits, axis=1)
    # phi relative to class 0: positive in the class-0 region, negative
    # elsewhere, zero exactly on its boundary (the full boundary for K=2)
    phi0, _ = batch_logit_margins(logits, np.zeros(len(pts), dtype=np.int64))

    csv_path = f"{out_prefix}_grid.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x0", "x1", "pred", "phi"])
        for p, c, v in zip(pts, preds, phi0):
            writer.writerow([repr(p[0]), repr(p[1]), int(c), repr(float(v))])

    svg_path = f"{out_prefix}.svg"
    _write_boundary_svg(svg_path, xs, ys, preds.reshape(grid_resolution, grid_resolution),
                        dataset, epsilon, n_balls)
    return csv_path, svg_path


_CLASS_COLORS = ("#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5",
                 "#c49c94", "#f7b6d2", "#dbdb8d", "#9edae5", "#c7c7c7")
_POINT_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                 "#8c564b", "#e377c2", "#bcbd22", "#17becf", "#7f7f7f")


def _write_boundary_svg(path, xs, ys, pred_grid, dataset: Dataset, epsilon, n_balls):
    width, height = 640, 640
    x0, x1 = xs[0], xs[-1]
    y0, y1 = ys[0], ys[-1]

    def to_px(px, py):
        return ((px - x0) / (x1 - x0) * width,
                height - (py - y0) / (y1 - y0) * height)

    cell_w = width / (len(xs) - 1)
    cell_h = height / (len(ys) - 1)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            cls = int(pred_grid[i, j])
            px, py = to_px(xs[i], ys[j + 1])
            parts.append(
                f'<rect x="{px:.2f}" y="{py:.2f}" width="{cell_w + 0.5:.2f}" '
                f'height="{cell_h + 0.5:.2f}" fill="{_CLASS_COLORS[cls % 10]}"/>'
            )
    # boundary segments: edges between grid cells whose predictions differ
    for i in range(len(xs) - 1):
        for j in range(len(ys)):
            if j < len(ys) - 1 and pred_grid[i, j] != pred_grid[i + 1, j]:
                ax, ay = to_px((xs[i] + xs[i + 1]) / 2, ys[j])
                bx, by = to_px((xs[i] + xs[i + 1]) / 2, ys[min(j + 1, len(ys) - 1)])
                parts.append(f'<line x1="{ax:.2f}" y1="{ay:.2f}" x2="{bx:.2f}" y2="{by:.2f}" '
                             'stroke="black" stroke-width="1.5"/>')
    for j in range(len(ys) - 1):
        for i in range(len(xs)):
            if i < len(xs) - 1 and pred_grid[i, j] != pred_grid[i, j + 1]:
                ax, ay = to_px(xs[i], (ys[j] + ys[j + 1]) / 2)
                bx, by = to_px(xs[min(i + 1, len(xs) - 1)], (ys[j] + ys[j + 1]) / 2)
                parts.append(f'<line x1="{ax:.2f}" y1="{ay:.2f}" x2="{bx:.2f}" y2="{by:.2f}" '
                             'stroke="black" stroke-width="1.5"/>')
    # epsilon-balls (linf: squares) around the first test points
    scale_x = width / (x1 - x0)
    scale_y = height / (y1 - y0)
    for i in range(min(n_balls, len(dataset))):
        cx, cy = dataset.inputs[i]
        px, py = to_px(cx - epsilon, cy + epsilon)
        parts.append(
            f'<rect x="{px:.2f}" y="{py:.2f}" width="{2 * epsilon * scale_x:.2f}" '
            f'height="{2 * epsilon * scale_y:.2f}" fill="none" stroke="#444444" '
            'stroke-width="1" stroke-dasharray="4 3"/>'
        )
    for point, label in zip(dataset.inputs, dataset.labels):
        px, py = to_px(point[0], point[1])
        parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" '
                     f'fill="{_POINT_COLORS[int(label) % 10]}" stroke="black" stroke-width="0.5"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
