"""Command-line harness: data generation, training, evaluation, theory
checks, benchmark grids, and plot emission.

Commands: generate, train, evaluate, benchmark, orthocheck, plot.
Config precedence: CLI flag > config file > built-in defaults. The env var
``CDPO_LAB_OUT`` overrides the default output root. One self-describing
JSON record is written per run; completed benchmark cells are skipped on
rerun (records are append-only, written via temp-file rename).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .data import (
    MoonsConfig,
    PODataset,
    generate_moons_dataset,
    load_tabular_dataset,
    save_tabular_dataset,
)
from .losses import LossKind
from .metrics import aggregate_runs, avg_log_prob, evaluate_w2
from .orthocheck import run_theory_suite
from .train import default_train_config, train_two_stage

DEFAULT_OUT = "runs"


def output_root(flag_value: Optional[str]) -> Path:
    if flag_value:
        return Path(flag_value)
    return Path(os.environ.get("CDPO_LAB_OUT", DEFAULT_OUT))


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise SystemExit(f"config file {path} must hold a mapping")
    return cfg


def _moons_config(ds_cfg: dict, seed: int) -> MoonsConfig:
    fields = {f.name for f in dataclasses.fields(MoonsConfig)}
    kwargs = {k: v for k, v in ds_cfg.items() if k in fields}
    for key in ("angle_params", "propensity_params"):
        if key in kwargs and kwargs[key] is not None:
            val = kwargs[key]
            kwargs[key] = tuple(tuple(x) if isinstance(x, (list, tuple)) else x for x in val)
    kwargs.setdefault("seed", seed)
    return MoonsConfig(**kwargs)


def _datasets(ds_cfg: dict, seed: int) -> tuple[PODataset, PODataset]:
    kind = ds_cfg.get("kind", "moons")
    if kind == "moons":
        return generate_moons_dataset(_moons_config(ds_cfg, seed))
    if kind == "file":
        train = load_tabular_dataset(ds_cfg["train_path"])
        test = load_tabular_dataset(ds_cfg["test_path"])
        return train, test
    raise SystemExit(f"unknown dataset kind {kind!r}")


def _train_config(train_cfg: dict, family: str, seed: int, restriction: str):
    cfg = default_train_config(
        family,
        seed=seed,
        epochs=int(train_cfg.get("epochs", 100)),
        restriction=restriction,
        clip_floor=float(train_cfg.get("clip_floor", 0.1)),
    )
    overrides = {}
    for key in ("stage2_lr", "stage2_batch_size", "stage2_epochs", "ema_lambda", "n_mc",
                "stage2_optimizer", "cross_fitting"):
        if key in train_cfg:
            overrides[key] = train_cfg[key]
    if "target_arch" in train_cfg:
        overrides["target_arch"] = dataclasses.replace(
            cfg.target_arch, **train_cfg["target_arch"]
        )
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    stage1_over = dict(train_cfg.get("stage1", {}))
    if stage1_over:
        arch_over = stage1_over.pop("arch", None)
        stage1 = dataclasses.replace(cfg.stage1, **stage1_over)
        if arch_over:
            stage1 = dataclasses.replace(stage1, arch=dataclasses.replace(stage1.arch, **arch_over))
        cfg = dataclasses.replace(cfg, stage1=stage1)
    return cfg


def _cell_id(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _write_record(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(record, fh, indent=2, default=str)
    os.replace(tmp, path)


def run_experiment_cell(cell: dict) -> dict:
    """Train and evaluate one (learner, family, seed) cell; returns the
    run record (with an error payload instead of results on failure)."""
    import torch

    threads = int(cell.get("torch_threads", 1))
    if threads > 0:
        torch.set_num_threads(threads)
    t0 = time.time()
    record = {
        "experiment_id": cell["experiment_id"],
        "version": __version__,
        "config": cell,
        "learner": cell["learner"],
        "family": cell["family"],
        "seed": cell["seed"],
        "n_train": cell["dataset"].get("n_train"),
    }
    try:
        train_ds, test_ds = _datasets(cell["dataset"], cell["seed"])
        cfg = _train_config(cell.get("train", {}), cell["family"], cell["seed"],
                            cell.get("restriction", "full"))
        result = train_two_stage(train_ds, LossKind.parse(cell["learner"]), cell["family"], cfg)
        eval_cfg = cell.get("eval", {})
        metric = eval_cfg.get("metric", "w2")
        per_arm = {}
        for a in (0, 1):
            if metric == "w2":
                r = evaluate_w2(
                    result.target,
                    test_ds,
                    a,
                    p=int(eval_cfg.get("p", 200)),
                    n_eval_points=eval_cfg.get("n_eval_points"),
                    seed=cell["seed"],
                )
            elif metric == "log_prob":
                r = avg_log_prob(result.target, test_ds, a)
            else:
                raise ValueError(f"unknown metric {metric!r}")
            per_arm[str(a)] = {
                "center": r.center,
                "spread": r.spread,
                "convention": r.convention,
                "n_nonfinite": r.n_nonfinite,
                "values_mean": float(np.nanmean(r.values)),
            }
        record["metric"] = metric
        record["results"] = per_arm
        record["score"] = float(np.mean([per_arm[k]["center"] for k in per_arm]))
        if cell.get("checkpoint_dir"):
            from .genmodels.checkpoints import save_checkpoint

            ckpt = Path(cell["checkpoint_dir"]) / f"{cell['experiment_id']}.npz"
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(result.target, ckpt, ema_params=result.ema_params)
            record["checkpoint"] = str(ckpt)
    except Exception as exc:  # cell isolation: record the failure, keep the grid going
        record["error"] = f"{type(exc).__name__}: {exc}"
    record["wall_clock_s"] = time.time() - t0
    return record


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    ds_cfg = cfg.get("dataset", cfg)
    seed = args.seed if args.seed is not None else int(ds_cfg.get("seed", 0))
    train, test = _datasets(ds_cfg, seed)
    out = output_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tabular_dataset(train, out / "train.csv")
    save_tabular_dataset(test, out / "test.csv")
    print(f"wrote {out / 'train.csv'} ({train.n} rows) and {out / 'test.csv'} ({test.n} rows)")
    return 0


def _single_cell_from_args(args) -> dict:
    cfg = _load_config(args.config)
    cell = {
        "dataset": cfg.get("dataset", {"kind": "moons"}),
        "train": cfg.get("train", {}),
        "eval": cfg.get("eval", {}),
        "learner": args.learner or cfg.get("learner", "gdr"),
        "family": args.family or cfg.get("family", "cnf"),
        "restriction": args.restriction or cfg.get("restriction", "full"),
        "seed": args.seed if args.seed is not None else int(cfg.get("seed", 0)),
    }
    cell["experiment_id"] = _cell_id(cell)
    return cell


def cmd_train(args) -> int:
    cell = _single_cell_from_args(args)
    out = output_root(args.out)
    cell["checkpoint_dir"] = str(out / "checkpoints")
    cell["torch_threads"] = 0  # single run: use default threading
    record = run_experiment_cell(cell)
    _write_record(out / f"{cell['experiment_id']}.json", record)
    keys = {"experiment_id", "learner", "family", "seed"} | (record.keys() & {"score", "error"})
    print(json.dumps({k: record[k] for k in sorted(keys)}, indent=2))
    return 0 if "error" not in record else 1


def cmd_evaluate(args) -> int:
    from .errors import CapabilityError
    from .genmodels.checkpoints import load_checkpoint

    cfg = _load_config(args.config)
    model, meta, _ = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    _, test_ds = _datasets(cfg.get("dataset", {"kind": "moons"}), seed)
    eval_cfg = cfg.get("eval", {})
    metric = args.metric or eval_cfg.get("metric", "w2")
    out = {"checkpoint": args.checkpoint, "metric": metric, "family": meta["family"]}
    try:
        for a in (0, 1):
            if metric == "w2":
                r = evaluate_w2(model, test_ds, a, p=int(eval_cfg.get("p", 200)),
                                n_eval_points=eval_cfg.get("n_eval_points"), seed=seed)
            else:
                r = avg_log_prob(model, test_ds, a)
            out[f"arm_{a}"] = {"center": r.center, "spread": r.spread}
    except CapabilityError as exc:
        print(f"CapabilityError: {exc}", file=sys.stderr)
        return 1
    path = output_root(args.out) / "evaluation.json"
    _write_record(path, out)
    print(json.dumps(out, indent=2))
    return 0


def cmd_benchmark(args) -> int:
    cfg = _load_config(args.config)
    learners = cfg.get("learners", ["plugin", "ra", "iptw", "gdr"])
    families = cfg.get("families", ["cnf", "cgan", "cvae", "cdm"])
    seeds = cfg.get("seeds", list(range(20)))
    n_trains = cfg.get("n_train_grid") or [cfg.get("dataset", {}).get("n_train", 4000)]
    out = output_root(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cells = []
    for n_train in n_trains:
        for learner in learners:
            for family in families:
                for seed in seeds:
                    dataset = dict(cfg.get("dataset", {"kind": "moons"}))
                    dataset["n_train"] = n_train
                    cell = {
                        "dataset": dataset,
                        "train": cfg.get("train", {}),
                        "eval": cfg.get("eval", {}),
                        "learner": learner,
                        "family": family,
                        "restriction": cfg.get("restriction", "full"),
                        "seed": int(seed),
                    }
                    cell["experiment_id"] = _cell_id(cell)
                    cells.append(cell)

    pending = [c for c in cells if not (out / f"{c['experiment_id']}.json").exists()]
    print(f"benchmark grid: {len(cells)} cells, {len(cells) - len(pending)} already done")
    failures = 0
    if args.jobs > 1 and pending:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for record in pool.map(run_experiment_cell, pending):
                _write_record(out / f"{record['experiment_id']}.json", record)
                failures += 1 if "error" in record else 0
                _progress_line(record)
    else:
        for cell in pending:
            record = run_experiment_cell(cell)
            _write_record(out / f"{record['experiment_id']}.json", record)
            failures += 1 if "error" in record else 0
            _progress_line(record)
    print(f"completed {len(pending)} cells with {failures} failures")
    return 0 if failures == 0 else 1


def _progress_line(record: dict) -> None:
    status = "ERR " if "error" in record else "ok  "
    score = record.get("score")
    score_str = f"{score:.4f}" if isinstance(score, float) else "-"
    print(
        f"{status} {record['learner']:>6}/{record['family']} seed={record['seed']} "
        f"n={record.get('n_train')} score={score_str} ({record['wall_clock_s']:.1f}s)"
    )


def cmd_orthocheck(args) -> int:
    report = run_theory_suite(
        seed=args.seed if args.seed is not None else 0,
        gdr_correction_sign=-1.0 if args.inject_gdr_sign_error else 1.0,
    )
    out = output_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "orthocheck_report.json"
    _write_record(path, report.as_dict())
    for check in report.checks:
        print(f"{'PASS' if check.passed else 'FAIL'}  {check.name}: "
              f"value={check.value:.3e} tolerance={check.tolerance:.3e}")
    print(f"report written to {path}")
    return 0 if report.passed else 1


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results_dir = Path(args.results_dir)
    records = []
    for path in sorted(results_dir.glob("*.json")):
        with open(path) as fh:
            rec = json.load(fh)
        if "results" in rec:
            records.append(rec)
        elif "error" in rec:
            print(f"skipping failed record {path.name}: {rec['error']}")
        else:
            print(f"record {path.name} is missing metric fields")
    if not records:
        print("no results found", file=sys.stderr)
        return 1

    out = output_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    families = sorted({r["family"] for r in records})
    written = []
    for family in families:
        fam = [r for r in records if r["family"] == family]
        learners = sorted({r["learner"] for r in fam})
        n_grid = sorted({r["n_train"] for r in fam if r.get("n_train") is not None})
        fig, ax = plt.subplots(figsize=(6, 4))
        for learner in learners:
            centers, errs = [], []
            for n in n_grid:
                scores = [r["score"] for r in fam if r["learner"] == learner and r["n_train"] == n]
                c, se = aggregate_runs(scores, "mean_se")
                centers.append(c)
                errs.append(se)
            ax.errorbar(n_grid, centers, yerr=errs, marker="o", capsize=3, label=learner)
        ax.set_xlabel("training samples")
        ax.set_ylabel(records[0].get("metric", "score"))
        ax.set_title(family)
        ax.legend()
        fig.tight_layout()
        path = out / f"benchmark_{family}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    scaling = results_dir / "orthocheck_report.json"
    if scaling.exists():
        with open(scaling) as fh:
            rep = json.load(fh)
        slopes = {c["name"]: c["value"] for c in rep.get("checks", [])
                  if c["name"].endswith("remainder_slope")}
        if slopes:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.bar(range(len(slopes)), list(slopes.values()))
            ax.set_xticks(range(len(slopes)), [k.replace("_remainder_slope", "") for k in slopes])
            ax.set_ylabel("log-log slope of squared optimizer drift")
            fig.tight_layout()
            path = out / "remainder_scaling.png"
            fig.savefig(path, dpi=150)
            plt.close(fig)
            written.append(path)

    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="cdpo-lab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory (default: $CDPO_LAB_OUT or ./runs)")

    p = sub.add_parser("generate", help="generate a dataset and write tabular files")
    add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one learner/family cell")
    add_common(p)
    p.add_argument("--learner", choices=[k.value for k in LossKind])
    p.add_argument("--family", choices=["cnf", "cgan", "cvae", "cdm"])
    p.add_argument("--restriction", choices=["full", "linear"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=["w2", "log_prob"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="run the learner x family x seed grid")
    add_common(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("orthocheck", help="run the exact theory-verification bench")
    add_common(p)
    p.add_argument("--inject-gdr-sign-error", action="store_true",
                   help=argparse.SUPPRESS)  # mutation-detection test hook
    p.set_defaults(func=cmd_orthocheck)

    p = sub.add_parser("plot", help="emit figures from a results directory")
    p.add_argument("results_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
