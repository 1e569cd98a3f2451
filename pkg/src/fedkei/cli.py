"""Command-line front end.

Subcommands:
  generate  write a synthetic dataset directory (CSV tasks + manifest)
  run       run one variant over the configured seeds, write reports
  ablate    run all six variants on shared seeds, write the comparison table
  report    re-render a report JSON to CSV

Exit codes: 0 success, 2 config error, 3 runtime divergence.
The ``FEDKEI_SEED`` environment variable overrides the seed list (comma
separated), for CI smoke runs.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .bilevel import BiLevelConfig
from .errors import ConfigError, DivergenceError, FedkeiError
from .federation import ExperimentConfig, run_stream
from .metrics import VARIANTS, significance_marker, welch_t
from .model import ModelConfig
from .tasks import StreamConfig, export_stream, generate_stream

ABLATION_ORDER = ("Rand", "FedAvgInit", "A", "B", "C", "FedKEI")


def _build_section(cls, data: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {name!r} section: {exc}") from exc


def load_config(path) -> dict:
    """Parse the YAML run config into an ExperimentConfig plus run options."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")

    experiment = ExperimentConfig(
        stream=_build_section(StreamConfig, raw.pop("stream", {}), "stream"),
        model=_build_section(ModelConfig, raw.pop("model", {}), "model"),
        bilevel=_build_section(BiLevelConfig, raw.pop("bilevel", {}), "bilevel"),
    )
    run_opts = {
        "variant": raw.pop("variant", "FedKEI"),
        "seeds": list(raw.pop("seeds", [0])),
        "out_dir": raw.pop("out_dir", "runs"),
    }
    exp_fields = {f.name for f in fields(ExperimentConfig)}
    for key in list(raw):
        if key in exp_fields:
            setattr(experiment, key, raw.pop(key))
    if raw:
        raise ConfigError(f"unknown config keys: {sorted(raw)}")

    env_seed = os.environ.get("FEDKEI_SEED")
    if env_seed:
        run_opts["seeds"] = [int(s) for s in env_seed.split(",") if s.strip()]
    if not run_opts["seeds"]:
        raise ConfigError("seed list is empty")
    if run_opts["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {run_opts['variant']!r}")
    experiment.validate()
    return {"experiment": experiment, **run_opts}


def config_to_dict(experiment: ExperimentConfig) -> dict:
    return asdict(experiment)


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_trace_csv(report: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client", "task_time", "epoch", "auc"])
        for task_row in report["per_task"]:
            for client_row in task_row["clients"]:
                for epoch, value in enumerate(client_row["trace"], start=1):
                    writer.writerow([client_row["client"],
                                     client_row["task_time"], epoch, repr(value)])


def write_ledger_csv(report: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client", "task_time", "kind", "direction",
                         "messages", "bytes"])
        for row in report["ledger"]:
            writer.writerow([row["client"], row["task_time"], row["kind"],
                             row["direction"], row["messages"], row["bytes"]])


def _run_one(experiment, variant, seed, out_dir: Path) -> dict:
    report = run_stream(experiment, variant=variant, seed=seed)
    report["config"] = config_to_dict(experiment)
    stem = f"report_{variant}_seed{seed}"
    _write_json(out_dir / f"{stem}.json", report)
    write_trace_csv(report, out_dir / f"{stem}_trace.csv")
    write_ledger_csv(report, out_dir / f"{stem}_ledger.csv")
    return report


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg["out_dir"]) / "dataset"
    stream = generate_stream(replace(cfg["experiment"].stream,
                                     seed=cfg["seeds"][0]))
    export_stream(stream, out)
    print(f"dataset written to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    experiment = cfg["experiment"]
    if args.k is not None:
        experiment.k_clusters = args.k
    variant = args.variant or cfg["variant"]
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg["seeds"]
    out_dir = Path(args.out or cfg["out_dir"])
    for seed in seeds:
        report = _run_one(experiment, variant, seed, out_dir)
        print(f"{variant} seed={seed}: overall AUC {report['overall_auc']:.4f} "
              f"LCA {report['overall_lca']:.4f}")
    return 0


def ablation_table(experiment, seeds) -> list:
    """All six variants on shared seeds: means, stds, increments over the
    predecessor, and Welch p-values against the full method."""
    samples = {}
    for variant in ABLATION_ORDER:
        aucs, lcas = [], []
        for seed in seeds:
            report = run_stream(experiment, variant=variant, seed=seed)
            aucs.append(report["overall_auc"])
            lcas.append(report["overall_lca"])
        samples[variant] = {"auc": aucs, "lca": lcas}

    rows = []
    prev = None
    for variant in ABLATION_ORDER:
        auc_arr = np.asarray(samples[variant]["auc"])
        lca_arr = np.asarray(samples[variant]["lca"])
        row = {
            "variant": variant,
            "auc_mean": float(auc_arr.mean()),
            "auc_std": float(auc_arr.std(ddof=1)) if len(auc_arr) > 1 else 0.0,
            "lca_mean": float(lca_arr.mean()),
            "lca_std": float(lca_arr.std(ddof=1)) if len(lca_arr) > 1 else 0.0,
            "auc_incr": None, "lca_incr": None,
            "p_auc_vs_fedkei": None, "p_lca_vs_fedkei": None, "marker": "",
        }
        if prev is not None:
            row["auc_incr"] = row["auc_mean"] - prev["auc_mean"]
            row["lca_incr"] = row["lca_mean"] - prev["lca_mean"]
        if variant != "FedKEI" and len(seeds) > 1:
            _, p_auc = welch_t(samples["FedKEI"]["auc"], samples[variant]["auc"])
            _, p_lca = welch_t(samples["FedKEI"]["lca"], samples[variant]["lca"])
            row["p_auc_vs_fedkei"] = p_auc
            row["p_lca_vs_fedkei"] = p_lca
            row["marker"] = significance_marker(min(p_auc, p_lca))
        rows.append(row)
        prev = row
    return rows


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    experiment = cfg["experiment"]
    if args.k is not None:
        experiment.k_clusters = args.k
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg["seeds"]
    out_dir = Path(args.out or cfg["out_dir"])
    rows = ablation_table(experiment, seeds)
    payload = {"seeds": seeds, "config": config_to_dict(experiment),
               "table": rows}
    _write_json(out_dir / "ablation.json", payload)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["variant", "auc_mean", "auc_std", "auc_incr", "lca_mean",
                  "lca_std", "lca_incr", "p_auc_vs_fedkei", "p_lca_vs_fedkei",
                  "marker"]
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if row[k] is None else row[k] for k in header])
    for row in rows:
        print(f"{row['variant']:>10}  AUC {row['auc_mean']:.4f}  "
              f"LCA {row['lca_mean']:.4f}  {row['marker']}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.report)
    try:
        with open(path) as fh:
            report = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from exc
    out_dir = Path(args.out or path.parent)
    write_trace_csv(report, out_dir / f"{path.stem}_trace.csv")
    write_ledger_csv(report, out_dir / f"{path.stem}_ledger.csv")
    print(f"rendered {path} to CSV in {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedkei")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write the synthetic dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out")
    p_gen.set_defaults(func=cmd_generate)

    p_run = sub.add_parser("run", help="run one variant over seeds")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out")
    p_run.add_argument("--variant")
    p_run.add_argument("--seeds", help="comma-separated seed list")
    p_run.add_argument("--k", type=int, help="cluster count per part")
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run all variants and compare")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--out")
    p_abl.add_argument("--seeds", help="comma-separated seed list")
    p_abl.add_argument("--k", type=int)
    p_abl.set_defaults(func=cmd_ablate)

    p_rep = sub.add_parser("report", help="re-render a report JSON to CSV")
    p_rep.add_argument("report")
    p_rep.add_argument("--out")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FedkeiError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
