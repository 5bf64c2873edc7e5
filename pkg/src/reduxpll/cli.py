"""Command-line entry points: generate, train, sweep-alpha, verify-theory, report.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure. All outputs are byte-identical across repeated invocations with the
same flags; wall-clock timestamps appear only in run manifests. Seeds within
a run may execute in parallel processes, capped by REDUXPLL_THREADS.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data, theory, training
from .errors import (
    AssumptionError,
    ConfigError,
    ContractViolation,
    DataError,
    DimensionError,
    NumericError,
    ParseError,
    ReduxPllError,
    ScenarioError,
    UsageError,
)

DEFAULT_ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_dataset(path_arg: str) -> tuple[data.PllDataset, Path, dict | None]:
    """Accept either a dataset directory (csv + manifest) or a bare csv path."""
    path = Path(path_arg)
    manifest = None
    if path.is_dir():
        csv_path = path / "dataset.csv"
        manifest_path = path / "manifest.json"
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
    else:
        csv_path = path
    if not csv_path.exists():
        raise DataError(f"no dataset at {csv_path}")
    c = manifest.get("c") if manifest else None
    return data.load_csv(csv_path, c=c), csv_path, manifest


def _build_config(args) -> training.TrainConfig:
    """defaults < config file < explicit CLI flags."""
    doc = {}
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        try:
            doc = json.loads(cfg_path.read_text())
        except OSError as exc:
            raise ParseError(f"{cfg_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParseError(f"{cfg_path}: invalid JSON ({exc})") from exc
    for flag, key in (
        ("method", "method"),
        ("alpha", "alpha"),
        ("beta1", "beta1"),
        ("beta2", "beta2"),
        ("beta3", "beta3"),
        ("batch_size", "batch_size"),
        ("epochs", "epochs"),
        ("patience", "patience"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    config = training.TrainConfig.from_dict(doc)
    config.validate()
    return config


def _split_dataset(ds: data.PllDataset, split_seed: int):
    return data.split(ds, data.SplitSpec(seed=split_seed))


def _fit_one_seed(payload):
    """Worker for one seeded run (top level so process pools can pickle it)."""
    ds_parts, config_doc, seed, metrics_path, checkpoint_path = payload
    config = replace(training.TrainConfig.from_dict(config_doc), seed=seed)
    result = training.fit(
        ds_parts,
        config,
        metrics_path=metrics_path,
        checkpoint_path=checkpoint_path,
    )
    return {
        "seed": seed,
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "test_accuracy": result.test_accuracy,
        "epochs_run": len(result.history),
    }


def _run_seeds(ds_parts, config, seeds, out_dir: Path) -> list[dict]:
    payloads = [
        (
            ds_parts,
            config.to_dict(),
            seed,
            str(out_dir / f"metrics_seed{seed}.jsonl"),
            str(out_dir / f"checkpoint_seed{seed}.npz"),
        )
        for seed in seeds
    ]
    threads = int(os.environ.get("REDUXPLL_THREADS", "1"))
    if threads > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(payloads))) as pool:
            return list(pool.map(_fit_one_seed, payloads))
    return [_fit_one_seed(p) for p in payloads]


def _summarize(per_seed: list[dict]) -> dict:
    accs = [r["test_accuracy"] for r in per_seed]
    return {
        "seeds": [r["seed"] for r in per_seed],
        "per_seed": per_seed,
        "mean_test_accuracy": float(np.mean(accs)),
        "std_test_accuracy": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
    }


def _write_run_manifest(out_dir: Path, *, config, dataset_csv, seeds, method) -> None:
    artifacts = {}
    for p in sorted(out_dir.iterdir()):
        if p.name == "run_manifest.json" or not p.is_file():
            continue
        artifacts[p.name] = data.file_checksum(p)
    manifest = {
        "config_hash": config.config_hash(),
        "dataset_checksum": data.file_checksum(dataset_csv),
        "seeds": list(seeds),
        "method": method,
        "output_dir": str(out_dir),
        "created_at": _utc_now(),
        "artifacts": artifacts,
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.n <= 0:
        raise UsageError(f"--n must be positive, got {args.n}")
    if args.c < 3:
        raise UsageError(f"--c must be at least 3, got {args.c}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = data.gen_gaussian_mixture(args.c, args.q, args.n, args.separation, args.seed)
    ds = data.corrupt_instance_dependent(ds, args.ambiguity, args.seed)
    data.validate_dataset(ds, require_posterior=True)
    csv_path = out_dir / "dataset.csv"
    data.save_csv(ds, csv_path)
    data.write_manifest(
        out_dir / "manifest.json", ds, csv_path, ambiguity=args.ambiguity, seed=args.seed
    )
    print(f"wrote {csv_path} (n={ds.n}, c={ds.c}, q={ds.q})")
    return 0


def cmd_train(args) -> int:
    if args.seeds <= 0:
        raise UsageError(f"--seeds must be positive, got {args.seeds}")
    ds, csv_path, _ = _load_dataset(args.dataset)
    config = _build_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = _split_dataset(ds, args.split_seed)
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    per_seed = _run_seeds(parts, config, seeds, out_dir)
    summary = {
        "method": config.method,
        "alpha": config.alpha,
        "config_hash": config.config_hash(),
        **_summarize(per_seed),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    _write_run_manifest(
        out_dir, config=config, dataset_csv=csv_path, seeds=seeds, method=config.method
    )
    print(
        f"{config.method}: test accuracy {summary['mean_test_accuracy']:.4f} "
        f"± {summary['std_test_accuracy']:.4f} over {len(seeds)} seed(s)"
    )
    return 0


def cmd_sweep_alpha(args) -> int:
    if args.seeds <= 0:
        raise UsageError(f"--seeds must be positive, got {args.seeds}")
    alphas = DEFAULT_ALPHA_GRID if args.alphas is None else tuple(args.alphas)
    ds, csv_path, _ = _load_dataset(args.dataset)
    base_config = _build_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = _split_dataset(ds, args.split_seed)
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    rows = []
    for alpha in alphas:
        config = replace(base_config, alpha=alpha)
        alpha_dir = out_dir / f"alpha_{alpha:g}"
        alpha_dir.mkdir(exist_ok=True)
        per_seed = _run_seeds(parts, config, seeds, alpha_dir)
        summary = _summarize(per_seed)
        rows.append(
            {
                "alpha": alpha,
                "mean_test_accuracy": summary["mean_test_accuracy"],
                "std_test_accuracy": summary["std_test_accuracy"],
                "seeds": len(seeds),
            }
        )
    best_idx = int(np.argmax([r["mean_test_accuracy"] for r in rows]))
    sweep_path = out_dir / "sweep.csv"
    with sweep_path.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["alpha", "mean_test_accuracy", "std_test_accuracy", "seeds", "best"],
        )
        writer.writeheader()
        for i, row in enumerate(rows):
            writer.writerow({**row, "best": i == best_idx})
    _write_run_manifest(
        out_dir,
        config=base_config,
        dataset_csv=csv_path,
        seeds=seeds,
        method=base_config.method,
    )
    print(f"wrote {sweep_path}; best alpha {rows[best_idx]['alpha']:g}")
    return 0


def cmd_verify_theory(args) -> int:
    if args.trials <= 0:
        raise UsageError(f"--trials must be positive, got {args.trials}")
    name = args.scenario
    if name in theory.builtin_scenario_names():
        scenario = theory.load_builtin_scenario(name)
    else:
        scenario = theory.TheoryScenario.from_json(name)
    report: dict = {
        "scenario": scenario.name,
        "trials": args.trials,
        "seed": args.seed,
        "theorem1": theory.verify_theorem1(scenario, args.trials, args.seed).to_dict(),
    }
    if scenario.tsybakov is not None:
        report["theorem2"] = theory.verify_theorem2(
            scenario, args.trials, args.seed
        ).to_dict()
    else:
        report["theorem2"] = {"skipped": "scenario carries no Tsybakov constants"}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    t1 = report["theorem1"]
    ok1 = t1["holds"]
    ok2 = report["theorem2"].get("holds", True)
    return 0 if (ok1 and ok2) else 2


def _read_metrics_series(run_dir: Path) -> dict[int, list[dict]]:
    files = sorted(run_dir.glob("metrics_seed*.jsonl"))
    if not files:
        raise DataError(f"no metrics files (metrics_seed*.jsonl) under {run_dir}")
    series = {}
    for path in files:
        seed = int(path.stem.replace("metrics_seed", ""))
        lines = [json.loads(line) for line in path.read_text().splitlines() if line]
        series[seed] = lines
    return series


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    md = ["# Run report", ""]
    for run in args.runs:
        run_dir = Path(run)
        if not run_dir.exists():
            raise DataError(f"run directory {run_dir} does not exist")
        series = _read_metrics_series(run_dir)
        name = run_dir.name
        max_epoch = max(len(v) for v in series.values())
        rows = []
        for e in range(1, max_epoch + 1):
            cons = [
                s[e - 1]["bayes_consistency"]
                for s in series.values()
                if len(s) >= e and s[e - 1]["bayes_consistency"] is not None
            ]
            drift = [s[e - 1]["pseudo_label_drift"] for s in series.values() if len(s) >= e]
            rows.append(
                {
                    "epoch": e,
                    "bayes_consistency": float(np.mean(cons)) if cons else "",
                    "pseudo_label_drift": float(np.mean(drift)) if drift else "",
                }
            )
        series_path = out_dir / f"{name}_series.csv"
        with series_path.open("w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "bayes_consistency", "pseudo_label_drift"]
            )
            writer.writeheader()
            writer.writerows(rows)
        md.append(f"## {name}")
        md.append("")
        summary_path = run_dir / "summary.json"
        if summary_path.exists():
            summary = json.loads(summary_path.read_text())
            md.append(
                f"- method `{summary.get('method', '?')}`: test accuracy "
                f"{summary['mean_test_accuracy']:.4f} ± {summary['std_test_accuracy']:.4f} "
                f"over {len(summary.get('seeds', []))} seed(s)"
            )
        md.append(f"- seeds with logs: {sorted(series)}")
        md.append(f"- per-epoch series: `{series_path.name}`")
        md.append("")
    report_path = out_dir / "report.md"
    report_path.write_text("\n".join(md) + "\n")
    print(f"wrote {report_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--method", choices=training.METHODS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--beta3", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seeds", type=int, default=1, help="number of seeded runs")
    p.add_argument("--seed-base", dest="seed_base", type=int, default=0)
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="reduxpll", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a candidate-label dataset")
    p.add_argument("--c", type=int, default=5, help="number of classes")
    p.add_argument("--q", type=int, default=2, help="feature dimension")
    p.add_argument("--n", type=int, default=2000, help="number of instances")
    p.add_argument("--separation", type=float, default=2.5)
    p.add_argument("--ambiguity", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one method over several seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-alpha", help="summary accuracy per mixing weight")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--alphas",
        type=lambda s: [float(tok) for tok in s.split(",")],
        default=None,
        help="comma-separated grid (default 0.1..0.9)",
    )
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("verify-theory", help="run the consistency verifications")
    p.add_argument("--scenario", required=True, help="scenario JSON path or builtin name")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the report JSON here as well")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("report", help="consolidate run metrics into md + csv series")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (
        DataError,
        ParseError,
        ConfigError,
        ContractViolation,
        DimensionError,
        ScenarioError,
        AssumptionError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ReduxPllError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
