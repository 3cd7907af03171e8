"""Command line entry point.

Subcommands::

    fedmn run [CONFIG] [--method M] [--arch A] [--rounds T] [--seed S] [--set key=value ...]
    fedmn compare RUN_DIR RUN_DIR [...] [--csv PATH]
    fedmn decisions-report RUN_DIR [--json PATH]
    fedmn validate-config [CONFIG] [--set key=value ...]

Relative output directories are resolved against ``$FEDMN_OUTPUT_ROOT`` when it
is set.  Settings are applied in the order defaults < config file < flags.

Exit codes:

    0  success
    1  unexpected internal error
    2  invalid arguments or configuration
    3  data could not be read or parsed
    4  metrics file missing, corrupt or truncated
    5  run has the wrong method for the requested report
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, coerce
from .errors import ConfigError, DataError, FedMNError, MetricsError
from .federation import run_training
from .metrics import METRICS_FILE, MetricsWriter, read_metrics

log = logging.getLogger("fedmn")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_METRICS, EXIT_WRONG_RUN = 0, 1, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "FEDMN_OUTPUT_ROOT"

_FLAG_KEYS = {"method": "method", "arch": "architecture", "rounds": "rounds", "seed": "seed",
              "output_dir": "output_dir", "lr": "learning_rate", "epochs": "local_epochs"}


class UsageError(FedMNError):
    pass


class WrongRunError(FedMNError):
    pass


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = coerce(value)
    return out


def build_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = _parse_sets(args.set)
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return config.with_overrides(overrides) if overrides else config


def resolve_output(path: str) -> Path:
    out = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def hamming_matrix(bits: list) -> np.ndarray:
    arr = np.array([[int(b) for b in s] for s in bits], dtype=np.int64)
    return (arr[:, None, :] != arr[None, :, :]).sum(axis=2)


def cluster_hamming(H: np.ndarray, clusters) -> tuple:
    """Mean within- and between-cluster distances (off-diagonal pairs only)."""
    cl = np.asarray(clusters)
    same = cl[:, None] == cl[None, :]
    off = ~np.eye(len(cl), dtype=bool)
    within = H[same & off]
    between = H[~same]
    return (float(within.mean()) if within.size else float("nan"),
            float(between.mean()) if between.size else float("nan"))


# ---------------------------------------------------------------- run

def execute(config: ExperimentConfig, out_dir: Path, quiet: bool = False):
    """Train, streaming metrics into ``out_dir``; returns the TrainingResult."""
    from .federation import load_dataset

    config.validate()
    dataset = load_dataset(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.yaml")
    with MetricsWriter(out_dir / METRICS_FILE) as writer:
        # the output location is not part of the experiment, so it stays out of the file
        experiment = {k: v for k, v in config.to_dict().items() if k != "output_dir"}
        writer.header(config.method, experiment,
                      {"num_clients": dataset.num_clients, "cluster_labels": dataset.cluster_labels})

        def on_round(m):
            writer.round(m)
            if not quiet:
                log.info("round %d loss %.4f acc %.4f sent %d", m.round, m.global_loss,
                         m.mean_accuracy, m.cumulative_params)

        result = run_training(config, dataset, on_round=on_round)
        final = result.metrics[-1]
        writer.summary({
            "method": result.method,
            "rounds": config.rounds,
            "final_mean_accuracy": final.mean_accuracy,
            "final_median_accuracy": final.median_accuracy,
            "initial_loss": result.initial_loss,
            "final_loss": final.global_loss,
            "total_transmitted": result.ledger.total(),
            "uploaded": result.ledger.total("up"),
            "downloaded": result.ledger.total("down"),
            "pretrain_transmitted": result.ledger.total(phase="pretrain"),
            "decisions": final.decisions,
        })
    if result.global_pool is not None:
        result.global_pool.save(out_dir / "checkpoint.npz")
    return result


def cmd_run(args) -> int:
    config = build_config(args)
    out_dir = resolve_output(config.output_dir)
    result = execute(config, out_dir, quiet=args.quiet)
    final = result.metrics[-1]
    print(f"{config.method}: mean accuracy {final.mean_accuracy:.4f}, "
          f"transmitted {result.ledger.total()} parameters -> {out_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    config = build_config(args)
    problems = config.problems()
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_CONFIG
    print(config.dumps(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- compare

COMPARE_COLUMNS = ("run", "method", "rounds", "mean_accuracy", "median_accuracy", "cumulative_params")


def compare_rows(run_dirs) -> list:
    rows = []
    for d in run_dirs:
        rec = read_metrics(d)
        last = rec.final
        rows.append({"run": str(d), "method": rec.method, "rounds": last["round"],
                     "mean_accuracy": last["mean_accuracy"],
                     "median_accuracy": last["median_accuracy"],
                     "cumulative_params": last["cumulative_params"]})
    return sorted(rows, key=lambda r: (r["cumulative_params"], r["run"]))


def format_table(rows: list) -> str:
    cells = [list(COMPARE_COLUMNS)]
    for r in rows:
        cells.append([r["run"], r["method"], str(r["rounds"]), f"{r['mean_accuracy']:.4f}",
                      f"{r['median_accuracy']:.4f}", str(r["cumulative_params"])])
    widths = [max(len(row[i]) for row in cells) for i in range(len(COMPARE_COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise UsageError("compare needs at least two run directories")
    rows = compare_rows(args.runs)
    sys.stdout.write(format_table(rows))
    if args.csv:
        Path(args.csv).write_text(rows_to_csv(rows), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- decisions

def decisions_report(run_dir) -> dict:
    rec = read_metrics(run_dir)
    if rec.method != "fedmn":
        raise WrongRunError(f"{run_dir}: decisions report needs a fedmn run, got {rec.method!r}")
    bits = rec.final["decisions"]
    H = hamming_matrix(bits)
    report = {"round": rec.final["round"], "decisions": bits, "hamming": H.tolist()}
    clusters = rec.header.get("cluster_labels") or []
    if len(clusters) == len(bits):
        within, between = cluster_hamming(H, clusters)
        report.update(cluster_labels=clusters, within_cluster=within, between_cluster=between)
    return report


def cmd_decisions(args) -> int:
    report = decisions_report(args.run)
    print(f"final hard decisions (round {report['round']}):")
    for m, b in enumerate(report["decisions"]):
        print(f"  client {m:3d}  {b}")
    print("pairwise Hamming distances:")
    for row in report["hamming"]:
        print("  " + " ".join(f"{v:3d}" for v in row))
    if "within_cluster" in report:
        print(f"mean within-cluster {report['within_cluster']:.3f}, "
              f"between-cluster {report['between_cluster']:.3f}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_config_args(p: argparse.ArgumentParser, with_run_flags: bool = True) -> None:
    p.add_argument("config", nargs="?", help="YAML experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set synth.seed=3 (repeatable)")
    if with_run_flags:
        p.add_argument("--method", choices=["fedmn", "fedavg", "local"])
        p.add_argument("--arch", help="architecture such as 2x2x2")
        p.add_argument("--rounds", type=int)
        p.add_argument("--epochs", type=int, help="local epochs per round")
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir", dest="output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmn", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="exit codes: 0 ok, 1 internal, 2 config, 3 data, "
                                            "4 metrics, 5 wrong run type")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one method and write metrics")
    _add_config_args(run)
    run.add_argument("-q", "--quiet", action="store_true", help="no per-round log lines")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="accuracy vs transmitted parameters across runs")
    cmp_.add_argument("runs", nargs="+")
    cmp_.add_argument("--csv", help="also write the table as CSV")
    cmp_.set_defaults(func=cmd_compare)

    dec = sub.add_parser("decisions-report", help="final decisions and Hamming matrix of a fedmn run")
    dec.add_argument("run")
    dec.add_argument("--json", help="also write the report as JSON")
    dec.set_defaults(func=cmd_decisions)

    val = sub.add_parser("validate-config", help="check a config and print the resolved version")
    _add_config_args(val)
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MetricsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_METRICS
    except WrongRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WRONG_RUN
    except FedMNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
