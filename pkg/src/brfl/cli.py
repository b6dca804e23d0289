"""Command-line entry points: run experiments, verify chain exports, plot
metrics, and generate synthetic IDX corpora.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .attacks import AttackKind, AttackSpec
from .ledger import verify_chain_file
from .nn import Hyperparams
from .sim import AGGREGATOR_NAMES, DATASETS, SimConfig, run_experiment
from .synth import write_corpus

log = logging.getLogger(__name__)

_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_file(path: Path | str) -> dict[str, str]:
    """Read a flat ``key = value`` config file; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, _, value = line.partition(sep)
                values[key.strip()] = value.strip()
                break
        else:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
    return values


def build_config(options: dict[str, str]) -> SimConfig:
    """Turn flat string options into a validated SimConfig."""
    opts = dict(options)

    def pop(key: str, cast, default):
        if key not in opts:
            return default
        raw = opts.pop(key)
        if cast is bool:
            try:
                return _BOOL_VALUES[raw.lower()]
            except KeyError:
                raise ValueError(f"{key}: expected a boolean, got {raw!r}") from None
        return cast(raw)

    attack = AttackSpec(
        kind=AttackKind(pop("attack", str, "none")),
        noise_variance=pop("noise_variance", float, 1.0),
        flip_scale=pop("flip_scale", float, 3.0),
    )
    hyperparams = Hyperparams(
        batch_size=pop("batch_size", int, 10),
        optimizer=pop("optimizer", str, "sgd"),
        learning_rate=pop("learning_rate", float, 0.01),
        local_epochs=pop("local_epochs", int, 5),
    )
    layer_dims = tuple(
        int(d) for d in str(pop("layer_dims", str, "784,128,10")).replace(" ", "").split(",")
    )
    config = SimConfig(
        dataset=pop("dataset", str, "mnist"),
        distribution=pop("distribution", str, "iid"),
        attack=attack,
        malicious_fraction=pop("malicious_fraction", float, 0.5),
        num_trainers=pop("num_trainers", int, 10),
        num_aggregators=pop("num_aggregators", int, 2),
        num_blockchain_nodes=pop("num_blockchain_nodes", int, 2),
        rounds=pop("rounds", int, 30),
        hyperparams=hyperparams,
        num_clusters=pop("num_clusters", int, 2),
        aggregator=pop("aggregator", str, "psa"),
        seed=pop("seed", int, 0),
        layer_dims=layer_dims,
        shard_size=pop("shard_size", int, 600),
        test_size=pop("test_size", int, 1000),
        validation_fraction=pop("validation_fraction", float, 0.2),
        shards_per_node=pop("shards_per_node", int, 2),
        store_optional_blocks=pop("store_optional_blocks", bool, False),
        data_dir=pop("data_dir", str, None),
        out_dir=pop("out_dir", str, None),
    )
    if opts:
        raise ValueError(f"unknown config keys: {', '.join(sorted(opts))}")
    return config


def _cmd_run(args: argparse.Namespace) -> int:
    options = parse_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "aggregator": args.aggregator,
        "attack": args.attack,
        "distribution": args.dist,
        "dataset": args.dataset,
        "data_dir": args.data_dir,
        "rounds": args.rounds,
    }
    for key, value in overrides.items():
        if value is not None:
            options[key] = str(value)
    config = build_config(options)
    result = run_experiment(config)
    if result.metrics:
        print(f"final accuracy after {len(result.metrics)} rounds: {result.final_accuracy:.4f}")
    else:
        print("no rounds were run")
    if result.out_dir is not None:
        print(f"outputs written to {result.out_dir}")
    return 0


def _cmd_verify_chain(args: argparse.Namespace) -> int:
    violation = verify_chain_file(args.chain)
    if violation is None:
        print(f"{args.chain}: ok")
        return 0
    print(
        f"{args.chain}: INVALID at height {violation.height} "
        f"({violation.field}): {violation.detail}"
    )
    return 1


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _cmd_plot(args: argparse.Namespace) -> int:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("plotting needs matplotlib (pip install brfl[plot])", file=sys.stderr)
        return 1

    metrics_dir = Path(args.metrics)
    echo_path = metrics_dir / "config-echo.json"
    malicious: set[int] = set()
    blockchain: set[int] = set()
    if echo_path.is_file():
        echo = json.loads(echo_path.read_text(encoding="utf-8"))
        malicious = set(echo.get("malicious_ids", []))
        blockchain = set(echo.get("node_ids", {}).get("blockchain", []))

    def node_style(node_id: int) -> dict:
        if node_id in blockchain:
            return {"marker": "^", "linestyle": "-"}
        if node_id in malicious:
            return {"marker": "o", "markerfacecolor": "none", "linestyle": "--"}
        return {"marker": ".", "linestyle": "-"}

    def node_label(node_id: int) -> str:
        if node_id in blockchain:
            return f"node_{node_id}_BN"
        return f"node_{node_id}_{'M' if node_id in malicious else 'B'}"

    written = []

    rows = _read_csv(metrics_dir / "accuracy.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([int(r["round"]) for r in rows], [float(r["accuracy"]) for r in rows])
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(metrics_dir / "accuracy.svg")
    plt.close(fig)
    written.append("accuracy.svg")

    for fname, column, out_name in (
        ("stakes.csv", "stake", "stakes.svg"),
        ("chain_size.csv", "bytes", "chain_size.svg"),
    ):
        rows = _read_csv(metrics_dir / fname)
        series: dict[int, tuple[list[int], list[float]]] = {}
        for row in rows:
            xs, ys = series.setdefault(int(row["node_id"]), ([], []))
            xs.append(int(row["round"]))
            ys.append(float(row[column]))
        fig, ax = plt.subplots(figsize=(7, 4))
        for node_id in sorted(series):
            xs, ys = series[node_id]
            ax.plot(xs, ys, label=node_label(node_id), markersize=4, **node_style(node_id))
        ax.set_xlabel("round")
        ax.set_ylabel(column)
        ax.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        fig.savefig(metrics_dir / out_name)
        plt.close(fig)
        written.append(out_name)

    rows = _read_csv(metrics_dir / "an_counts.csv")
    fig, ax = plt.subplots(figsize=(7, 4))
    ids = [int(r["node_id"]) for r in rows]
    counts = [int(r["count"]) for r in rows]
    colors = ["tab:red" if i in malicious else "tab:blue" for i in ids]
    bars = ax.bar([node_label(i) for i in ids], counts, color=colors)
    ax.bar_label(bars)
    ax.set_ylabel("times selected as aggregation node")
    ax.tick_params(axis="x", labelrotation=60, labelsize=7)
    fig.tight_layout()
    fig.savefig(metrics_dir / "an_counts.svg")
    plt.close(fig)
    written.append("an_counts.svg")

    print(f"wrote {', '.join(written)} to {metrics_dir}")
    return 0


def _cmd_make_synth_data(args: argparse.Namespace) -> int:
    for name in args.datasets.split(","):
        out = write_corpus(
            args.out,
            name=name.strip(),
            train_count=args.train,
            test_count=args.test,
            seed=args.seed,
        )
        print(f"wrote synthetic {name.strip()} corpus to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brfl",
        description="Byzantine-robust federated learning simulator with a blockchain ledger",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment and write metrics")
    run_p.add_argument("--config", help="flat key=value config file")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--out", help="output directory for metrics and the chain export")
    run_p.add_argument("--aggregator", choices=AGGREGATOR_NAMES)
    run_p.add_argument("--attack", choices=[k.value for k in AttackKind])
    run_p.add_argument("--dist", choices=["iid", "noniid"])
    run_p.add_argument("--dataset", choices=DATASETS)
    run_p.add_argument("--data-dir", dest="data_dir")
    run_p.add_argument("--rounds", type=int)
    run_p.set_defaults(func=_cmd_run)

    verify_p = sub.add_parser("verify-chain", help="verify a chain.jsonl export")
    verify_p.add_argument("--chain", required=True)
    verify_p.set_defaults(func=_cmd_verify_chain)

    plot_p = sub.add_parser("plot", help="render SVG plots from a metrics directory")
    plot_p.add_argument("--metrics", required=True)
    plot_p.set_defaults(func=_cmd_plot)

    synth_p = sub.add_parser("make-synth-data", help="generate synthetic IDX corpora")
    synth_p.add_argument("--out", required=True)
    synth_p.add_argument("--train", type=int, default=12000)
    synth_p.add_argument("--test", type=int, default=2000)
    synth_p.add_argument("--seed", type=int, default=1234)
    synth_p.add_argument("--datasets", default="mnist,fashion")
    synth_p.set_defaults(func=_cmd_make_synth_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
