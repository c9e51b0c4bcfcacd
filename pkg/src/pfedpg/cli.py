"""Command-line entry point: run experiments, pretrain encoders, export partitions, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import gradcheck
from .compare import compare
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import export_dataset, top_class_shares
from .orchestrator import build_dataset, build_encoder, build_pool, run_experiment
from .pretrain import save_encoder

EXIT_CONFIG = 2


def _load(path: str) -> ExperimentConfig:
    return load_config(path)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    overrides = {}
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.rounds:
        overrides["rounds"] = args.rounds
    if args.workers:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["seed"] = [args.seed] * 3
    if overrides:
        cfg = cfg.replace(**overrides)
    result = run_experiment(cfg, run_dir=args.out)
    s = result.summary
    print(f"strategy={s['strategy']} rounds={s['rounds']} mean_acc={s['mean_acc']:.4f}")
    print(f"uplink/downlink per client per round: {s['comm']['uplink_per_client']} params "
          f"(ratio to full model {s['comm']['ratio']:.3e})")
    print(f"artifacts: {result.run_dir}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args.config)
    if cfg.encoder_mode != "pretrained":
        print("config has encoder_mode = \"random\"; nothing to pretrain", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.encoder_path or Path(cfg.output_dir) / "encoder.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    enc, _ = build_encoder(cfg.replace(encoder_path=""))
    save_encoder(enc, out)
    print(f"encoder ({enc.parameter_count()} params, hash {enc.content_hash()[:12]}) -> {out}")
    return 0


def cmd_partition(args) -> int:
    cfg = _load(args.config)
    pool = build_pool(cfg)
    if cfg.encoder_mode == "pretrained":
        from .data import make_pretrain_split
        pool = make_pretrain_split(pool, cfg.pretrain_fraction, cfg.data_seed)[1]
    fed = build_dataset(cfg, pool)
    path = export_dataset(fed, args.out, {"config": cfg.to_dict()})
    shares = top_class_shares(fed)
    print(f"{fed.num_clients} clients, sizes {[len(c.train_y) + len(c.test_y) for c in fed.clients]}")
    print(f"median top-class share {np.median(shares):.3f}; repairs {fed.repairs}")
    print(f"manifest -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    checks, seconds = gradcheck.run_all(args.seed)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} passed in {seconds:.2f}s")
    return 1 if failed else 0


def cmd_compare(args) -> int:
    cfg = _load(args.config)
    result = compare(cfg, args.strategies, args.seeds)
    print(result.table())
    first = args.strategies[0]
    for other in args.strategies[1:]:
        m, se = result.margin(first, other)
        print(f"{first} - {other}: {m:+.4f} (se {se:.4f}), {first} >= {other} in "
              f"{result.wins(first, other)}/{len(args.seeds)} seeds")
    print(f"{result.seconds:.1f}s")
    return 0


def cmd_config(args) -> int:
    text = dump_config(ExperimentConfig())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _se(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def cmd_report(args) -> int:
    root = Path(args.path)
    single = root / "summary.json"
    if single.exists():
        s = json.loads(single.read_text())
        print(f"strategy {s['strategy']}  seed {s['seed']}  rounds {s['rounds']}")
        print(f"{'client':>6}  {'n_train':>7}  {'n_test':>6}  {'acc':>7}")
        for row in s["final"]:
            print(f"{row['client']:>6}  {row['num_train']:>7}  {row['num_test']:>6}  {row['test_acc']:>7.4f}")
        print(f"{'mean':>6}  {'':>7}  {'':>6}  {s['mean_acc']:>7.4f}")
        return 0
    summaries = sorted(root.glob("*/summary.json"))
    if not summaries:
        print(f"no run summaries under {root}", file=sys.stderr)
        return 1
    by_strategy = defaultdict(list)
    for p in summaries:
        s = json.loads(p.read_text())
        by_strategy[s["strategy"]].append(s["mean_acc"])
    print(f"{'strategy':<14}  {'runs':>4}  {'mean acc':>8}  {'se':>7}")
    for name in sorted(by_strategy, key=lambda k: -np.mean(by_strategy[k])):
        accs = by_strategy[name]
        print(f"{name:<14}  {len(accs):>4}  {np.mean(accs):>8.4f}  {_se(accs):>7.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfedpg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one federated experiment from a TOML config")
    p.add_argument("config")
    p.add_argument("--out", help="run directory (default: output_dir/strategy-hash-timestamp)")
    p.add_argument("--strategy", help="override the config's strategy")
    p.add_argument("--rounds", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int, help="use this value for all three seeds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("pretrain", help="pretrain and save the frozen encoder")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("partition", help="export the client partition as tensor files + manifest")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("gradcheck", help="run the gradient oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="run several strategies over several seeds")
    p.add_argument("config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--strategies", nargs="+", default=["pfedpg", "fedvpt", "base_only", "local_only"])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("config", help="print a config with every default value")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("report", help="summarise a run directory or a directory of runs")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
