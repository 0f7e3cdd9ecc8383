"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 training or
adaptation diverged, 5 malformed file or frame, 6 round aborted by a client.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import catalog
from .config import SimConfig, load_config
from .data import gen_source, load_dataset, save_dataset
from .errors import ClientFailure, ConfigError, FrameError, TrainingDiverged
from .model import evaluate
from .modelio import load_model, save_model
from .simulation import metrics_rows, rounds_csv, run_pretrain, run_simulation, source_test_accuracy, summary, summary_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_FORMAT = 5
EXIT_CLIENT = 6


def _config(path) -> SimConfig:
    return load_config(path) if path else load_config(os.devnull)


def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    spec, params, acc, _ = run_pretrain(cfg)
    save_model(args.out, spec, params)
    print(f"source test accuracy: {acc:.4f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    spec, params = load_model(args.model)
    out_dir = args.out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    source_acc = source_test_accuracy(cfg, spec, params)
    reports = run_simulation(cfg, spec, params, jobs=args.jobs)
    with open(os.path.join(out_dir, "rounds.csv"), "w", encoding="utf-8", newline="") as f:
        f.write(rounds_csv(metrics_rows(reports)))
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        f.write(summary_json(summary(cfg, source_acc, reports)))
    last = reports[-1]
    print(f"source test accuracy: {source_acc:.4f}")
    for rep in reports:
        zs = sum(c.zero_shot_acc for c in rep.clients) / len(rep.clients)
        pa = sum(c.post_adapt_acc for c in rep.clients) / len(rep.clients)
        print(f"round {rep.round_idx}: zero-shot {zs:.4f}  post-adapt {pa:.4f}  global wce {rep.global_wce:.6f}")
    print(f"wrote {out_dir}/rounds.csv ({len(reports)} rounds, {len(last.clients)} clients)")
    return EXIT_OK


def cmd_table1(args) -> int:
    print(catalog.format_table1())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    train, test, _ = gen_source(cfg.data)
    save_dataset(args.out, train if args.split == "train" else test, cfg.data.n_classes)
    print(f"wrote {args.split} split to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec, params = load_model(args.model)
    dataset, _ = load_dataset(args.data)
    print(f"accuracy: {evaluate(spec, params, dataset):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmixstyle", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="train the source model and write an FMXM file")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("simulate", help="run federated rounds and write rounds.csv")
    s.add_argument("--config")
    s.add_argument("--model", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("table1", help="print backbone parameter and transmission sizes")
    s.set_defaults(func=cmd_table1)

    s = sub.add_parser("gen-data", help="write the source dataset as an FMXD file")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("eval", help="accuracy of a model file on a dataset file")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ClientFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CLIENT
    except FrameError as e:
        print(f"format error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
