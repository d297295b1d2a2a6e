"""Command line entry point: ``thzjcs {dataset,train,evaluate,explain,sweep}``.

All commands share ``--config``, ``--seed``, ``--out`` and ``--smoke``. A run
directory holds ``dataset/``, ``models/`` and ``eval/``; later commands read
what earlier ones wrote there unless pointed elsewhere.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .assign import BudgetExceeded
from .config import ConfigError, load_config
from .gnn import DivergenceError, ShapeError
from .scenario import Topology, TopologyError

log = logging.getLogger("thzjcs")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML file of overrides")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    p.add_argument("--smoke", action="store_true", help="small profile for quick checks")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thzjcs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate topologies and exhaustive-search labels")
    _common(p)

    p = sub.add_parser("train", help="train the heterogeneous (and homogeneous) GNN")
    _common(p)
    p.add_argument("--dataset", type=Path, help="dataset directory (default OUT/dataset)")

    p = sub.add_parser("evaluate", help="score every scheme on the test split")
    _common(p)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--models", type=Path, help="checkpoint directory (default OUT/models)")
    p.add_argument("--split", default="test", choices=sorted(ex.SPLITS))
    p.add_argument("--limit", type=int, help="evaluate only the first N records")

    p = sub.add_parser("explain", help="emit the geometry and chosen links of one decision")
    _common(p)
    p.add_argument("--models", type=Path)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--topology", type=Path, help="topology JSON file")
    src.add_argument("--index", type=int, default=0, help="test record index (default 0)")
    p.add_argument("--dataset", type=Path)

    p = sub.add_parser("sweep", help="repeat dataset/train/evaluate along one axis")
    _common(p)
    p.add_argument("--axis", required=True, choices=ex.SWEEP_AXES)
    p.add_argument("--values", required=True, nargs="+",
                   help="SPV counts, MxN target counts, or embedding dimensions")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, smoke=args.smoke, seed=args.seed)
        log.info("resolved config %s: %s", cfg.hash(), json.dumps(cfg.to_dict(), sort_keys=True))
        out = args.out
        dataset = getattr(args, "dataset", None) or out / "dataset"
        models = getattr(args, "models", None) or out / "models"
        if args.command == "dataset":
            manifest = ex.make_dataset(cfg, out / "dataset")
            for split, info in manifest["splits"].items():
                print(f"{split}: {info['records']} records, {info['infeasible_skipped']} infeasible skipped")
        elif args.command == "train":
            summary = ex.train_models(cfg, dataset, out / "models")
            for name, info in summary["models"].items():
                print(f"{name}: loss {info['first_loss']:.4f} -> {info['final_smoothed_loss']:.4f} (smoothed)")
        elif args.command == "evaluate":
            rows = ex.evaluate_models(cfg, dataset, models, out / "eval", args.split, args.limit)
            for r in rows:
                print(f"{r['scheme']:<11} sum rate {r['sum_rate_mean_bps']:.4e} bit/s  "
                      f"ratio {r['ratio_mean']:.4f} [{r['ratio_ci_low']:.4f}, {r['ratio_ci_high']:.4f}]  "
                      f"subset acc {r['subset_accuracy']:.4f}  feasible {r['feasibility_rate']:.3f}")
        elif args.command == "explain":
            if args.topology:
                topo = Topology.from_dict(json.loads(args.topology.read_text(encoding="utf-8")))
                index = 0
            else:
                records = ex.load_split(dataset, "test")
                if not 0 <= args.index < len(records):
                    raise IndexError(f"--index {args.index} outside 0..{len(records) - 1}")
                topo, index = records[args.index].topology, args.index
            model = ex.load_model(models, ex.model_name(ex.Mode.HETEROGENEOUS))
            doc = ex.explain(cfg, model, topo, index)
            out.mkdir(parents=True, exist_ok=True)
            ex.write_atomic(out / "explain.json", ex.dumps(doc))
            print(out / "explain.json")
        elif args.command == "sweep":
            ex.sweep(cfg, args.axis, args.values, out / f"sweep_{args.axis}")
            print(out / f"sweep_{args.axis}" / f"sweep_{args.axis}.csv")
    except (ConfigError, BudgetExceeded, ShapeError, TopologyError, DivergenceError,
            FileNotFoundError, IndexError, ValueError) as exc:
        print(f"thzjcs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"thzjcs {args.command}: I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
