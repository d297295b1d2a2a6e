"""Full-profile run: dataset, both models, evaluation, then a short report.

    python scripts/reproduce_main.py --out runs/main [--smoke] [--seed 0]
"""
import argparse
import json
import logging
import time
from pathlib import Path

from thzjcs import experiment as ex
from thzjcs.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/main"))
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--smoke", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = load_config(args.config, smoke=args.smoke, seed=args.seed)
    t0 = time.perf_counter()
    manifest = ex.make_dataset(cfg, args.out / "dataset")
    t1 = time.perf_counter()
    summary = ex.train_models(cfg, args.out / "dataset", args.out / "models")
    t2 = time.perf_counter()
    rows = ex.evaluate_models(cfg, args.out / "dataset", args.out / "models", args.out / "eval")
    t3 = time.perf_counter()

    print(json.dumps(manifest["splits"], indent=1))
    for name, info in summary["models"].items():
        print(f"{name:<14} first loss {info['first_loss']:.3f}  final 500-avg "
              f"{info['final_smoothed_loss']:.3f}  checkpoint from iteration {info['selected_iteration']}")
    print(f"{'scheme':<11} {'sum rate':>11} {'ratio':>7} {'95% CI':>17} {'subset acc':>10} {'feasible':>8}")
    for r in rows:
        print(f"{r['scheme']:<11} {r['sum_rate_mean_bps']:11.4e} {r['ratio_mean']:7.4f} "
              f"[{r['ratio_ci_low']:.4f}, {r['ratio_ci_high']:.4f}] {r['subset_accuracy']:10.4f} "
              f"{r['feasibility_rate']:8.3f}")
    print(f"dataset {t1 - t0:.0f} s, train {t2 - t1:.0f} s, evaluate {t3 - t2:.0f} s")


if __name__ == "__main__":
    main()
