"""Join the per-model loss traces of a run into one smoothed table.

Writes ``loss_curves.csv`` next to the checkpoints with one row every
``--every`` iterations and one 500-iteration moving-average column per model.

    python scripts/loss_curves.py runs/main/models
"""
import argparse
from pathlib import Path

from thzjcs import experiment as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("models", type=Path)
    ap.add_argument("--every", type=int, default=100)
    ap.add_argument("--window", type=int, default=500)
    args = ap.parse_args()
    curves = {}
    for path in sorted(args.models.glob("loss_*.csv")):
        name = path.stem[len("loss_"):]
        curves[name] = ex.smoothed([float(r["loss"]) for r in ex.read_csv(path)], args.window)
    if not curves:
        raise SystemExit(f"no loss_*.csv files in {args.models}")
    names = sorted(curves)
    n = min(len(c) for c in curves.values())
    rows = [[i] + [repr(float(curves[k][i - 1])) for k in names]
            for i in range(args.every, n + 1, args.every)]
    cfg = ex.load_run_config(args.models)
    out = args.models / "loss_curves.csv"
    ex.write_atomic(out, ex.csv_text(["iteration"] + names, rows, cfg.hash()))
    for k in names:
        print(f"{k:<14} start {curves[k][0]:.3f}  end {curves[k][n - 1]:.3f}")
    print(out)


if __name__ == "__main__":
    main()
