"""Parameter sweeps: SPV count, comm x sensing target counts, embedding size.

Each point regenerates data and retrains, so the full set takes a while on
one core; ``--smoke`` shrinks every point to the smoke profile.

    python scripts/sweeps.py --out runs/sweeps --which spv targets embedding
"""
import argparse
import logging
from pathlib import Path

from thzjcs import experiment as ex
from thzjcs.config import load_config

POINTS = {
    "spv": ["3", "4", "5", "6", "7"],
    "targets": ["1x1", "2x1", "1x2", "2x2", "3x2"],
    "embedding": ["16", "32", "64", "128"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/sweeps"))
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--smoke", action="store_true")
    ap.add_argument("--which", nargs="+", choices=sorted(POINTS), default=sorted(POINTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = load_config(args.config, smoke=args.smoke, seed=args.seed)
    for axis in args.which:
        table = ex.sweep(cfg, axis, POINTS[axis], args.out / f"sweep_{axis}")
        print(f"\n{axis}")
        for r in table:
            print(f"  {r['value']:>5} {r['scheme']:<11} sum rate {r['sum_rate_mean_bps']:.4e}  "
                  f"ratio {r['ratio_mean']:.4f}")


if __name__ == "__main__":
    main()
