"""End-to-end desk reproduction: phantoms, both training phases, the
consistency ablation, and the seen/unseen evaluation tables.

    python demos/reproduce.py --out runs/repro            # default desk config
    python demos/reproduce.py --out runs/quick --quick    # a few minutes, for a smoke run
    python demos/reproduce.py --out runs/x --set phase1.epochs=50

Everything lands under ``--out``: the generated dataset, one directory per
training run (checkpoint, run log, config echo), ``metrics_hail.csv``,
``metrics_ablation.csv`` and ``tables.txt``.
"""

import argparse
import logging

from hail.config import HailConfig
from hail.pipeline import run_reproduction

QUICK = [
    "phantom.edge=32",
    "phantom.n_per_site=6",
    "phase1.epochs=20",
    "phase2.epochs=20",
    "phase2.pairs_per_epoch=16",
]


def main():
    ap = argparse.ArgumentParser(description="desk reproduction of the harmonization experiments")
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--quick", action="store_true", help="tiny volumes and few epochs")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = HailConfig.load(args.config).with_overrides((QUICK if args.quick else []) + args.set)
    result = run_reproduction(cfg, args.out)

    print((result.out_dir / "tables.txt").read_text(), end="")
    print()
    print(f"phase 1 best validation loss {min(result.phase1_val):.4f}")
    print(f"phase 2 best validation loss {min(result.phase2_val):.4f}")
    print("wall time: " + ", ".join(f"{k} {v:.0f}s" for k, v in result.timings.items()))


if __name__ == "__main__":
    main()
