"""Run the seeded baseline-vs-ltn comparison and print Dice / constraint tables.

    python scripts/run_tables.py [--config run.cfg] [--seeds 0,1,2] [--fractions 1.0,0.25,0.05] [--json out.json]
"""

import argparse
import json
import logging

import numpy as np

from ltnseg.config import load_run_config
from ltnseg.experiment import directional_verdict, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds")
    ap.add_argument("--fractions")
    ap.add_argument("--gamma-v", dest="gamma_v")
    ap.add_argument("--lr")
    ap.add_argument("--json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    overrides = {k: v for k, v in vars(args).items() if k in ("seeds", "fractions", "gamma_v", "lr") and v}
    cfg = load_run_config(args.config, overrides)
    result = run_experiment(cfg.experiment_config())

    print(f"\n{'mode':<10} {'fraction':>8} {'dice':>8} {'± std':>8} {'nested':>8} {'connected':>10} {'simvol':>8}")
    for (mode, fraction), cell in sorted(result.cells.items()):
        print(f"{mode:<10} {fraction:>8g} {cell.dice:>8.4f} {np.std(cell.fold_dice):>8.4f} {cell.nested:>8.4f} "
              f"{np.mean(cell.fold_connected):>10.4f} {np.mean(cell.fold_simvol):>8.4f}")
    fractions = {f for _, f in result.cells}
    if {"baseline", "ltn"} <= {m for m, _ in result.cells} and {0.05, 1.0} <= fractions:
        v = directional_verdict(result)
        print(f"\nparity gaps: {v.dice_parity}  gain@0.05={v.low_data_gain:+.4f}  "
              f"nested@1.0 baseline={v.nested_baseline:.4f} ltn={v.nested_ltn:.4f}")
    print(f"cpu seconds: {result.seconds:.0f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"config": cfg.to_text(), "summary": result.summary(), "seconds": result.seconds}, fh, indent=2)


if __name__ == "__main__":
    main()
