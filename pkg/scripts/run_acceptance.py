#!/usr/bin/env python3
"""Run (or reuse) the desk-scale experiment the acceptance suite reads.

    python scripts/run_acceptance.py [--out results/acceptance] [--force]

Takes about an hour on one core. Results are keyed by the package
sources and config, so edits to the code trigger a fresh run.
"""

import argparse
import logging
import shutil
import sys
from pathlib import Path

from stconsist.experiments import load_or_run

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "results" / "acceptance"))
    ap.add_argument("--force", action="store_true", help="discard cached results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.force:
        shutil.rmtree(args.out, ignore_errors=True)
    res = load_or_run(args.out, log=logging.info)
    for r in res["table1"]:
        if r["seed"] == "mean":
            logging.info("fraction %-6s phase1 %.4f baseline %.4f consistency %.4f",
                         r["fraction"], r["phase1_miou"], r["baseline_miou"], r["consist_miou"])
    for r in res["table2"]:
        logging.info("%-12s %.4f", r["row"], r["miou_mean"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
