"""Run the four-arm toy ablation and print per-arm mAP and the ordering checks.

    python scripts/run_ablation.py --seeds 10 11 12 13 14
"""

import argparse
import logging
import sys

from weatherda.selftrain import ablation_config, run_ablation


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[10, 11, 12, 13, 14])
    args = ap.parse_args()
    logging.disable(logging.WARNING)

    def progress(seed, row):
        print(f"seed {seed}: " + "  ".join(f"{k} {v:.1f}" for k, v in row.items()), flush=True)

    res = run_ablation(args.seeds, ablation_config(), progress)
    print(res.table())
    checks = res.ordering()
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"runtime {res.seconds:.0f}s")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
