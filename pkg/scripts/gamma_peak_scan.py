#!/usr/bin/env python3
"""Stretch experiment: pulse-improvement scan over the bath cutoff gamma.

Looks for the peak of the fidelity improvement F_opt - F_ideal at a critical
cutoff value.  This scan is exploratory and not part of the acceptance gate:
with desk-scale iteration budgets the peak location is noisy, so the output
is meant for plotting, not for CI assertions.

Usage: python scripts/gamma_peak_scan.py [--out OUT_DIR] [--k-max N]
"""

import argparse
from pathlib import Path

from qctrl.dataio import RunConfig, write_csv
from qctrl.experiments import scan_improvement


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/gamma_peak", type=Path)
    parser.add_argument("--k-max", default=100, type=int,
                        help="Adam iterations per cutoff value")
    parser.add_argument("--values", default="1,2,3,4,6,8,12,16,24,30",
                        help="comma-separated cutoff values")
    args = parser.parse_args()

    cfg = RunConfig(k_max=args.k_max)
    values = [float(v) for v in args.values.split(",")]
    results = scan_improvement(cfg, "pulse", "cutoff", values, args.out)
    print(f"{'cutoff':>8} {'F_ideal':>10} {'F_opt':>10} {'improvement':>12}")
    best = max(results["rows"], key=lambda r: r["improvement"])
    for row in results["rows"]:
        marker = "  <- peak" if row is best else ""
        print(f"{row['value']:8.2f} {row['baseline_fidelity']:10.5f} "
              f"{row['optimized_fidelity_rk4']:10.5f} "
              f"{row['improvement']:12.5f}{marker}")


if __name__ == "__main__":
    main()
