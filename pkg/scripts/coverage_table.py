"""Sampling-footprint coverage of stacked dilated 3-tap kernels.

    python scripts/coverage_table.py [rates ...]

Without arguments compares the preset schedules with a few contrasting
ones (shared factors, no rate 1).
"""

import sys

from mscfnet.analysis import dilation_coverage
from mscfnet.network import CANONICAL, get_preset

SCHEDULES = {
    "canonical stage 2": CANONICAL.dilation_schedule_2,
    "canonical stage 1": CANONICAL.dilation_schedule_1,
    "power-of-two preset": get_preset("power-of-two-rates").dilation_schedule_2,
    "2,4,8,16": (2, 4, 8, 16),
    "2,2,4,4,8,8": (2, 2, 4, 4, 8, 8),
    "3,6,9": (3, 6, 9),
    "1,3,9,27": (1, 3, 9, 27),
}


def main():
    schedules = {"given": tuple(int(v) for v in sys.argv[1:])} if len(sys.argv) > 1 else SCHEDULES
    print(f"{'schedule':<22} {'RF':>5} {'reached':>8} {'density':>8} {'gap':>4}  verdict")
    for name, sched in schedules.items():
        c = dilation_coverage(sched)
        print(f"{name:<22} {c.receptive_field:>5} {c.reachable:>8} {c.density:>8.4f} {c.largest_gap:>4}  {c.verdict}")


if __name__ == "__main__":
    main()
