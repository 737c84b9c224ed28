"""Parameter and MAC census for every named variant preset.

    python scripts/ablation_census.py [--size 360x480]

Prints one row per preset with parameters, the change relative to ``final``
and multiply-accumulates at the given input size.
"""

import argparse
from dataclasses import replace

from mscfnet.analysis import count_flops, count_params
from mscfnet.network import build, variant_presets


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", default="360x480")
    ap.add_argument("--classes", type=int, default=11)
    args = ap.parse_args()
    h, w = (int(v) for v in args.size.split("x"))

    rows = []
    for name, cfg in variant_presets().items():
        net = build(replace(cfg, num_classes=args.classes), 0)
        rows.append((name, count_params(net)[0], count_flops(net, (1, 3, h, w))))
    base = dict((n, p) for n, p, _ in rows)["final"]
    print(f"{'preset':<20} {'params':>10} {'vs final':>10} {'GMACs':>8}")
    for name, params, macs in rows:
        print(f"{name:<20} {params:>10} {params - base:>+10} {macs / 1e9:>8.3f}")


if __name__ == "__main__":
    main()
