"""KV-size percentages for the GSM8k operating points next to the reported values.

    python3 scripts/reported_kv_size.py [--buffer-fraction 0.5] [--index-bits 32]
"""

import argparse

from gearkv.accounting import account
from gearkv.presets import PRESETS, REPORTED_PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--buffer-fraction", type=float, default=1.0)
    ap.add_argument("--index-bits", type=int, default=16)
    args = ap.parse_args()

    print(f"{'preset':<22}{'model %':>9}{'reported %':>12}{'diff pp':>9}")
    for name in REPORTED_PRESETS:
        p = PRESETS[name]
        rep = account(p.config(), p.n_prefill, p.n_gen, p.d, p.heads,
                      buffer_fraction=args.buffer_fraction, index_bits=args.index_bits)
        pct = rep.percent_of_fp16
        print(f"{name:<22}{pct:>9.2f}{p.reported_percent:>12.1f}{pct - p.reported_percent:>+9.2f}")


if __name__ == "__main__":
    main()
