"""Per-step attention-output deviation from the exact cache during decoding.

    python3 scripts/deviation_trace.py --seeds 3 --steps 128 --out results/deviation.csv
"""

import argparse
from pathlib import Path

import numpy as np

from gearkv.attention import SyntheticKVSpec, run_deviation
from gearkv.cli import VARIANTS, variant_configs
from gearkv.presets import backbone_config
from gearkv.report import render_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=128)
    ap.add_argument("--n", type=int, default=384)
    ap.add_argument("--d", type=int, default=256)
    ap.add_argument("--heads", type=int, default=2)
    ap.add_argument("--bits", type=int, default=2)
    ap.add_argument("--backbone", default="kivi-g64")
    ap.add_argument("--out", type=Path, default=Path("results/deviation.csv"))
    args = ap.parse_args()

    base = backbone_config(args.backbone, bits=args.bits, sparsity=2.0, rank_prefill=4, rank_decode=2)
    cfgs = variant_configs(base, VARIANTS)
    rows, means = [], {name: [] for name in VARIANTS}
    for seed in range(args.seeds):
        spec = SyntheticKVSpec(n=args.n, d=args.d, heads=args.heads, seed=seed)
        for name, trace in run_deviation(spec, cfgs, args.steps).items():
            trace.cfg_id = f"{name}/seed{seed}"
            rows.extend(trace.rows())
            means[name].append(trace.mean_l2)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(render_csv("deviate", rows))
    for name, vals in means.items():
        print(f"{name:>9}: mean per-step L2 deviation {np.mean(vals):.4f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
