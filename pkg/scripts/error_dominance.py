"""Relative reconstruction error of backbone, GEAR-L and GEAR on outlier-heavy synthetic K/V.

Writes one CSV row per (seed, role) and prints the mean ratios to the backbone.

    python3 scripts/error_dominance.py --seeds 10 --bits 2 --out results/dominance.csv
"""

import argparse
from pathlib import Path

import numpy as np

from gearkv.attention import SyntheticKVSpec, generate_synthetic_kv
from gearkv.gear import KEY, VALUE, compress_block, error_report
from gearkv.presets import backbone_config
from gearkv.report import render_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--bits", type=int, default=2)
    ap.add_argument("--backbone", default="kivi-g64")
    ap.add_argument("--rank", type=int, default=4)
    ap.add_argument("--sparsity", type=float, default=2.0)
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--d", type=int, default=256)
    ap.add_argument("--heads", type=int, default=2)
    ap.add_argument("--outlier-scale", type=float, default=16.0)
    ap.add_argument("--out", type=Path, default=Path("results/dominance.csv"))
    args = ap.parse_args()

    base = backbone_config(args.backbone, bits=args.bits, sparsity=0.0, rank_prefill=0, rank_decode=0)
    variants = (base, base.with_(rank_prefill=args.rank), base.with_(rank_prefill=args.rank, sparsity=args.sparsity))
    rows = []
    for seed in range(args.seeds):
        spec = SyntheticKVSpec(n=args.n, d=args.d, heads=args.heads, seed=seed, outlier_scale=args.outlier_scale)
        k, v, _ = generate_synthetic_kv(spec)
        for role, x in ((KEY, k), (VALUE, v)):
            e = [error_report(x, compress_block(x, c, role, c.rank_prefill, spec.layout)).relative for c in variants]
            rows.append({"seed": seed, "role": role, "backbone_rel": e[0], "gear_l_rel": e[1], "gear_rel": e[2],
                         "gear_l_ratio": e[1] / e[0], "gear_ratio": e[2] / e[0]})

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(render_csv("dominance", rows))
    for role in (KEY, VALUE):
        sel = [r for r in rows if r["role"] == role]
        print(f"{role:>5}: GEAR-L/backbone {np.mean([r['gear_l_ratio'] for r in sel]):.3f}  "
              f"GEAR/backbone {np.mean([r['gear_ratio'] for r in sel]):.3f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
