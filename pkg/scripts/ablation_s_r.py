"""Error and KV size over a grid of outlier percent s and rank r at fixed bit width.

    python3 scripts/ablation_s_r.py --bits 2 --out results/ablation.csv
"""

import argparse
import itertools
from pathlib import Path

from gearkv.attention import SyntheticKVSpec, generate_synthetic_kv
from gearkv.cli import sweep_cell
from gearkv.presets import backbone_config
from gearkv.report import render_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bits", type=int, default=2)
    ap.add_argument("--backbone", default="kivi-g64")
    ap.add_argument("--sparsity", default="0,1,2,5")
    ap.add_argument("--rank", default="0,2,4,8")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--decode-tokens", type=int, default=128)
    ap.add_argument("--out", type=Path, default=Path("results/ablation.csv"))
    args = ap.parse_args()

    spec = SyntheticKVSpec(n=640, d=256, heads=2, seed=args.seed)
    k, v, _ = generate_synthetic_kv(spec)
    rows = []
    for s, r in itertools.product(map(float, args.sparsity.split(",")), map(int, args.rank.split(","))):
        cfg = backbone_config(args.backbone, bits=args.bits, sparsity=s, rank_prefill=r,
                              rank_decode=max(r // 2, min(r, 1)), seed=args.seed)
        cell = sweep_cell(k, v, cfg, spec.layout, args.decode_tokens)
        rows.append({"bits": cfg.bits, "sparsity": s, "rank_prefill": r, "rank_decode": cfg.rank_decode,
                     "coverage_p": cfg.coverage, "buffer": cfg.buffer_size, "backbone": args.backbone, **cell})
        print(f"s={s:<4g} r={r:<2d} relative {cell['relative']:.4f}  kv size {cell['kv_size_percent']:.2f}%")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(render_csv("sweep", rows))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
