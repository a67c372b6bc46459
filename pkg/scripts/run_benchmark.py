#!/usr/bin/env python3
"""Run the ablation ladder on the default synthetic dataset and print a table.

    python3 scripts/run_benchmark.py --seeds 0 1 2 --out runs/bench
"""

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from darn.pipeline import LADDER, BenchmarkConfig, default_dataset, run_ablation, variant_by_name


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=[v.name for v in LADDER])
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--warmup", type=int, default=None, help="shared warm-up epochs for dual variants")
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")

    cfg = BenchmarkConfig()
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    if args.warmup is not None:
        cfg = replace(cfg, shared_warmup_epochs=args.warmup)
    variants = [variant_by_name(n) for n in args.variants]

    t0 = time.perf_counter()
    with threadpool_limits(1):
        table = run_ablation(default_dataset(cfg), variants, cfg, args.seeds, args.out)
    elapsed = time.perf_counter() - t0

    k = cfg.sweep_k
    print(f"{'variant':<12} top-{k:<5} ndcg@{k:<5} sweep {list(cfg.gallery_sizes)}")
    for v in variants:
        sweep = table.mean_sweep(v.name)
        print(f"{v.name:<12} {table.mean_top_k(v.name, k):<9.3f} {table.mean_ndcg(v.name, k):<10.3f} "
              f"{[round(x, 3) for x in sweep.values()]}")
    print(f"total {elapsed:.0f}s")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        payload = {"config": cfg.to_dict(), "seeds": args.seeds, "seconds": elapsed, "table": table.to_dict()}
        (args.out / "ablation.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
