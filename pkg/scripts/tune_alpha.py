#!/usr/bin/env python3
"""Pick the task-mixture share by pooled dev F1.

Trains one mixture model per candidate alpha with every domain acting
as a source and reports the grid; ties go to the smaller value.
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import replace

from pada_lab.corpus import SyntheticSpec, generate_synthetic, ingest_jsonl
from pada_lab.harness import DEFAULT_ALPHA_GRID, ExperimentConfig, grid_search_alpha


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    ap.add_argument("--data", default=None, help="JSONL corpus; omitted = synthesize")
    ap.add_argument("--grid", default=",".join(str(v) for v in DEFAULT_ALPHA_GRID),
                    help="comma-separated alpha values")
    ap.add_argument("--epochs", type=int, default=None, help="shorter trials tune faster")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None, help="optional JSON file for the grid scores")
    args = ap.parse_args()

    cfg = ExperimentConfig()
    overrides = {
        k: getattr(args, k) for k in ("epochs", "seed") if getattr(args, k) is not None
    }
    if overrides:
        cfg = replace(cfg, **overrides)
    dataset = ingest_jsonl(args.data) if args.data else generate_synthetic(
        SyntheticSpec() if args.seed is None else SyntheticSpec(seed=args.seed)
    )
    values = [float(v) for v in args.grid.split(",") if v.strip()]

    t0 = time.perf_counter()
    best, scores = grid_search_alpha(dataset, values, cfg)
    wall = time.perf_counter() - t0

    for alpha in sorted(scores):
        marker = "  <- best" if alpha == best else ""
        print(f"alpha {alpha:.2f}: pooled dev F1 {scores[alpha]:.4f}{marker}")
    print(f"\n{wall:.1f}s wall")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"best": best, "scores": scores}, f, indent=1, sort_keys=True)
            f.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
