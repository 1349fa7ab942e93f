"""Prior-integration and fusion trend over several seeds.

    python3 scripts/trend.py --seeds 20 --frames 120 --out sweep.csv
"""

import argparse
import time

from relocvo.harness.config import Config
from relocvo.harness.experiment import run_seed, summarize, trend_config, write_sweep
from relocvo.harness.pipeline import MODES


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--out", help="optional per-seed CSV")
    args = p.parse_args()

    cfg = trend_config(Config(), args.frames)
    t0 = time.perf_counter()
    outcomes = []
    for s in range(args.seeds):
        o = run_seed(cfg, s)
        outcomes.append(o)
        print(f"seed {s:2d}  " + "  ".join(f"{m} {o.rpe[m]:.4f}" for m in MODES)
              + f"  ate {o.ate_odometry:.4f} -> {o.ate_fused:.4f}  ({o.seconds:.1f} s)")
    for k, v in summarize(outcomes).items():
        print(f"{k:28s} {v:.5f}")
    print(f"total {time.perf_counter() - t0:.0f} s")
    if args.out:
        write_sweep(args.out, outcomes)


if __name__ == "__main__":
    main()
