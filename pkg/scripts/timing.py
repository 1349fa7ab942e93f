"""Per-keyframe back-end and fusion timings for one default run."""

import argparse

import numpy as np

from relocvo.harness.config import Config
from relocvo.harness.pipeline import FRONT_AND_BACK_END, relocalize_sequence, run_pipeline
from relocvo.harness.world import generate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=1)
    args = p.parse_args()

    cfg = Config()
    seq, db, _ = generate(cfg.sequence, args.seed)
    relocs = relocalize_sequence(seq, db, cfg.reloc)
    for _ in range(args.repeat):
        res = run_pipeline(seq, db, FRONT_AND_BACK_END, True, cfg.pipeline(), relocs)
        for name, budget in (("keyframe", 200.0), ("fusion", 50.0)):
            ms = 1e3 * np.array(res.timings[name])
            print(f"{name:9s} n {len(ms):3d}  median {np.median(ms):6.1f}  p95 {np.percentile(ms, 95):6.1f}"
                  f"  max {ms.max():6.1f} ms  (budget {budget:.0f})")


if __name__ == "__main__":
    main()
