"""Hallucinator benefit on the attribute-bottleneck benchmark.

For each seed, trains the full model (hallucinator on, attribute tokens in
captions) and the ablated baseline (both off) on the same corpus, fine-tunes
retrieval heads, and reports R@1 deltas.  The acceptance gate requires the
median delta over seeds to be >= 5 points in both directions.
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from wordsight.cli import run_compare
from wordsight.config import resolve_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-root", default="runs/benefit")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    args = ap.parse_args()

    deltas: dict[tuple[str, int], list[float]] = {}
    t0 = time.time()
    for seed in args.seeds:
        cfg = resolve_config("bottleneck-benchmark", None, {"seed": seed})
        out = run_compare(cfg, os.path.join(args.out_root, f"seed{seed}"))
        for key, d in out["delta"].items():
            deltas.setdefault(key, []).append(d)
        tr1 = out["delta"][("TR", 1)]
        ir1 = out["delta"][("IR", 1)]
        print(f"seed {seed}: delta TR@1 {tr1:+.1f}  IR@1 {ir1:+.1f}")
    print(f"\n{len(args.seeds)} seeds in {(time.time() - t0) / 60:.1f} min")
    for (direction, k), vals in sorted(deltas.items()):
        med = float(np.median(vals))
        marker = " (acceptance: >= 5)" if k == 1 else ""
        print(f"median delta {direction}@{k}: {med:+.1f}{marker}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
