"""Pre-training loss halving at desk scale.

Runs 500-step pre-training for each seed with the default configuration and
reports the step-500 / step-1 ratio of every loss term, plus the medians the
acceptance gate checks (MLM and WFH <= 0.5).
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from wordsight.cli import dictionary_from, model_from
from wordsight.config import RunConfig, corpus_from, train_config_from
from wordsight.train import run_pretraining


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-root", default="runs/halving")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args()

    ratios: dict[str, list[float]] = {k: [] for k in ("mlm", "mtc", "moc", "wfh")}
    t0 = time.time()
    for seed in args.seeds:
        cfg = RunConfig().replace(seed=seed, steps=args.steps)
        corpus = corpus_from(cfg)
        d = dictionary_from(cfg, corpus)
        model = model_from(cfg, corpus, d)
        rows = run_pretraining(
            model, corpus.splits["pretrain"], corpus.world.vocab,
            train_config_from(cfg), os.path.join(args.out_root, f"seed{seed}"),
        )
        first, last = rows[0], rows[-1]
        line = f"seed {seed}:"
        for k in ratios:
            r = last[k] / first[k]
            ratios[k].append(r)
            line += f"  {k} {first[k]:.3f}->{last[k]:.3f} ({r:.3f})"
        print(line)
    print(f"\n{len(args.seeds)} seeds in {(time.time() - t0) / 60:.1f} min")
    for k, vals in ratios.items():
        med = float(np.median(vals))
        marker = " (acceptance: <= 0.5)" if k in ("mlm", "wfh") else ""
        print(f"median {k} ratio: {med:.3f}{marker}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
