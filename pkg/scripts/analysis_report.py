"""Attention-mass and embedding-spectrum report for a pre-training run.

Points at a run directory produced by `wordsight pretrain` (config.json,
dict.wfhd, model.ckpt), rebuilds the corpus from the echoed config, and
prints where scene-stream attention mass goes per layer plus the singular
value decay of the token embedding table.
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from wordsight import analysis
from wordsight.cli import model_from
from wordsight.config import corpus_from, resolve_config
from wordsight.model import load_checkpoint
from wordsight.vocab import load_dictionary


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", help="pretrain output directory")
    ap.add_argument("--split", default="finetune-test")
    args = ap.parse_args()

    with open(os.path.join(args.run_dir, "config.json")) as f:
        cfg = resolve_config(None, json.load(f))
    corpus = corpus_from(cfg)
    dictionary = load_dictionary(os.path.join(args.run_dir, "dict.wfhd"))
    model = model_from(cfg, corpus, dictionary)
    load_checkpoint(model.parameters(), os.path.join(args.run_dir, "model.ckpt"))

    scenes = corpus.splits[args.split].scenes
    report = analysis.attention_mass(
        model, scenes, include_attributes=cfg.include_attributes
    )
    print(f"attention mass over {len(scenes)} '{args.split}' scenes")
    print(f"{'layer':>5}  {'bucket':<18}  mass")
    for layer, cat, mass in report.to_rows():
        print(f"{layer:>5}  {cat:<18}  {mass:.4f}")

    spectrum = analysis.embedding_spectrum(model)
    print("\ntoken embedding singular values (normalized to the largest)")
    for i, v in enumerate(spectrum.normalized):
        print(f"{i:>5}  {v:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
