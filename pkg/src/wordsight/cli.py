"""Command-line entry point wiring corpus generation, dictionary building,
pre-training, fine-tuning, evaluation, analysis probes, gradient checking,
and the baseline-vs-full comparison.

Flags are kebab-case. Every RunConfig field is settable as a flag; a JSON
config file (--config) sits between preset and flags in precedence. Commands
that produce artifacts echo the resolved configuration next to them
(config.json inside a run directory, <file>.config.json beside a file).

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 assertion
failure (gradcheck or --assert thresholds).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import analysis
from . import corpus as cp
from . import nnmath as nn
from . import objectives as obj
from . import tasks
from .config import (
    ConfigError,
    RunConfig,
    corpus_from,
    finetune_config_from,
    load_config_file,
    model_config_from,
    resolve_config,
    train_config_from,
    write_config,
)
from .model import PretrainModel, load_checkpoint
from .train import run_finetune, run_pretraining, task_accuracy
from .vocab import DictionaryFormatError, build_dictionary, load_dictionary, save_dictionary

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ASSERT = 4

# rng lane for dictionary building (corpus uses 0-5, model init 10-13,
# training 20-24)
_LANE_DICT = 30

_RECALL_HEADER = "direction,K,recall,split,domain"


class IOFailure(RuntimeError):
    """A required artifact could not be read or written."""


class _Parser(argparse.ArgumentParser):
    # argparse exits the process on bad flags; surface a ConfigError instead
    def error(self, message):
        raise ConfigError(f"{message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

# spec-shaped short flags -> RunConfig fields
_SHORT_FLAGS = {
    "objects": "n_objects",
    "attrs": "n_attributes",
    "dv": "d_v",
    "scenes": "n_pretrain_scenes",
    "captions": "n_pretrain_captions",
    "C": "dict_size",
    "momentum": "dict_momentum",
    "epochs": "dict_epochs",
}

_BOOL_FIELDS = ("use_hallucinator", "include_attributes")


def _add_config_flags(p: argparse.ArgumentParser, short: tuple[str, ...] = ()) -> None:
    p.add_argument("--preset", default=None, help="desk-scale, paper-scale, or micro")
    p.add_argument("--config", default=None, help="JSON file of config keys")
    for name in RunConfig().to_mapping():
        if name in _BOOL_FIELDS:
            continue
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", default=None)
    p.add_argument(
        "--disable-attributes", action="store_true",
        help="drop the attribute summand from fused tag rows",
    )
    p.add_argument(
        "--disable-hallucinator-for-s1", action="store_true",
        help="baseline: no hallucination rows, no regression loss",
    )
    for flag in short:
        p.add_argument(f"--{flag}", dest=f"cfg_{_SHORT_FLAGS[flag]}", default=None)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for key, val in vars(args).items():
        if key.startswith("cfg_") and val is not None:
            overrides[key[len("cfg_"):]] = val
    if getattr(args, "disable_attributes", False):
        overrides["include_attributes"] = False
    if getattr(args, "disable_hallucinator_for_s1", False):
        overrides["use_hallucinator"] = False
    mapping = load_config_file(args.config) if args.config else None
    return resolve_config(preset=args.preset, file_mapping=mapping, overrides=overrides)


def _echo_config_dir(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_config(cfg, os.path.join(out_dir, "config.json"))


def _echo_config_file(cfg: RunConfig, out_file: str) -> None:
    parent = os.path.dirname(out_file)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_config(cfg, out_file + ".config.json")


# ---------------------------------------------------------------------------
# pipeline builders shared by the subcommands and the test harness
# ---------------------------------------------------------------------------


def dictionary_from(cfg: RunConfig, corpus: cp.Corpus):
    """K-means dictionary over the pre-training split's detector features."""
    feats = np.concatenate([sc.features for sc in corpus.splits["pretrain"].scenes])
    return build_dictionary(
        feats, cfg.dict_size, cfg.dict_momentum, cfg.dict_epochs,
        np.random.default_rng([cfg.seed, _LANE_DICT]),
    )


def model_from(cfg: RunConfig, corpus: cp.Corpus, dictionary) -> PretrainModel:
    _check_corpus_matches(cfg, corpus)
    return PretrainModel(model_config_from(cfg), dictionary, seed=cfg.seed)


def _check_corpus_matches(cfg: RunConfig, corpus: cp.Corpus) -> None:
    w = corpus.world
    pairs = (
        ("n_objects", w.n_objects), ("n_attributes", w.n_attributes),
        ("d_v", w.d_v), ("n_fillers", w.n_fillers),
        ("n_regions", corpus.n_regions), ("l_max", corpus.l_max),
    )
    for name, actual in pairs:
        if getattr(cfg, name) != actual:
            raise ConfigError(
                f"config {name}={getattr(cfg, name)} does not match the "
                f"corpus artifact ({name}={actual}); align the config with "
                "the corpus or regenerate it"
            )


def _read_corpus(path: str) -> cp.Corpus:
    try:
        return cp.load_corpus(path)
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot read corpus {path}: {exc}") from exc


def _read_dictionary(path: str):
    try:
        return load_dictionary(path)
    except (OSError, DictionaryFormatError) as exc:
        raise IOFailure(f"cannot read dictionary {path}: {exc}") from exc


def _read_checkpoint(model: PretrainModel, path: str) -> None:
    try:
        load_checkpoint(model.parameters(), path)
    except (OSError, ValueError, UnicodeDecodeError) as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc


def _corpus_for(cfg: RunConfig, path: str | None) -> cp.Corpus:
    if path is None:
        return corpus_from(cfg)
    corpus = _read_corpus(path)
    _check_corpus_matches(cfg, corpus)
    return corpus


def _dictionary_for(cfg: RunConfig, corpus: cp.Corpus, path: str | None):
    if path is None:
        return dictionary_from(cfg, corpus)
    d = _read_dictionary(path)
    if d.entries.shape != (cfg.dict_size, cfg.d_v):
        raise ConfigError(
            f"dictionary shape {d.entries.shape} does not match config "
            f"(dict_size={cfg.dict_size}, d_v={cfg.d_v})"
        )
    return d


def _write_recall_csv(rows: list[tasks.RecallRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_RECALL_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.direction},{r.k},{r.recall!r},{r.split},{r.domain}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_corpus(args) -> int:
    cfg = _config_from_args(args)
    corpus = corpus_from(cfg)
    try:
        parent = os.path.dirname(args.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        cp.save_corpus(corpus, args.out)
    except OSError as exc:
        raise IOFailure(f"cannot write corpus {args.out}: {exc}") from exc
    _echo_config_file(cfg, args.out)
    n_sc = sum(len(s.scenes) for s in corpus.splits.values())
    print(f"wrote {args.out}: {n_sc} scenes across {len(corpus.splits)} splits")
    return EXIT_OK


def _cmd_vocab_build(args) -> int:
    cfg = _config_from_args(args)
    corpus = _read_corpus(args.corpus)
    d = dictionary_from(cfg, corpus)
    try:
        save_dictionary(d, args.out)
    except OSError as exc:
        raise IOFailure(f"cannot write dictionary {args.out}: {exc}") from exc
    _echo_config_file(cfg, args.out)
    print(f"wrote {args.out}: {d.entries.shape[0]} entries of dim {d.entries.shape[1]}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    corpus = _corpus_for(cfg, args.corpus)
    dictionary = _dictionary_for(cfg, corpus, args.vocab)
    model = model_from(cfg, corpus, dictionary)
    _echo_config_dir(cfg, args.out)
    save_dictionary(dictionary, os.path.join(args.out, "dict.wfhd"))
    rows = run_pretraining(
        model, corpus.splits["pretrain"], corpus.world.vocab,
        train_config_from(cfg), args.out, resume_from=args.resume_from,
    )
    last = rows[-1]
    print(
        f"pre-trained {last['step']} steps; final losses "
        f"mlm {last['mlm']:.4f} mtc {last['mtc']:.4f} "
        f"moc {last['moc']:.4f} wfh {last['wfh']:.4f}"
    )
    return EXIT_OK


def _cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    corpus = _corpus_for(cfg, args.corpus)
    dictionary = _dictionary_for(cfg, corpus, args.vocab)
    model = model_from(cfg, corpus, dictionary)
    _read_checkpoint(model, args.ckpt)
    _echo_config_dir(cfg, args.out)
    ft = finetune_config_from(cfg, task=args.task)
    rows, heads = run_finetune(
        model, corpus.splits["finetune-train"], ft,
        world=corpus.world, out_dir=args.out,
    )
    print(f"fine-tuned '{args.task}' for {len(rows)} steps; final loss {rows[-1]['loss']:.4f}")
    if heads is not None:
        acc = task_accuracy(
            model, heads, args.task, corpus.splits["finetune-test"].scenes,
            corpus.world, seed=cfg.seed,
        )
        with open(os.path.join(args.out, "aux_accuracy.csv"), "w", newline="") as fh:
            fh.write("task,split,accuracy\n")
            fh.write(f"{args.task},finetune-test,{acc!r}\n")
        print(f"held-out accuracy {acc:.3f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    corpus = _corpus_for(cfg, args.corpus)
    dictionary = _dictionary_for(cfg, corpus, args.vocab)
    model = model_from(cfg, corpus, dictionary)
    _read_checkpoint(model, args.ckpt)
    _echo_config_dir(cfg, args.out)
    head = tasks.retrieval_head(model, gamma=cfg.gamma)
    rows = tasks.cross_domain_eval(
        model, corpus.splits["finetune-test"], corpus.splits["shifted-domain"], head,
    )
    _write_recall_csv(rows, os.path.join(args.out, "recall.csv"))
    for r in rows:
        print(f"{r.direction} R@{r.k} {r.recall:6.2f}  ({r.split}, {r.domain}-domain)")
    if args.assert_thresholds:
        floor = float(args.min_r1)
        r1 = {
            r.direction: r.recall
            for r in rows
            if r.k == 1 and r.domain == "in"
        }
        bad = {d: v for d, v in r1.items() if v < floor}
        if bad:
            raise AssertionError(
                f"R@1 below threshold {floor}: "
                + ", ".join(f"{d}={v:.2f}" for d, v in sorted(bad.items()))
            )
        print(f"thresholds met: in-domain R@1 >= {floor} both directions")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    cfg = _config_from_args(args)
    corpus = _corpus_for(cfg, args.corpus)
    dictionary = _dictionary_for(cfg, corpus, args.vocab)
    model = model_from(cfg, corpus, dictionary)
    _read_checkpoint(model, args.ckpt)
    _echo_config_dir(cfg, args.out_dir)
    scenes = corpus.splits["finetune-test"].scenes
    report = analysis.attention_mass(
        model, scenes, include_attributes=cfg.include_attributes
    )
    analysis.write_attention_mass_csv(
        report, os.path.join(args.out_dir, "attention_mass.csv")
    )
    spectrum = analysis.embedding_spectrum(model)
    analysis.write_spectrum_csv(spectrum, os.path.join(args.out_dir, "spectrum.csv"))
    print(
        f"wrote attention_mass.csv ({len(report.layers)} layers over "
        f"{len(scenes)} scenes) and spectrum.csv ({len(spectrum.values)} values)"
    )
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    cfg = _config_from_args(args)
    corpus = corpus_from(cfg)
    dictionary = dictionary_from(cfg, corpus)
    dictionary.entries = dictionary.entries.astype(np.float64)
    model = PretrainModel(
        model_config_from(cfg), dictionary, seed=cfg.seed, dtype=np.float64
    )
    split = corpus.splits["pretrain"]
    batch = next(cp.make_batches(
        split, cfg.batch_size, paired=False,
        rng=np.random.default_rng([cfg.seed, 0]),
    ))
    plan = obj.plan_masks(
        batch, corpus.world.vocab, np.random.default_rng([cfg.seed, 1]), p=0.5
    )

    def loss():
        total, _, _ = obj.pretrain_losses(model, batch, plan, corpus.world.vocab)
        return total

    report = nn.check_gradients(loss, model.parameters(), seed=cfg.seed)
    print(report.summary())
    if not report.passed(1e-4):
        raise AssertionError(f"gradcheck failed: {report.summary()}")
    return EXIT_OK


def run_compare(cfg: RunConfig, out_dir: str) -> dict:
    """Train the full WFH configuration and the no-attribute, no-hallucinator
    baseline under one seed and corpus, then score retrieval on the held-out
    split. Returns {"full": rows, "baseline": rows, "delta": {(dir, k): pts}}.
    """
    corpus = corpus_from(cfg)
    dictionary = dictionary_from(cfg, corpus)
    arms = {
        "full": cfg.replace(use_hallucinator=True, include_attributes=True),
        "baseline": cfg.replace(use_hallucinator=False, include_attributes=False),
    }
    results: dict = {}
    for name, arm_cfg in arms.items():
        arm_dir = os.path.join(out_dir, name)
        _echo_config_dir(arm_cfg, arm_dir)
        model = model_from(arm_cfg, corpus, dictionary)
        run_pretraining(
            model, corpus.splits["pretrain"], corpus.world.vocab,
            train_config_from(arm_cfg), arm_dir,
        )
        run_finetune(
            model, corpus.splits["finetune-train"],
            finetune_config_from(arm_cfg), out_dir=arm_dir,
        )
        head = tasks.retrieval_head(model, gamma=arm_cfg.gamma)
        rows = tasks.recall_at_k(model, corpus.splits["finetune-test"], head)
        _write_recall_csv(rows, os.path.join(arm_dir, "recall.csv"))
        results[name] = rows
    delta = {}
    base_by_key = {(r.direction, r.k): r.recall for r in results["baseline"]}
    for r in results["full"]:
        delta[(r.direction, r.k)] = r.recall - base_by_key[(r.direction, r.k)]
    results["delta"] = delta
    with open(os.path.join(out_dir, "compare.csv"), "w", newline="") as fh:
        fh.write("direction,K,full,baseline,delta\n")
        for r in results["full"]:
            key = (r.direction, r.k)
            fh.write(
                f"{r.direction},{r.k},{r.recall!r},{base_by_key[key]!r},"
                f"{delta[key]!r}\n"
            )
    return results


def _cmd_compare(args) -> int:
    cfg = _config_from_args(args)
    _echo_config_dir(cfg, args.out)
    results = run_compare(cfg, args.out)
    print(f"{'':>4} {'K':>3} {'full':>7} {'baseline':>9} {'delta':>7}")
    base = {(r.direction, r.k): r.recall for r in results["baseline"]}
    for r in results["full"]:
        key = (r.direction, r.k)
        print(
            f"{r.direction:>4} {r.k:>3} {r.recall:7.2f} {base[key]:9.2f} "
            f"{results['delta'][key]:+7.2f}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="wordsight", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate and serialize a synthetic corpus")
    _add_config_flags(p, short=("objects", "attrs", "dv", "scenes", "captions"))
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_gen_corpus)

    p = sub.add_parser("vocab-build", help="k-means visual dictionary from a corpus")
    _add_config_flags(p, short=("C", "momentum", "epochs"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_vocab_build)

    p = sub.add_parser("pretrain", help="unpaired pre-training")
    _add_config_flags(p)
    p.add_argument("--corpus", default=None, help="corpus file (generated when omitted)")
    p.add_argument("--vocab", default=None, help="dictionary file (built when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume-from", default=None, help="train_state.ckpt to resume")
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("finetune", help="paired fine-tuning from a checkpoint")
    _add_config_flags(p)
    p.add_argument("--task", required=True, choices=("retrieval", "vqa", "ve", "rec"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_finetune)

    p = sub.add_parser("eval", help="retrieval recall tables")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--assert", dest="assert_thresholds", action="store_true",
        help="exit 4 unless in-domain R@1 meets --min-r1 in both directions",
    )
    p.add_argument("--min-r1", default=0.0)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("analyze", help="attention-mass and spectrum probes")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=_cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_gradcheck, preset_default="micro")

    p = sub.add_parser("compare", help="baseline vs full WFH under shared seeds")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_compare)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "preset", None) is None:
            args.preset = getattr(args, "preset_default", None)
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IOFailure as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AssertionError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT


def main() -> int:
    return dispatch(sys.argv[1:])
