"""Command-line surface.

Subcommands: synth-data, make-pretrain-data, pretrain, finetune, segment,
evaluate, gradcheck, consistency. Every subcommand accepts
``--config <path>`` (flat key = value file), ``--profile desk|full`` and
repeated ``--set key=value`` overrides. Exit status 0 on success;
failures print one machine-parsable ``error: ...`` line to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import RunConfig, VALID_KEYS, load_config
from .errors import VtsError
from .metrics import consistency_score, render_report
from .model import init_params, load_checkpoint

GRADCHECK_TOLERANCE = 1e-4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--profile", default=None, choices=["desk", "full"],
                   help="named model size profile applied before overrides")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help=f"override a config key (valid: see docs)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vtseg",
        description="Multimodal video topic segmentation: train, segment, evaluate.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a planted-topic synthetic corpus")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory (splits created inside)")

    p = sub.add_parser("make-pretrain-data",
                       help="build a pseudo-labeled corpus from unlabeled videos")
    _add_common(p)
    p.add_argument("--unlabeled", required=True, help="unlabeled corpus directory")
    p.add_argument("--labeled", required=True,
                   help="labeled corpus directory (source of topic durations)")
    p.add_argument("--out", required=True, help="pseudo corpus output directory")

    p = sub.add_parser("pretrain", help="pre-train on a pseudo-labeled corpus")
    _add_common(p)

    p = sub.add_parser("finetune", help="fine-tune on labeled data")
    _add_common(p)

    p = sub.add_parser("segment", help="predict boundaries for a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="corpus directory to segment")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--out", required=True, help="prediction records output path")

    p = sub.add_parser("evaluate", help="score prediction records against ground truth")
    _add_common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--corpus", required=True, help="ground-truth corpus directory")
    p.add_argument("--out", default=None, help="write the report here (default stdout)")

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full model gradients")
    _add_common(p)
    p.add_argument("--instances", type=int, default=3)

    p = sub.add_parser("consistency",
                       help="inter-annotator consistency over >= 2 annotation corpora")
    _add_common(p)
    p.add_argument("--annotations", nargs="+", required=True,
                   help="two or more corpus directories with labels for the same videos")
    return ap


def _cmd_synth_data(args, cfg: RunConfig) -> int:
    from .data import write_features
    from .synth import generate_synthetic_corpus

    corpus = generate_synthetic_corpus(cfg.synth, cfg.seed)
    for split, seqs in corpus.items():
        split_dir = os.path.join(args.out, split)
        os.makedirs(split_dir, exist_ok=True)
        for seq in seqs:
            write_features(split_dir, seq)
        print(f"wrote {len(seqs)} videos to {split_dir}")
    return 0


def _cmd_make_pretrain_data(args, cfg: RunConfig) -> int:
    from .data import read_corpus, write_features
    from .pseudo import build_pseudo_corpus, topic_durations, write_provenance

    unlabeled = read_corpus(args.unlabeled)
    labeled = read_corpus(args.labeled)
    durations = topic_durations(labeled)
    corpus, kde = build_pseudo_corpus(unlabeled, durations, cfg.seed,
                                      max_seq_len=cfg.model.max_seq_len)
    os.makedirs(args.out, exist_ok=True)
    for item in corpus:
        write_features(args.out, item.clips)
    write_provenance(os.path.join(args.out, "provenance.tsv"), corpus)
    print(f"wrote {len(corpus)} pseudo-labeled videos to {args.out} "
          f"(kde bandwidth {kde.bandwidth:.3f}s over {kde.samples.size} durations)")
    return 0


def _cmd_pretrain(args, cfg: RunConfig) -> int:
    from .train import run_pretrain

    out = run_pretrain(cfg)
    print(f"checkpoint written to {out}")
    return 0


def _cmd_finetune(args, cfg: RunConfig) -> int:
    from .train import run_finetune

    out = run_finetune(cfg)
    print(f"checkpoint written to {out}")
    return 0


def _cmd_segment(args, cfg: RunConfig) -> int:
    from .data import read_corpus, write_predictions
    from .train import segment_corpus

    params, model_cfg = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus)
    records = segment_corpus(params, model_cfg, corpus)
    write_predictions(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _cmd_evaluate(args, cfg: RunConfig) -> int:
    from .data import read_corpus, read_predictions
    from .train import evaluate_records

    records = read_predictions(args.predictions)
    corpus = read_corpus(args.corpus)
    report = evaluate_records(records, cfg, corpus)
    text = render_report(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"report written to {args.out}")
    else:
        print(text, end="")
    return 0


def _cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .autodiff import grad_check
    from .model import named_params
    from .train import sequence_loss
    from .model import ForwardMode

    model_cfg = cfg.model
    worst = 0.0
    for inst in range(args.instances):
        rng = np.random.default_rng(1000 + inst)
        n = 6
        params = init_params(model_cfg, seed=inst)
        visual = rng.standard_normal((n, model_cfg.visual_dim))
        text = rng.standard_normal((n, model_cfg.text_dim))
        labels = rng.integers(0, 2, size=n)
        labels[max(0, n - 3)] = 1  # ensure at least two topics for pair mining
        mask = np.ones(n, dtype=bool)
        mode = ForwardMode(training=True, deterministic=True)

        def objective():
            total, _, _ = sequence_loss(visual, text, mask, labels, params,
                                        model_cfg, mode, "finetune")
            return total

        err = grad_check(objective, named_params(params), h=1e-5,
                         max_entries_per_param=4, rng=np.random.default_rng(inst))
        worst = max(worst, err)
    print(f"gradcheck fusion_kind={model_cfg.fusion_kind} "
          f"max_relative_error={worst:.3e} tolerance={GRADCHECK_TOLERANCE:.0e}")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def _cmd_consistency(args, cfg: RunConfig) -> int:
    from .data import list_videos, read_features

    dirs = args.annotations
    if len(dirs) < 2:
        raise VtsError("consistency needs at least two annotation directories")
    vids = list_videos(dirs[0])
    scores = []
    for vid in vids:
        annots = [read_features(d, vid).segmentation() for d in dirs]
        score = consistency_score(annots)
        scores.append(score)
        print(f"{vid}\t{score:.4f}")
    print(f"mean\t{float(np.mean(scores)):.4f}")
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "make-pretrain-data": _cmd_make_pretrain_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "segment": _cmd_segment,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
    "consistency": _cmd_consistency,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config, args.overrides, args.profile)
        return _COMMANDS[args.command](args, cfg)
    except VtsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
