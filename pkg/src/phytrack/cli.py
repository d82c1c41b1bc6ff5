"""Command line: synthesise data, train, track and evaluate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_model
from .config import RunConfig, load_config
from .data_synth import ConfigError, corrupt_sequence, synth_sequence, tier_specs
from .metrics import EvaluationError, evaluate, write_report
from .motio import MotFormatError, list_frames, load_frame, read_mot, write_mot, write_sequence

log = logging.getLogger("phytrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    torch.set_num_threads(max(cfg.threads, 1))
    return cfg


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    manifest = []
    splits = [("train", cfg.train_sequences, cfg.num_frames, False),
              ("val", cfg.val_sequences, cfg.val_frames, True),
              ("test", cfg.test_sequences, cfg.test_frames, True)]
    for s_idx, (split, count, frames_n, noisy) in enumerate(splits):
        for n in range(1, count + 1):
            seq_seed = cfg.seed * 1000 + s_idx * 100 + n
            frames, gt = synth_sequence(cfg.sequence(seq_seed, frames_n))
            name = f"{split}-{n:02d}"
            variants = [("easy", None)]
            if noisy:
                variants = []
                for tier in cfg.tiers:
                    specs = tier_specs(tier)
                    variants.extend([(tier, None)] if not specs else [(tier, spec) for spec in specs])
            for tier, spec in variants:
                if spec is None:
                    seq_name, seq_frames, label = (f"{name}-easy" if noisy else name), frames, "none"
                else:
                    seq_name = f"{name}-{tier}-{spec.kind}"
                    seq_frames = corrupt_sequence(frames, spec, seq_seed)
                    label = spec.label
                write_sequence(out / split / seq_name, seq_frames, gt)
                manifest.append(f"{split}\t{seq_name}\t{tier}\t{label}\t{frames_n}")
    (out / "manifest.tsv").write_text("split\tsequence\ttier\tnoise\tframes\n" + "\n".join(manifest) + "\n",
                                      encoding="utf-8")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print("\n".join(manifest))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import load_training_sequences, train_model

    cfg = _resolve(args)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    sequences = load_training_sequences(args.data_dir)
    result = train_model(sequences, cfg.model(), cfg.training(), out, progress=True)
    last = result["history"][-1]
    print(f"trained {len(result['history'])} epochs in {result['seconds']:.0f}s; final total loss {last['total']:.4f}")
    return EXIT_OK


def cmd_track(args) -> int:
    from .render import write_overlay
    from .tracker import track_sequence

    cfg = _resolve(args)
    paths = list_frames(args.seq_dir)
    if not paths:
        raise FileNotFoundError(f"no frames found in {args.seq_dir}")
    model, _ = load_model(args.checkpoint)
    frames = [load_frame(p) for p in paths]
    on_frame = None
    if args.render:
        on_frame = lambda t, frame, rows: write_overlay(args.render, t, frame, rows)  # noqa: E731
    rows = track_sequence(model, frames, cfg.tracker(), on_frame=on_frame)
    out = write_mot(rows, args.out)
    out.with_name(out.name + ".config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print(f"{len(rows)} rows over {len(frames)} frames -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt_path, pred_path = Path(args.gt), Path(args.pred)
    for p in (gt_path, pred_path):
        if not p.is_file():
            raise FileNotFoundError(f"file not found: {p}")
    report = evaluate(read_mot(gt_path), read_mot(pred_path))
    if args.out:
        write_report(report, args.out)
    print(report.to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phytrack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on sequences with ground truth")
    p.add_argument("data_dir")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory for checkpoints and loss.csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the online tracker over one sequence")
    p.add_argument("checkpoint")
    p.add_argument("seq_dir")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--render")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="CLEAR-MOT evaluation of a result file")
    p.add_argument("gt")
    p.add_argument("pred")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    from .train import NumericError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, MotFormatError, CheckpointError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
