"""Command-line driver.

    cande prepare        --config CFG [--out DIR] [--seed N]
    cande train-disc     --config CFG [--embed-size N]
    cande extract-embed  --config CFG [--embed-size N]
    cande train-ae       --config CFG --variant NAME [--embed-size N]
    cande evaluate       --config CFG
    cande run-all        --config CFG

Failures print one line ``error: <CODE>: <message>`` to stderr and exit 2.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import CandeError, ConfigError

log = logging.getLogger("cande")

EXIT_ERROR = 2


def _load(args) -> tuple[pipeline.ExperimentConfig, Path]:
    cfg = pipeline.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.raw["seed"] = args.seed
    out = args.out or cfg.raw.get("out")
    if not out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    out = Path(out) if args.out else cfg.path(out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _sizes(args):
    return None if args.embed_size is None else [args.embed_size]


def cmd_prepare(args):
    cfg, out = _load(args)
    splits = pipeline.prepare(cfg, out)
    for c in splits.context_ids:
        n = {s: len(splits.get(c, s)) for s in splits.SPLITS}
        print(f"context {c}: train={n['train']} val={n['val']} test={n['test']}")


def cmd_train_disc(args):
    cfg, out = _load(args)
    accs = pipeline.train_discriminators(cfg, out, _sizes(args))
    print((out / "reports" / "discriminator_accuracy.txt").read_text(encoding="utf-8"), end="")
    return accs


def cmd_extract_embed(args):
    cfg, out = _load(args)
    for p, table in pipeline.extract_embeddings(cfg, out, _sizes(args)).items():
        print(f"embed_{p}: {len(table)} contexts, dim {table.dim}")


def cmd_train_ae(args):
    cfg, out = _load(args)
    for path in pipeline.train_autoencoders(cfg, out, args.variant, _sizes(args)):
        print(path.relative_to(out))


def cmd_evaluate(args):
    cfg, out = _load(args)
    report = pipeline.evaluate(cfg, out)
    print(report.to_text(), end="")


def cmd_run_all(args):
    cfg, out = _load(args)
    report = pipeline.run_all(cfg, out)
    print(report.to_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cande", description="Context-aware novelty detection autoencoders")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="run directory (overrides the config's 'out')")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.set_defaults(func=func)
        return p

    add("prepare", cmd_prepare, "materialise per-context train/val/test splits")
    add("train-disc", cmd_train_disc, "train context discriminators").add_argument(
        "--embed-size", type=int, help="only this penultimate width")
    add("extract-embed", cmd_extract_embed, "compute per-context embedding tables").add_argument(
        "--embed-size", type=int, help="only this penultimate width")
    p = add("train-ae", cmd_train_ae, "train autoencoders of one roster variant")
    p.add_argument("--variant", required=True, choices=pipeline.VARIANTS)
    p.add_argument("--embed-size", type=int, help="for cande-embed: only this embedding size")
    add("evaluate", cmd_evaluate, "score test splits and write AUC reports")
    add("run-all", cmd_run_all, "run every stage in order")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CandeError as exc:
        print(f"error: {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    except FileNotFoundError as exc:
        print(f"error: MISSING_INPUT: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, KeyError, IndexError) as exc:
        print(f"error: INVALID_INPUT: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
