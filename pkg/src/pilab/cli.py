"""Command-line entry point: ``pilab <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

from . import experiments as ex
from .contrastive_eval import SETUPS, build_challenge_set, eval_recall
from .downstream import FinetuneConfig, evaluate_downstream, finetune, load_qa, save_qa
from .errors import (ConfigError, DataError, FormatError, PilabError, ProtocolError,
                     ValidationError)
from .model import load_checkpoint, save_checkpoint
from .probe import VARIANTS, ProbeConfig, evaluate_mpe, split_by_hash, train_probe
from .report import emit_report, load_report_file, load_reports, save_report
from .scene_gen import SceneConfig, load_corpus, save_corpus

log = logging.getLogger("pilab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, ValidationError, FormatError, ProtocolError, DataError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return cfg


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _writable(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _desk(args, cfg: dict) -> ex.DeskConfig:
    desk = ex.DeskConfig.from_dict(cfg.get("desk", {}))
    if getattr(args, "steps", None) is not None:
        desk = replace(desk, pretrain_steps=args.steps)
    return desk


def cmd_gen_data(args, cfg):
    scene_cfg = SceneConfig.from_dict({**asdict(ex.DeskConfig().scene_config()),
                                       **cfg.get("scene", {})})
    if args.objects is not None:
        scene_cfg = replace(scene_cfg, n_objects=args.objects)
    corpus = ex.make_corpus(scene_cfg, args.scenes, args.seed)
    out = save_corpus(corpus, args.out)
    items = ex.make_qa(corpus, args.seed)
    save_qa(items, out / "qa.jsonl")
    print(f"wrote {len(corpus.scenes)} scenes and {len(items)} questions to {out}")


def cmd_pretrain(args, cfg):
    corpus = load_corpus(_existing(args.corpus, "corpus"))
    desk = _desk(args, cfg)
    train_split, _ = split_by_hash(corpus.scenes, desk.eval_fraction)
    ckpt, curve = ex.pretrain(corpus.subset(train_split), args.pi_mode, args.variant, args.seed,
                              desk, overrides=cfg)
    save_checkpoint(ckpt, _writable(args.out))
    if args.curve:
        _writable(args.curve).write_text(curve_tsv(curve))
    print(f"pre-trained {args.pi_mode}/{args.variant} for {ckpt.step} steps -> {args.out}")


def curve_tsv(curve: Sequence[dict]) -> str:
    """Loss curve as tab-separated text, one row per step; blank cells when undefined."""
    cols = list(dict.fromkeys(k for row in curve for k in row))
    cell = lambda v: "" if v is None else (str(v) if isinstance(v, int) else f"{v:.6g}")  # noqa: E731
    return "\n".join(["\t".join(cols)] + ["\t".join(cell(r.get(c)) for c in cols)
                                          for r in curve]) + "\n"


def cmd_probe(args, cfg):
    ckpt_path = _existing(args.checkpoint, "checkpoint")
    corpus = load_corpus(_existing(args.corpus, "corpus"))
    ckpt = load_checkpoint(ckpt_path)
    pcfg = ProbeConfig.from_dict(cfg.get("probe", {}))
    train_split, eval_split = split_by_hash(corpus.scenes, pcfg.eval_fraction)
    probed = train_probe(ckpt, train_split, args.seed, pcfg)
    if args.probed_out:
        save_checkpoint(probed, _writable(args.probed_out))
    report = evaluate_mpe(probed, eval_split, args.variant)
    save_report(report, _writable(args.out))
    print(f"XYZ {100 * report.acc_xyz:.1f}  XY {100 * report.acc_xy:.1f}  "
          f"Z {100 * report.acc_z:.1f}")


def cmd_eval_contrastive(args, cfg):
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    corpus = load_corpus(_existing(args.corpus, "corpus"))
    _, eval_split = split_by_hash(corpus.scenes, ex.DeskConfig().eval_fraction)
    held = corpus.subset(eval_split)
    results = []
    for setup in SETUPS:
        items = build_challenge_set(held, setup, args.seed)
        results.append(eval_recall(ckpt, items, held, variant=args.variant))
    out = _writable(args.out)
    out.write_text(json.dumps([r.to_dict() for r in results], sort_keys=True, indent=1) + "\n")
    print("  ".join(f"{r.setup} {100 * r.recall:.1f}" for r in results))


def cmd_eval_downstream(args, cfg):
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    corpus_dir = _existing(args.corpus, "corpus")
    corpus = load_corpus(corpus_dir)
    qa_path = Path(args.qa) if args.qa else corpus_dir / "qa.jsonl"
    items = load_qa(_existing(str(qa_path), "QA file"))
    fcfg = FinetuneConfig.from_dict({**asdict(ex.DeskConfig().finetune_config()),
                                     **cfg.get("finetune", {}), "seed": args.seed})
    if args.steps is not None:
        fcfg = replace(fcfg, steps=args.steps)
    train_items, eval_items = ex.split_qa(items, corpus)
    tuned, _ = finetune(ckpt, train_items, corpus, fcfg)
    report = evaluate_downstream(tuned, eval_items, corpus, args.variant)
    save_report(report, _writable(args.out))
    print(f"top1 {100 * report.top1:.1f}  top5 {100 * report.top5:.1f}")


def cmd_report(args, cfg):
    src = _existing(args.inp, "report directory")
    reports = load_reports(src) if src.is_dir() else load_report_file(src)
    sys.stdout.write(emit_report(reports, args.format, args.per_task))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pilab", description="Positional-information probing pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
        sp.add_argument("--config", help="JSON file with config overrides")
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic corpus"))
    g.add_argument("--scenes", type=int, default=500)
    g.add_argument("--objects", type=int, default=None, help="objects per scene")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("pretrain", help="pre-train a model on a corpus"))
    t.add_argument("--corpus", required=True)
    t.add_argument("--pi-mode", default="xy", choices=["none", "xy", "bbox", "bbox_d"])
    t.add_argument("--variant", default="plain", choices=VARIANTS)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--curve", help="optional path for a tab-separated loss curve")
    t.set_defaults(func=cmd_pretrain)

    r = common(sub.add_parser("probe", help="train and evaluate the PI-head probe"))
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--variant", default="plain", choices=VARIANTS)
    r.add_argument("--out", required=True, help="MPE report path")
    r.add_argument("--probed-out", help="optional path for the probed checkpoint")
    r.set_defaults(func=cmd_probe)

    c = common(sub.add_parser("eval-contrastive", help="recall on the contrastive challenge sets"))
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--variant", default="plain", choices=VARIANTS)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_eval_contrastive)

    d = common(sub.add_parser("eval-downstream", help="fine-tune and evaluate on synthetic QA"))
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--qa", help="QA file (default: <corpus>/qa.jsonl)")
    d.add_argument("--variant", default="plain", choices=VARIANTS)
    d.add_argument("--steps", type=int, default=None)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_eval_downstream)

    e = common(sub.add_parser("report", help="render saved reports as tables"), seed=False)
    e.add_argument("--in", dest="inp", required=True, help="report file or directory")
    e.add_argument("--format", default="tsv", choices=["tsv", "table"])
    e.add_argument("--per-task", action="store_true", help="add per-task MPE columns")
    e.set_defaults(func=cmd_report)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _read_config(args.config)
        if getattr(args, "seed", 0) < 0:
            raise ConfigError("--seed must be non-negative")
        args.func(args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PilabError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
