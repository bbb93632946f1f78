"""Shared argument handling for the table scripts."""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from pilab.experiments import DeskConfig
from pilab.report import emit_report, save_report


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default="results", help="directory for report JSON files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--desk", help="JSON file overriding desk config fields")
    p.add_argument("--steps", type=int, help="override the pre-training step count")
    p.add_argument("--format", default="table", choices=["table", "tsv"])
    return p


def desk_from(args, preset: DeskConfig) -> DeskConfig:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.desk:
        preset = replace(preset, **json.loads(Path(args.desk).read_text())).validate()
    if args.steps:
        preset = replace(preset, pretrain_steps=args.steps)
    return preset


def write(reports, out: str, stem: str, fmt: str):
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    for k, r in enumerate(reports):
        save_report(r, d / f"{stem}_{k:02d}.json")
    text = emit_report(reports, fmt)
    (d / f"{stem}.txt").write_text(text)
    print(text, end="")
