"""Report files and their rendering as delimited or aligned tables."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

from .contrastive_eval import SETUPS, RecallResult
from .downstream import POSITIONAL_SUBSET, DownstreamReport
from .encoding import ALL_MODES, PIMode
from .errors import FormatError
from .geometry import TASK_NAMES
from .keywords import AXES
from .probe import VARIANTS, MPEReport

REPORT_VERSION = 1
KINDS = {"mpe": MPEReport, "contrastive": RecallResult, "downstream": DownstreamReport}
VARIANT_TITLES = {"plain": "plain pre-training", "pip_cl": "PIP + CL pre-training"}


def save_report(report, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    return path


def report_from_dict(d: dict):
    kind = d.get("kind")
    if kind not in KINDS:
        raise FormatError(f"unknown report kind {kind!r}")
    if d.get("version") != REPORT_VERSION:
        raise FormatError(f"unsupported {kind} report version {d.get('version')!r}")
    try:
        return KINDS[kind].from_dict(d)
    except TypeError as exc:
        raise FormatError(f"malformed {kind} report: {exc}") from None


def load_report(path):
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read report {path}: {exc}") from None
    return report_from_dict(d)


def load_report_file(path) -> list:
    """Reports stored in one file, either a single object or a list of them."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read report {path}: {exc}") from None
    return [report_from_dict(d) for d in (data if isinstance(data, list) else [data])]


def load_reports(directory) -> list:
    """Every report under ``directory``; JSON files that are not reports are skipped."""
    out = []
    for p in sorted(Path(directory).rglob("*.json")):
        data = json.loads(p.read_text())
        for d in data if isinstance(data, list) else [data]:
            if isinstance(d, dict) and "kind" in d:
                out.append(report_from_dict(d))
    return out


def pct(x) -> str:
    return "-" if x is None else f"{100 * x:.1f}"


def _sort_key(mode: str) -> int:
    return [m.value for m in ALL_MODES].index(mode)


def mpe_rows(reports: Sequence[MPEReport], per_task: bool = False):
    header = ["variant", "PI"] + (list(TASK_NAMES) if per_task else []) + \
        ["XYZ Acc", "XY Acc", "Z Acc"]
    rows = []
    for v in VARIANTS:
        for r in sorted((r for r in reports if r.pretrain_variant == v),
                        key=lambda r: _sort_key(r.pi_mode)):
            tasks = [pct(a) for a in r.acc_per_task] if per_task else []
            rows.append([v, PIMode(r.pi_mode).label, *tasks, pct(r.acc_xyz), pct(r.acc_xy),
                         pct(r.acc_z)])
    return header, rows


def contrastive_rows(results: Sequence[RecallResult]):
    header = ["variant", "PI", "Random", "Antonym"]
    cells: dict = {}
    for r in results:
        cells.setdefault((r.pretrain_variant, r.pi_mode), {})[r.setup] = r.recall
    rows = []
    for (v, m) in sorted(cells, key=lambda k: (VARIANTS.index(k[0]), _sort_key(k[1]))):
        rows.append([v, PIMode(m).label] + [pct(cells[(v, m)].get(s)) for s in SETUPS])
    return header, rows


def downstream_rows(reports: Sequence[DownstreamReport]):
    subsets = [*AXES, POSITIONAL_SUBSET]
    header = ["variant", "PI", "Top 1", *subsets, "Top 5"]
    rows = []
    for r in sorted(reports, key=lambda r: (VARIANTS.index(r.pretrain_variant),
                                            _sort_key(r.pi_mode))):
        rows.append([r.pretrain_variant, PIMode(r.pi_mode).label, pct(r.top1),
                     *[pct(r.subset_acc.get(s)) for s in subsets], pct(r.top5)])
    return header, rows


def render(header, rows, fmt: str = "tsv") -> str:
    if fmt == "tsv":
        return "\n".join("\t".join(r) for r in [header, *rows])
    if fmt != "table":
        raise FormatError(f"unknown format {fmt!r}")
    widths = [max(len(str(r[k])) for r in [header, *rows]) for k in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    out = [line(header), "  ".join("-" * w for w in widths)]
    prev = None
    for r in rows:
        if prev is not None and r[0] != prev:
            out.append("")
        out.append(line(r))
        prev = r[0]
    return "\n".join(out)


def emit_report(reports: Iterable, fmt: str = "tsv", per_task: bool = False) -> str:
    """Render reports, one table per kind, in a fixed kind order."""
    reports = list(reports)
    if not reports:
        raise FormatError("no reports to emit")
    by_kind: dict = {}
    for r in reports:
        d = r.to_dict()
        if d.get("version") != REPORT_VERSION:
            raise FormatError(f"report version {d.get('version')!r} cannot be mixed with "
                              f"version {REPORT_VERSION}")
        by_kind.setdefault(d["kind"], []).append(r)
    builders = {"mpe": lambda rs: mpe_rows(rs, per_task), "contrastive": contrastive_rows,
                "downstream": downstream_rows}
    titles = {"mpe": "Mutual position classification", "contrastive": "Contrastive recall",
              "downstream": "Downstream QA"}
    blocks = []
    for kind in KINDS:
        if kind in by_kind:
            blocks.append(f"# {titles[kind]}\n" + render(*builders[kind](by_kind[kind]), fmt))
    return "\n\n".join(blocks) + "\n"
