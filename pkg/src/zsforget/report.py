"""Rendering of evaluation reports as JSON, aligned text tables and TSV."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .encoders import InputError
from .evaluation import FORGETTING_TYPES, EvalReport

REPORT_SCHEMA = 1
FORMATS = ("json", "txt", "tsv")


def bf_af(bf: float, af: float) -> str:
    return f"{bf:.3f} → {af:.3f}"


def _dataset_columns(rows: Sequence[EvalReport]) -> list[str]:
    names: list[str] = []
    for r in rows:
        for name in r.cross_dataset_acc:
            if name not in names:
                names.append(name)
    return names


def table_rows(rows: Sequence[EvalReport]) -> tuple[list[str], list[list[str]]]:
    """Header and cells: method, dataset, type, target/other and per-dataset BF → AF."""
    extra = _dataset_columns(rows)
    header = ["Method", "Dataset", "Forgetting Type", "Target", "Target BF → AF", "Other BF → AF"]
    header += [f"{name} BF → AF" for name in extra]
    cells = []
    for r in rows:
        line = [
            r.method,
            r.dataset,
            FORGETTING_TYPES[r.forgetting_type],
            r.target_class,
            bf_af(r.target_acc_bf, r.target_acc_af),
            bf_af(r.other_acc_bf, r.other_acc_af),
        ]
        for name in extra:
            line.append(bf_af(*r.cross_dataset_acc[name]) if name in r.cross_dataset_acc else "-")
        cells.append(line)
    return header, cells


def format_text(rows: Sequence[EvalReport]) -> str:
    header, cells = table_rows(rows)
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(header)]
    fmt = lambda cols: "  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()
    out = [fmt(header), fmt(["-" * w for w in widths])]
    out += [fmt(c) for c in cells]
    many = len({r.method for r in rows}) > 1
    tag = lambda r: f"{r.method}: {r.target_class}" if many else r.target_class
    verdicts = [(tag(r), v) for r in rows for v in r.verdicts]
    if verdicts:
        out.append("")
        out += [f"verification [{cls}]: {v}" for cls, v in verdicts]
    retrieval = [(tag(r), r.retrieval) for r in rows if r.retrieval]
    for cls, ret in retrieval:
        keys = sorted(ret.get("bf", {}), key=_retrieval_key)
        parts = [f"{k} {bf_af(ret['bf'][k], ret['af'][k])}" for k in keys if k in ret.get("af", {})]
        if parts:
            out.append(f"retrieval [{cls}]: " + ", ".join(parts))
    return "\n".join(out) + "\n"


def _retrieval_key(name: str):
    prefix, _, k = name.partition("@")
    return (prefix, int(k) if k.isdigit() else 0, name)


def format_tsv(rows: Sequence[EvalReport]) -> str:
    extra = _dataset_columns(rows)
    header = ["method", "dataset", "forgetting_type", "target_class"]
    header += ["target_bf", "target_af", "other_bf", "other_af"]
    header += [f"{n}_{t}" for n in extra for t in ("bf", "af")]
    lines = ["\t".join(header)]
    for r in rows:
        vals = [r.method, r.dataset, r.forgetting_type, r.target_class]
        vals += [f"{v:.6f}" for v in (r.target_acc_bf, r.target_acc_af, r.other_acc_bf, r.other_acc_af)]
        for n in extra:
            pair = r.cross_dataset_acc.get(n)
            vals += [f"{v:.6f}" for v in pair] if pair else ["", ""]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def report_document(rows: Sequence[EvalReport], **extra) -> dict:
    return {"schema_version": REPORT_SCHEMA, "rows": [r.to_dict() for r in rows], **extra}


def format_json(rows: Sequence[EvalReport], **extra) -> str:
    return json.dumps(report_document(rows, **extra), indent=2, sort_keys=True) + "\n"


def load_report(path) -> tuple[list[EvalReport], dict]:
    """Rows and remaining top-level fields of a ``report.json``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != REPORT_SCHEMA:
        raise InputError(f"{path}: unsupported report schema {doc.get('schema_version')!r}")
    rows = [EvalReport.from_dict(r) for r in doc["rows"]]
    rest = {k: v for k, v in doc.items() if k not in ("rows", "schema_version")}
    return rows, rest


def emit_report(rows, out_dir, formats: Sequence[str] = ("json", "txt"), stem: str = "report", **extra) -> list[Path]:
    """Write the report in each requested format; returns the written paths."""
    if isinstance(rows, EvalReport):
        rows = [rows]
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise InputError(f"unknown report formats {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writers = {"json": lambda: format_json(rows, **extra), "txt": lambda: format_text(rows), "tsv": lambda: format_tsv(rows)}
    paths = []
    for fmt in formats:
        path = out_dir / f"{stem}.{fmt}"
        path.write_text(writers[fmt](), encoding="utf-8")
        paths.append(path)
    return paths
