"""Result persistence: fixed-schema CSVs, markdown tables, run manifests."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .. import __version__
from ..metrics import MetricsReport, format_float
from ..transforms import codec_metadata
from .config import config_hash

_METRICS = list(MetricsReport.FIELDS)

# One column list per CSV kind; writers refuse rows that do not match.
SCHEMAS: dict[str, list[str]] = {
    "effectiveness": ["config_hash", "method", "surrogate", "label", *_METRICS],
    "effectiveness_images": ["config_hash", "method", "label", "image_id", "l2", "psnr", "ssim", "mse"],
    "robustness": ["config_hash", "method", "defense", *_METRICS],
    "reconstruction": [
        "config_hash", "method", "stage",
        "ssim_i", "psnr_i", "mse_i", "ssim_o", "psnr_o", "mse_o", "l2_o", "asr_o",
    ],
    "transfer": ["config_hash", "method", "source", "target", "l2", "asr"],
    "transfer_matrix": ["config_hash", "source", "*targets"],
    "colorspace": ["config_hash", "space", "transform", "l2", "asr"],
    "colorspace_lid": ["config_hash", "space", "k", "auc"],
    "ablation": ["config_hash", "epsilon", "l2", "asr", "linf"],
    "spectra": ["config_hash", "panel", "hf_ratio"],
}


@dataclass
class ResultRecord:
    experiment: str
    method: str
    transform: str
    report: MetricsReport
    rows: list[dict[str, Any]] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=codec_metadata)
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    config_hash: str = ""


def _cell(v: Any) -> str:
    if isinstance(v, float):
        return format_float(v)
    return str(v)


def render_csv(kind: str, rows: Iterable[Mapping[str, Any]], columns: Sequence[str] | None = None) -> str:
    schema = SCHEMAS[kind]
    columns = list(columns or schema)
    if schema[-1] == "*targets":
        # fixed leading columns, then one column per target surrogate
        ok = columns[: len(schema) - 1] == schema[:-1] and "*targets" not in columns
    else:
        ok = columns == schema
    if not ok:
        raise ValueError(f"{kind} CSV columns must follow {schema}, got {columns}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if set(row) != set(columns):
            raise ValueError(f"{kind} row keys {sorted(row)} do not match schema {columns}")
        writer.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def write_csv(path: Path, kind: str, rows: Iterable[Mapping[str, Any]], columns: Sequence[str] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # newline="" so the bytes are identical on every platform
    with open(path, "w", newline="") as fh:
        fh.write(render_csv(kind, rows, columns))
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def markdown_table(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(_cell(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def write_config(out: Path, raw: Mapping[str, Any]) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(out: Path, experiment: str, raw: Mapping[str, Any], files: Sequence[Path]) -> Path:
    manifest = {
        "experiment": experiment,
        "tool_version": __version__,
        "config_hash": config_hash(raw),
        "codec": codec_metadata(),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def verify_config_hash(out: "str | Path") -> bool:
    """True when every CSV under ``out`` carries the hash of the stored config.json."""
    out = Path(out)
    expected = config_hash(json.loads((out / "config.json").read_text()))
    for path in sorted(out.glob("*.csv")):
        for row in read_csv(path):
            if row.get("config_hash") != expected:
                return False
    return True


def parse_float(text: str) -> float:
    return math.inf if text == "inf" else float(text)
