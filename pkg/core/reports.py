"""
报告输出模块

命令结果统一包装为 ReportEnvelope，可渲染为人读表格、CSV 或 JSON
"""

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

REPORT_SCHEMA_VERSION = 1
OUTPUT_FORMATS = ("table", "json", "csv")


@dataclass(frozen=True)
class ReportEnvelope:
    """命令输出的统一外壳"""
    command: str
    config_digest: str
    results: Any
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> Dict:
        return {
            "command": self.command,
            "config_digest": self.config_digest,
            "schema_version": self.schema_version,
            "results": self.results,
        }


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def render_json(envelope: ReportEnvelope) -> str:
    return json.dumps(_json_safe(envelope.to_dict()), ensure_ascii=False, indent=2, sort_keys=False) + "\n"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_csv(columns: Sequence[str], rows: Sequence[Dict]) -> str:
    """CSV 文本，空行集只输出表头"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buffer.getvalue()


def render_table(columns: Sequence[str], rows: Sequence[Dict], title: Optional[str] = None) -> str:
    """等宽对齐的文本表格"""
    cells: List[List[str]] = [[_cell(row.get(c)) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for r in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_mapping(mapping: Dict, title: Optional[str] = None) -> str:
    """键值对形式的摘要"""
    rows = [{"key": k, "value": v} for k, v in mapping.items() if not isinstance(v, (dict, list))]
    return render_table(("key", "value"), rows, title)


def render(envelope: ReportEnvelope, fmt: str, columns: Sequence[str], rows: Sequence[Dict],
           title: Optional[str] = None) -> str:
    """
    按输出格式渲染

    Args:
        envelope: json 格式使用的完整结果
        fmt: table | json | csv
        columns / rows: table 与 csv 格式使用的行数据
    """
    if fmt == "json":
        return render_json(envelope)
    if fmt == "csv":
        return render_csv(columns, rows)
    return render_table(columns, rows, title)
