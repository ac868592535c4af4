"""
时间线导出

生成 Chrome Trace Format（trace-event JSON），可直接在 chrome://tracing 或 Perfetto 中打开。
时间戳单位为微秒；每个图阶段（forward / backward）是一个进程，每个资源通道是一个线程。
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

from .pipeline_schedule import PipelineEvent
from .scheduler import Timeline

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1
_US = 1e6


class TraceFormatter:
    """按 trace-event 格式累积事件"""

    def __init__(self):
        self._events: List[Dict] = []
        self._metadata: List[Dict] = []

    def emit_pid(self, name: str, pid: int):
        self._metadata.append({"name": "process_name", "ph": "M", "pid": pid, "args": {"name": name}})

    def emit_tid(self, name: str, pid: int, tid: int):
        self._metadata.append({"name": "thread_name", "ph": "M", "pid": pid, "tid": tid,
                               "args": {"name": name}})

    def emit_region(self, start: float, duration: float, pid: int, tid: int,
                    category: str, name: str, args: Dict):
        """添加一个区间事件，start 与 duration 单位为秒"""
        self._events.append({
            "ph": "X",
            "cat": category,
            "name": name,
            "pid": pid,
            "tid": tid,
            "ts": start * _US,
            "dur": duration * _US,
            "args": args,
        })

    def to_dict(self) -> Dict:
        return {
            "traceEvents": self._metadata + self._events,
            "displayTimeUnit": "ms",
            "otherData": {"schema_version": TRACE_SCHEMA_VERSION},
        }


def timeline_trace(timelines: Mapping[str, Timeline]) -> Dict:
    """
    把若干时间线写入同一个 trace

    Args:
        timelines: 阶段名 → Timeline，例如 {"forward": ..., "backward": ...}
    """
    formatter = TraceFormatter()
    for pid, (phase, timeline) in enumerate(timelines.items()):
        formatter.emit_pid(phase, pid)
        lanes = sorted({event.resource for event in timeline.events})
        for tid, lane in enumerate(lanes):
            formatter.emit_tid(lane, pid, tid)
        for event in timeline.events:
            formatter.emit_region(event.start, event.duration, pid, lanes.index(event.resource),
                                  event.resource, event.name, {"node_id": event.node_id})
    return formatter.to_dict()


def pipeline_trace(events: Sequence[PipelineEvent]) -> Dict:
    """流水线模拟结果，每个阶段一个线程"""
    formatter = TraceFormatter()
    formatter.emit_pid("pipeline", 0)
    for stage in sorted({e.stage for e in events}):
        formatter.emit_tid(f"stage {stage}", 0, stage)
    for e in events:
        formatter.emit_region(e.start, e.end - e.start, 0, e.stage, e.phase,
                              f"{e.phase}{e.microbatch}.{e.chunk}",
                              {"microbatch": e.microbatch, "chunk": e.chunk})
    return formatter.to_dict()


def write_trace(path, trace: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(trace, f, ensure_ascii=False, indent=1)
    logger.info("trace 已写入 %s（%d 个事件）", path, len(trace["traceEvents"]))
    return path


def trace_violations(trace: Dict, tolerance: float = 1e-6) -> List[Tuple[Dict, Dict]]:
    """同一 (pid, tid) 上时间重叠的区间事件对，tolerance 单位为微秒"""
    lanes: Dict[Tuple[int, int], List[Dict]] = {}
    for event in trace["traceEvents"]:
        if event.get("ph") == "X" and event["dur"] > 0:
            lanes.setdefault((event["pid"], event["tid"]), []).append(event)
    violations = []
    for events in lanes.values():
        events.sort(key=lambda e: e["ts"])
        for prev, cur in zip(events, events[1:]):
            if cur["ts"] < prev["ts"] + prev["dur"] - tolerance:
                violations.append((prev, cur))
    return violations
