"""
算子调度模块

在已计价的算子图上生成时间线：
- serial：拓扑序依次执行，只有一条执行通道
- inter_op：表调度，计算 / 节点内通信 / 节点间通信三类资源并发；
  就绪节点按最长剩余路径优先，编号小者优先；任一资源空闲时立即开始就绪节点
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .errors import SchedulingError
from .op_graph import COMPUTE_KINDS, OpGraph, OpKind, StreamClass

logger = logging.getLogger(__name__)

SCHEDULE_MODES = ("serial", "inter_op")
SERIAL_LANE = "serial"


@dataclass(frozen=True)
class Event:
    node_id: int
    name: str
    start: float
    end: float
    resource: str

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Timeline:
    """调度结果"""
    events: Tuple[Event, ...]
    makespan: float
    exposed_comm: float       # makespan − busy_compute
    busy_compute: float
    gemm_attention: float     # GEMM、GroupedGEMM、注意力核心（含融合节点的计算部分）

    @property
    def other_compute(self) -> float:
        return self.busy_compute - self.gemm_attention

    def breakdown(self) -> Dict[str, float]:
        return {
            "gemm_attention": self.gemm_attention,
            "exposed_comm": self.exposed_comm,
            "other": self.other_compute,
        }

    def to_dict(self) -> Dict:
        return {
            "makespan": self.makespan,
            "exposed_comm": self.exposed_comm,
            "busy_compute": self.busy_compute,
            "breakdown": self.breakdown(),
            "events": [e.__dict__ for e in self.events],
        }


def _durations(g: OpGraph) -> Dict[int, float]:
    durations = {}
    for node_id, node in g.nodes.items():
        if node.duration is None:
            raise SchedulingError(f"节点 {node.name} 尚未计价，请先调用 cost_graph")
        durations[node_id] = float(node.duration)
    return durations


def remaining_path(g: OpGraph, durations: Optional[Dict[int, float]] = None) -> Dict[int, float]:
    """每个节点到汇点的最长路径（含自身）"""
    durations = durations or _durations(g)
    succ = g.successors()
    longest: Dict[int, float] = {}
    for node_id in reversed(g.topological_order()):
        tail = max((longest[s] for s in succ[node_id]), default=0.0)
        longest[node_id] = durations[node_id] + tail
    return longest


def critical_path_length(g: OpGraph) -> float:
    paths = remaining_path(g)
    return max(paths.values(), default=0.0)


def serial_sum(g: OpGraph) -> float:
    return sum(_durations(g).values())


def _summarize(g: OpGraph, events: List[Event]) -> Timeline:
    makespan = max((e.end for e in events), default=0.0)
    busy = 0.0
    gemm_attention = 0.0
    for node in g.nodes.values():
        if node.stream_class != StreamClass.COMPUTE:
            continue
        if node.kind == OpKind.FUSED:
            # 融合节点超出计算部分的时间记为暴露通信
            busy += node.compute_time
            gemm_attention += node.gemm_time
            continue
        busy += float(node.duration)
        if node.effective_kind in COMPUTE_KINDS:
            gemm_attention += float(node.duration)
    ordered = tuple(sorted(events, key=lambda e: (e.start, e.node_id)))
    return Timeline(ordered, makespan, max(0.0, makespan - busy), busy, gemm_attention)


def schedule(g: OpGraph, mode: str = "inter_op",
             resources: Optional[Dict[StreamClass, str]] = None) -> Timeline:
    """
    生成时间线

    Args:
        g: 已计价的算子图
        mode: serial 或 inter_op
        resources: 执行类别到资源通道名的映射，默认每个类别一条通道

    Returns:
        Timeline: 事件、makespan 与暴露通信时间

    Raises:
        SchedulingError: 图有环、节点未计价或模式未知
    """
    if mode not in SCHEDULE_MODES:
        raise SchedulingError(f"未知调度模式 {mode!r}，可选 {SCHEDULE_MODES}")
    durations = _durations(g)
    order = g.topological_order()

    if mode == "serial":
        now = 0.0
        events = []
        for node_id in order:
            end = now + durations[node_id]
            events.append(Event(node_id, g.nodes[node_id].name, now, end, SERIAL_LANE))
            now = end
        return _summarize(g, events)

    lanes = resources or {}
    lane_of = {i: lanes.get(n.stream_class, n.stream_class.value) for i, n in g.nodes.items()}
    priority = remaining_path(g, durations)
    free_at: Dict[str, float] = {lane: 0.0 for lane in lane_of.values()}
    finish: Dict[int, float] = {}
    events: List[Event] = []
    now = 0.0

    while len(finish) < len(g.nodes):
        dispatched = True
        while dispatched:
            dispatched = False
            ready = [i for i in order if i not in finish
                     and all(d in finish and finish[d] <= now for d in g.nodes[i].deps)]
            for lane in sorted(free_at):
                if free_at[lane] > now:
                    continue
                candidates = [i for i in ready if lane_of[i] == lane and i not in finish]
                if not candidates:
                    continue
                chosen = min(candidates, key=lambda i: (-priority[i], i))
                end = now + durations[chosen]
                finish[chosen] = end
                free_at[lane] = end
                events.append(Event(chosen, g.nodes[chosen].name, now, end, lane))
                logger.debug("t=%.3e 调度 %s 于 %s", now, g.nodes[chosen].name, lane)
                dispatched = True
                break

        pending = [t for t in list(finish.values()) + list(free_at.values()) if t > now]
        if len(finish) < len(g.nodes):
            if not pending:
                raise SchedulingError("调度停滞：存在无法就绪的节点")
            now = min(pending)

    return _summarize(g, events)


def resource_violations(timeline: Timeline) -> List[Tuple[Event, Event]]:
    """同一资源上时间重叠的事件对（零时长事件不计）"""
    violations = []
    by_lane: Dict[str, List[Event]] = {}
    for event in timeline.events:
        if event.duration > 0:
            by_lane.setdefault(event.resource, []).append(event)
    for events in by_lane.values():
        events.sort(key=lambda e: (e.start, e.end))
        for prev, cur in zip(events, events[1:]):
            if cur.start < prev.end:
                violations.append((prev, cur))
    return violations


def dependency_violations(g: OpGraph, timeline: Timeline) -> List[Tuple[int, int]]:
    """开始时间早于某个依赖结束时间的 (依赖, 节点) 对"""
    start = {e.node_id: e.start for e in timeline.events}
    end = {e.node_id: e.end for e in timeline.events}
    return [(d, i) for i, node in g.nodes.items() for d in node.deps if start[i] < end[d]]
