"""
流水线调度模块

交错 1F1B 的闭式迭代时间、逐事件的暴力模拟与 MFU。

记号：F、B 为一个微批在一个流水阶段上的前向 / 反向总时间（含全部 vpp 个虚拟阶段），
m 为微批数，pp 为阶段数。

    iteration = m·(F + B) + (pp − 1)·(F + B)/vpp + dp_sync

暴力模拟按 Megatron 的交错调度生成每个阶段的执行顺序（预热、稳态 1F1B、冷却），
阶段间通信耗时为 0。前向 / 反向时间比为 1:1、1:2、1:3、2:1 时二者严格一致。

交错调度（vpp > 1）沿用 Megatron 的约束：微批数必须是 pp 的整数倍，
否则闭式公式、执行顺序与暴力模拟一律抛出 DomainError。
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .errors import DomainError, SchedulingError
from .job_types import ClusterConfig, ModelConfig, PrecisionConfig, derive

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineEvent:
    stage: int
    phase: str          # "F" 或 "B"
    microbatch: int
    chunk: int
    start: float
    end: float


def _check(pp: int, vpp: int, microbatches: int):
    if pp < 1 or vpp < 1:
        raise DomainError(f"pp 与 vpp 必须 ≥ 1，实际为 pp={pp}, vpp={vpp}")
    if microbatches < 1:
        raise DomainError(f"微批数必须 ≥ 1，实际为 {microbatches}")
    if vpp > 1 and microbatches % pp:
        raise DomainError(f"交错调度要求微批数 {microbatches} 能被 pp={pp} 整除")


def pipeline_iteration_time(per_mb_fwd: float, per_mb_bwd: float, pp: int, vpp: int,
                            microbatches: int, dp_sync: float = 0.0) -> float:
    """
    交错 1F1B 的迭代时间

    Args:
        per_mb_fwd: 一个微批在一个阶段上的前向时间
        per_mb_bwd: 一个微批在一个阶段上的反向时间
        pp: 流水阶段数
        vpp: 每阶段的虚拟阶段数
        microbatches: 微批数
        dp_sync: 迭代末尾的梯度同步时间

    Returns:
        float: 秒
    """
    _check(pp, vpp, microbatches)
    step = per_mb_fwd + per_mb_bwd
    return microbatches * step + (pp - 1) * step / vpp + dp_sync


def bubble_fraction(pp: int, vpp: int, microbatches: int) -> float:
    """气泡时间占有效计算时间的比例 (pp − 1)/(vpp·m)"""
    _check(pp, vpp, microbatches)
    return (pp - 1) / (vpp * microbatches)


def _warmup(pp: int, vpp: int, microbatches: int, rank: int) -> int:
    total = microbatches * vpp
    if vpp == 1:
        return min(pp - rank - 1, microbatches)
    if microbatches == pp:
        return total
    return min((pp - rank - 1) * 2 + (vpp - 1) * pp, total)


def _locate(k: int, pp: int, vpp: int, forward: bool) -> Tuple[int, int]:
    """第 k 个前向 / 反向操作对应的 (微批, 虚拟阶段)"""
    group = pp * vpp
    in_group = k % group
    chunk = in_group // pp
    if not forward:
        chunk = vpp - chunk - 1
    return (k // group) * pp + in_group % pp, chunk


def stage_order(pp: int, vpp: int, microbatches: int, rank: int) -> List[Tuple[str, int, int]]:
    """一个阶段的执行顺序，元素为 (F|B, 微批, 虚拟阶段)"""
    _check(pp, vpp, microbatches)
    total = microbatches * vpp
    warmup = _warmup(pp, vpp, microbatches, rank)
    order = [("F",) + _locate(k, pp, vpp, True) for k in range(warmup)]
    for i in range(total - warmup):
        order.append(("F",) + _locate(warmup + i, pp, vpp, True))
        order.append(("B",) + _locate(i, pp, vpp, False))
    order.extend(("B",) + _locate(k, pp, vpp, False) for k in range(total - warmup, total))
    return order


def _upstream(op: Tuple[str, int, int], rank: int, pp: int, vpp: int) -> Optional[Tuple[int, Tuple[str, int, int]]]:
    """跨阶段依赖，返回 (阶段, 操作)"""
    phase, mb, chunk = op
    if phase == "F":
        if rank > 0:
            return rank - 1, op
        if chunk > 0:
            return pp - 1, ("F", mb, chunk - 1)
        return None
    if rank < pp - 1:
        return rank + 1, op
    if chunk < vpp - 1:
        return 0, ("B", mb, chunk + 1)
    return None


def simulate_pipeline(pp: int, vpp: int, microbatches: int, chunk_fwd: float,
                      chunk_bwd: float) -> Tuple[float, List[PipelineEvent]]:
    """
    逐事件模拟交错 1F1B

    Args:
        chunk_fwd: 一个微批在一个虚拟阶段上的前向时间
        chunk_bwd: 一个微批在一个虚拟阶段上的反向时间

    Returns:
        (makespan, events)

    Raises:
        SchedulingError: 执行顺序出现死锁
    """
    orders = [stage_order(pp, vpp, microbatches, r) for r in range(pp)]
    cursor = [0] * pp
    free_at = [0.0] * pp
    finished: Dict[Tuple[int, Tuple[str, int, int]], float] = {}
    events: List[PipelineEvent] = []
    remaining = sum(len(o) for o in orders)

    while remaining:
        progressed = False
        for rank in range(pp):
            while cursor[rank] < len(orders[rank]):
                op = orders[rank][cursor[rank]]
                dep = _upstream(op, rank, pp, vpp)
                if dep is not None and dep not in finished:
                    break
                start = max(free_at[rank], finished.get(dep, 0.0))
                end = start + (chunk_fwd if op[0] == "F" else chunk_bwd)
                finished[(rank, op)] = end
                free_at[rank] = end
                events.append(PipelineEvent(rank, op[0], op[1], op[2], start, end))
                cursor[rank] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise SchedulingError("流水线调度死锁")

    makespan = max(free_at)
    logger.debug("流水线模拟 pp=%d vpp=%d m=%d: makespan=%.6g", pp, vpp, microbatches, makespan)
    return makespan, events


def mfu(iteration_time: float, model: ModelConfig, cluster: ClusterConfig, total_gpus: int,
        precision: Optional[PrecisionConfig] = None) -> float:
    """模型 FLOP 利用率：每次迭代模型 FLOP / (迭代时间 · 峰值 · GPU 数)"""
    if iteration_time <= 0:
        raise DomainError(f"迭代时间必须 > 0，实际为 {iteration_time}")
    flops = derive(model, precision or PrecisionConfig()).model_flops_per_iter
    return flops / (iteration_time * cluster.peak_flops * total_gpus)
