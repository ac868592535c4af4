"""
并行方案规划

枚举 注意力 {TP, SP, CP, DP} × FFN {TP, EP(a2a), EP(ag_rs)} × 节点内并行度 n 的组合，
按整除约束筛选，逐个打分并排序；另外提供 EP 通信模式选择与 scale-up 比值分析。

排序规则：可行方案在前，然后依次比较 预估迭代时间、每 GPU 显存、关键路径通信、方案名。
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from .commcost import LinkModel, Tier, ep_dispatch_time, tier_for_group
from .errors import DomainError, MoePlanError
from .job_types import (
    AttnStrategy,
    ClusterConfig,
    EfficiencyTable,
    EpPattern,
    FfnStrategy,
    JobConfig,
    ModelConfig,
    ParallelismPlan,
    PrecisionConfig,
)
from .memmodel import MemoryBreakdown, RematPolicy
from .op_graph import build_backward_graph, build_layer_graph, cost_graph
from .simulator import SimulationOptions, simulate_plan

logger = logging.getLogger(__name__)

DP_ATTENTION_REASON = "n× activation memory"


@dataclass(frozen=True)
class RejectedPlan:
    name: str
    n: int
    reason: str

    def to_dict(self) -> Dict:
        return {"name": self.name, "n": self.n, "reason": self.reason}


class PlanEnumeration(NamedTuple):
    plans: List[ParallelismPlan]
    rejected: List[RejectedPlan]


@dataclass(frozen=True)
class PlanScore:
    """方案评分，时间单位秒（每层），显存单位字节"""
    plan: ParallelismPlan
    critical_path_comm: float
    overlappable_comm: float
    compute: float
    mem_per_gpu: float
    feasible: bool
    est_iter_time: float
    mfu: float = 0.0
    reason: str = ""
    memory: Optional[MemoryBreakdown] = None

    def sort_key(self) -> Tuple:
        return (not self.feasible, self.est_iter_time, self.mem_per_gpu,
                self.critical_path_comm, self.plan.name)

    def to_dict(self) -> Dict:
        finite = math.isfinite(self.est_iter_time)
        return {
            "plan": self.plan.to_dict(),
            "critical_path_comm": self.critical_path_comm,
            "overlappable_comm": self.overlappable_comm,
            "compute": self.compute,
            "mem_per_gpu": self.mem_per_gpu if math.isfinite(self.mem_per_gpu) else None,
            "feasible": self.feasible,
            "est_iter_time": self.est_iter_time if finite else None,
            "mfu": self.mfu,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class ScaleUpReport:
    comm_time: float
    comp_time: float
    R: Fraction
    R_approx: Fraction
    sustains: bool

    def to_dict(self) -> Dict:
        return {
            "comm_time": self.comm_time,
            "comp_time": self.comp_time,
            "R": float(self.R),
            "R_approx": float(self.R_approx),
            "sustains": self.sustains,
        }


def _attention_reason(attn: AttnStrategy, n: int, model: ModelConfig) -> Optional[str]:
    if attn == AttnStrategy.DP:
        return DP_ATTENTION_REASON
    if attn in (AttnStrategy.TP, AttnStrategy.SP) and model.num_heads % n:
        return f"注意力头数 {model.num_heads} 不能被 n={n} 整除"
    if attn == AttnStrategy.CP and model.seq_len % n:
        return f"序列长度 {model.seq_len} 不能被 n={n} 整除"
    return None


def _ffn_reason(ffn: FfnStrategy, n: int, model: ModelConfig) -> Optional[str]:
    if ffn == FfnStrategy.EP and model.num_experts % n:
        return f"专家数 {model.num_experts} 不能被 n={n} 整除"
    if ffn == FfnStrategy.TP and model.h_ffn % n:
        return f"h_ffn={model.h_ffn} 不能被 n={n} 整除"
    return None


def _ffn_options() -> List[Tuple[FfnStrategy, EpPattern]]:
    return [(FfnStrategy.TP, EpPattern.AG_RS), (FfnStrategy.EP, EpPattern.A2A),
            (FfnStrategy.EP, EpPattern.AG_RS)]


def enumerate_plans(model: ModelConfig, cluster: ClusterConfig,
                    job: Optional[JobConfig] = None, n: Optional[int] = None) -> PlanEnumeration:
    """
    枚举满足整除约束的方案

    Args:
        model: 模型结构
        cluster: 集群硬件
        job: 提供 pp、vpp 与 zero_stage
        n: 只枚举指定的节点内并行度

    Returns:
        PlanEnumeration: 可行组合与带原因的被拒组合；DP 注意力总是被拒
    """
    job = job or JobConfig()
    total = cluster.total_gpus
    sizes = [n] if n is not None else list(range(1, cluster.gpus_per_node + 1))
    plans: List[ParallelismPlan] = []
    rejected: List[RejectedPlan] = []

    for size in sizes:
        if size < 1 or size > cluster.gpus_per_node:
            rejected.append(RejectedPlan("*", size, f"n 必须位于 [1, {cluster.gpus_per_node}]"))
            continue
        if total % (size * job.pp):
            rejected.append(RejectedPlan("*", size, f"总 GPU 数 {total} 不能被 n·pp={size * job.pp} 整除"))
            continue
        dp = total // (size * job.pp)
        per_step = model.micro_batch * dp
        if model.global_batch % per_step:
            rejected.append(RejectedPlan("*", size, f"global_batch={model.global_batch} 不能被 b·dp={per_step} 整除"))
            continue
        microbatches = model.global_batch // per_step
        if job.vpp > 1 and microbatches % job.pp:
            rejected.append(RejectedPlan("*", size, f"交错调度要求微批数 {microbatches} 能被 pp 整除"))
            continue

        for attn in AttnStrategy:
            for ffn, pattern in _ffn_options():
                plan = ParallelismPlan(attn, ffn, pattern, size, job.pp, job.vpp, dp, job.zero_stage)
                reason = _attention_reason(attn, size, model) or _ffn_reason(ffn, size, model)
                if reason:
                    rejected.append(RejectedPlan(plan.name, size, reason))
                else:
                    plans.append(plan)

    logger.info("枚举方案: %d 个可选，%d 个被拒", len(plans), len(rejected))
    if not plans:
        logger.warning("没有满足约束的并行方案")
    return PlanEnumeration(plans, rejected)


def _collective_seconds(nodes) -> float:
    return sum(float(node.duration) for node in nodes if node.is_collective)


def score_plan(plan: ParallelismPlan, model: ModelConfig, cluster: ClusterConfig,
               precision: Optional[PrecisionConfig] = None, job: Optional[JobConfig] = None,
               link: Optional[LinkModel] = None,
               efficiency: Optional[EfficiencyTable] = None) -> PlanScore:
    """
    给方案打分

    关键路径通信为前向图中全部集合通信之和；反向通信与重计算的通信可与计算重叠，单独统计。
    预估迭代时间来自 inter_op 调度（不融合）。不可行方案返回 feasible=False 而不抛异常

    Returns:
        PlanScore: 单层通信 / 计算时间、每 GPU 显存、预估迭代时间与 MFU
    """
    precision = precision or PrecisionConfig()
    job = job or JobConfig()
    link = link or LinkModel.from_cluster(cluster)
    efficiency = efficiency or EfficiencyTable()
    remat = RematPolicy() if job.remat else RematPolicy.disabled()

    try:
        fwd = build_layer_graph(plan, model, precision, cluster.gpus_per_node)
        bwd = build_backward_graph(plan, model, remat, fwd, precision, cluster.gpus_per_node)
        fwd = cost_graph(fwd, cluster, precision, efficiency, link)
        bwd = cost_graph(bwd, cluster, precision, efficiency, link)
        result = simulate_plan(plan, model, cluster, precision, job, link, efficiency,
                               SimulationOptions(mode="inter_op", remat=job.remat))
    except MoePlanError as e:
        logger.warning("方案 %s (n=%d) 不可行: %s", plan.name, plan.n, e)
        return PlanScore(plan, 0.0, 0.0, 0.0, math.inf, False, math.inf, reason=str(e))

    compute = sum(float(node.duration) for g in (fwd, bwd) for node in g.nodes.values()
                  if not node.is_collective)
    mem = float(result.memory.total)
    feasible = mem <= cluster.mem_capacity
    reason = "" if feasible else f"显存 {mem / 2 ** 30:.1f} GiB 超过容量 {cluster.mem_capacity / 2 ** 30:.1f} GiB"
    return PlanScore(
        plan=plan,
        critical_path_comm=_collective_seconds(fwd.nodes.values()),
        overlappable_comm=_collective_seconds(bwd.nodes.values()),
        compute=compute,
        mem_per_gpu=mem,
        feasible=feasible,
        est_iter_time=result.iteration_time,
        mfu=result.mfu,
        reason=reason,
        memory=result.memory,
    )


def rank_plans(scores: Sequence[PlanScore]) -> List[PlanScore]:
    return sorted(scores, key=PlanScore.sort_key)


def evaluate_plans(model: ModelConfig, cluster: ClusterConfig,
                   precision: Optional[PrecisionConfig] = None, job: Optional[JobConfig] = None,
                   link: Optional[LinkModel] = None, efficiency: Optional[EfficiencyTable] = None,
                   n: Optional[int] = None) -> Tuple[List[PlanScore], List[RejectedPlan]]:
    """枚举、打分并排序"""
    enumeration = enumerate_plans(model, cluster, job, n)
    scores = [score_plan(plan, model, cluster, precision, job, link, efficiency)
              for plan in enumeration.plans]
    ranked = rank_plans(scores)
    if ranked:
        logger.info("最优方案: %s (n=%d)", ranked[0].plan.name, ranked[0].plan.n)
    return ranked, enumeration.rejected


def select_ep_pattern(model: ModelConfig, cluster: ClusterConfig, link: Optional[LinkModel] = None,
                      n: Optional[int] = None, precision: Optional[PrecisionConfig] = None) -> EpPattern:
    """
    选择 EP 的通信模式：两种模式前向通信时间取小者，相等时取 a2a（无需完整 gather 缓冲）
    """
    n = n or cluster.gpus_per_node
    link = link or LinkModel.from_cluster(cluster)
    precision = precision or PrecisionConfig()
    tier = tier_for_group(n, cluster.gpus_per_node)
    times = {
        pattern: ep_dispatch_time(pattern, model.micro_batch, model.seq_len, model.h, n,
                                  model.top_k, link, precision, tier)
        for pattern in (EpPattern.A2A, EpPattern.AG_RS)
    }
    chosen = EpPattern.A2A if times[EpPattern.A2A] <= times[EpPattern.AG_RS] else EpPattern.AG_RS
    logger.info("EP 通信模式: %s (a2a=%.3e s, ag_rs=%.3e s)", chosen.value,
                times[EpPattern.A2A], times[EpPattern.AG_RS])
    return chosen


def scale_up_ratio(model: ModelConfig, cluster: ClusterConfig, n: int,
                   precision: Optional[PrecisionConfig] = None) -> ScaleUpReport:
    """
    FFN 计算时间与 EP 通信时间之比

    comm = 2k·b·s·h·(n−1)/n² / bw，comp = 3k·b·s·h·h_ffn/n / peak，
    R = comp/comm = 1.5·h_ffn·bw/peak · n/(n−1)，R_approx 去掉 n/(n−1)。
    bw 为元素速率：n 不超过单节点时用节点内带宽，否则用节点间带宽

    Raises:
        DomainError: n < 2 或带宽为 0
    """
    if n < 2:
        raise DomainError(f"n 必须 ≥ 2，实际为 {n}")
    precision = precision or PrecisionConfig()
    tier = tier_for_group(n, cluster.gpus_per_node)
    bandwidth = cluster.intra_bw if tier == Tier.INTRA else cluster.inter_bw
    if bandwidth <= 0:
        raise DomainError("带宽必须 > 0")
    bw_elems = Fraction(bandwidth) / precision.activation_comm_bytes
    peak = Fraction(cluster.peak_flops)

    b, s, h, k = model.micro_batch, model.seq_len, model.h, model.top_k
    comm = Fraction(2 * k * b * s * h * (n - 1), n * n) / bw_elems
    comp = Fraction(3 * k * b * s * h * model.h_ffn, n) / peak
    ratio = comp / comm
    approx = Fraction(3, 2) * model.h_ffn * bw_elems / peak
    return ScaleUpReport(float(comm), float(comp), ratio, approx, ratio > 1)
