"""
迭代模拟

把单层前向 / 反向图的调度结果汇总为一次训练迭代：
每阶段的层数 × 单层 makespan + 输出层，按交错 1F1B 展开到所有微批，再加上梯度同步。

耗时分类：
- gemm_attention：GEMM、GroupedGEMM 与注意力核心
- exposed_comm：未被计算覆盖的通信（含梯度同步）
- other：访存类算子、流水线气泡与输出层
"""

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .commcost import LinkModel, Tier, dp_sync_time, hierarchical_sync_plan, sync_step_time
from .job_types import (
    MAIN_GRAD_BYTES,
    AttnStrategy,
    ClusterConfig,
    EfficiencyTable,
    JobConfig,
    ModelConfig,
    ParallelismPlan,
    PrecisionConfig,
    attention_params,
)
from .memmodel import (
    MemoryBreakdown,
    RematPolicy,
    default_microbatches,
    layers_per_stage,
    param_count_per_gpu,
    peak_memory,
)
from .op_graph import OpGraph, OpKind, build_backward_graph, build_layer_graph, cost_graph, gemm_peak
from .overlap import FusedPair, OrderPolicy, apply_intra_op, find_fusions, fusion_speedup, tune_sms
from .pipeline_schedule import mfu, pipeline_iteration_time
from .routing import TileLayout, build_scatter_map, simulate_routing, sort_tokens_for_tiles
from .scheduler import Timeline, schedule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimulationOptions:
    """模拟开关"""
    mode: str = "inter_op"          # serial | inter_op
    fuse: bool = False
    remat: bool = True
    tune_sms: bool = False
    order_policy: OrderPolicy = OrderPolicy.NATURAL
    routed_tiles: bool = False      # GroupedGEMM 的 tile 依赖集合来自路由模拟
    microbatches: Optional[int] = None


@dataclass(frozen=True)
class SimulationResult:
    plan: ParallelismPlan
    options: SimulationOptions
    forward: Timeline
    backward: Timeline
    layers_per_stage: int
    per_mb_fwd: float
    per_mb_bwd: float
    microbatches: int
    dp_sync: float
    iteration_time: float
    mfu: float
    breakdown: Dict[str, float]
    memory: MemoryBreakdown
    fusions: Tuple[FusedPair, ...] = field(default_factory=tuple)
    fusion_speedup: float = 1.0

    def to_dict(self) -> Dict:
        return {
            "plan": self.plan.to_dict(),
            "mode": self.options.mode,
            "fuse": self.options.fuse,
            "remat": self.options.remat,
            "tune_sms": self.options.tune_sms,
            "layer": {
                "forward_makespan": self.forward.makespan,
                "forward_exposed_comm": self.forward.exposed_comm,
                "backward_makespan": self.backward.makespan,
                "backward_exposed_comm": self.backward.exposed_comm,
            },
            "layers_per_stage": self.layers_per_stage,
            "per_mb_fwd": self.per_mb_fwd,
            "per_mb_bwd": self.per_mb_bwd,
            "microbatches": self.microbatches,
            "dp_sync": self.dp_sync,
            "iteration_time": self.iteration_time,
            "makespan": self.iteration_time,
            "exposed_comm": self.breakdown["exposed_comm"],
            "mfu": self.mfu,
            "breakdown": dict(self.breakdown),
            "fusions": [
                {"pattern": p.pattern.value, "sm_for_comm": p.sm_for_comm, "tiles": p.num_tiles}
                for p in self.fusions
            ],
            "fusion_speedup": self.fusion_speedup,
            "memory": self.memory.to_dict(),
        }


def head_time(model: ModelConfig, plan: ParallelismPlan, cluster: ClusterConfig,
              precision: PrecisionConfig, efficiency: EfficiencyTable) -> float:
    """输出层前向时间（词表按 n 切分）"""
    flops = 2 * model.tokens_per_micro_batch * model.vocab_size * model.h / plan.n
    return flops / (gemm_peak(cluster, precision) * efficiency.lookup("gemm"))


def dp_sync_seconds(plan: ParallelismPlan, model: ModelConfig, cluster: ClusterConfig,
                    precision: PrecisionConfig, link: LinkModel) -> float:
    """
    每次迭代末尾的梯度同步时间

    所有梯度在 DP 组内同步；SP / CP 复制的注意力参数额外做节点内 RS 与 AG（分层同步）
    """
    lps = layers_per_stage(model, plan.pp)
    replicated = plan.attn_strategy in (AttnStrategy.SP, AttnStrategy.CP) and plan.n > 1
    grads = param_count_per_gpu(plan, model)
    if replicated:
        grads -= lps * attention_params(model) * (1 - Fraction(1, plan.n))
    tier = Tier.INTRA if plan.n * plan.dp <= cluster.gpus_per_node else Tier.INTER
    total = dp_sync_time(grads * MAIN_GRAD_BYTES, plan.dp, link, precision.grad_compressed, tier)
    if replicated:
        grad_bytes = 2 if precision.grad_compressed else MAIN_GRAD_BYTES
        sync = hierarchical_sync_plan(lps * attention_params(model) * grad_bytes, plan.n, plan.dp,
                                      strategy=plan.attn_strategy)
        total += sum(sync_step_time(step, link) for step in sync.steps if step.tier == Tier.INTRA)
    return total


def _routed_layouts(plan: ParallelismPlan, model: ModelConfig, job: JobConfig,
                    graphs: List[OpGraph]) -> Dict[str, TileLayout]:
    assignment = simulate_routing(model.tokens_per_micro_batch, model.num_experts, model.top_k,
                                  mode="random", seed=job.seed, capacity_factor=job.capacity_factor,
                                  n=plan.n)
    smap = build_scatter_map(assignment, plan.n, 0)
    layout = sort_tokens_for_tiles(smap, assignment, job.tile_rows)
    if layout.num_tiles == 0:
        return {}
    return {node.name: layout for g in graphs for node in g.nodes.values()
            if node.kind == OpKind.GROUPED_GEMM}


def _fuse(g: OpGraph, model: ModelConfig, cluster: ClusterConfig, job: JobConfig,
          options: SimulationOptions, layouts: Dict[str, TileLayout]) -> Tuple[OpGraph, List[FusedPair]]:
    """逐个尝试融合对，只保留不拉长单层 makespan 的融合"""
    pairs = find_fusions(g, model, job, layouts, options.order_policy)
    if options.tune_sms:
        pairs = [tune_sms(pair, cluster)[0] for pair in pairs]
    kept: List[FusedPair] = []
    best = schedule(g, options.mode).makespan
    for pair in pairs:
        candidate = apply_intra_op(g, [pair], cluster)
        makespan = schedule(candidate, options.mode).makespan
        if makespan <= best:
            g, best = candidate, makespan
            kept.append(pair)
        else:
            # 反向图中通信原本可被 wgrad 覆盖
            logger.debug("%s 图跳过融合 %s：单层时间 %.3e → %.3e s",
                         g.phase, pair.pattern.value, best, makespan)
    return g, kept


def simulate_plan(plan: ParallelismPlan, model: ModelConfig, cluster: ClusterConfig,
                  precision: Optional[PrecisionConfig] = None, job: Optional[JobConfig] = None,
                  link: Optional[LinkModel] = None, efficiency: Optional[EfficiencyTable] = None,
                  options: Optional[SimulationOptions] = None) -> SimulationResult:
    """
    模拟一次训练迭代

    Args:
        plan: 并行方案
        model: 模型结构
        cluster: 集群硬件
        precision: 精度配置
        job: 作业参数（tile 行数、SM 设置、dp_compress、种子）
        link: 通信延迟模型，默认由集群推导
        efficiency: 算子利用率表
        options: 调度模式、融合与重计算开关

    Returns:
        SimulationResult: 单层时间线、迭代时间、MFU、耗时分类与显存

    Raises:
        DomainError: 方案不受支持
        SchedulingError: 调度失败
    """
    precision = precision or PrecisionConfig()
    job = job or JobConfig()
    link = link or LinkModel.from_cluster(cluster)
    efficiency = efficiency or EfficiencyTable()
    options = options or SimulationOptions()
    remat = RematPolicy() if options.remat else RematPolicy.disabled()

    fwd = build_layer_graph(plan, model, precision, cluster.gpus_per_node)
    bwd = build_backward_graph(plan, model, remat, fwd, precision, cluster.gpus_per_node)
    fwd = cost_graph(fwd, cluster, precision, efficiency, link)
    bwd = cost_graph(bwd, cluster, precision, efficiency, link)

    pairs: List[FusedPair] = []
    if options.fuse:
        layouts = _routed_layouts(plan, model, job, [fwd, bwd]) if options.routed_tiles else {}
        fwd, fwd_pairs = _fuse(fwd, model, cluster, job, options, layouts)
        bwd, bwd_pairs = _fuse(bwd, model, cluster, job, options, layouts)
        pairs = fwd_pairs + bwd_pairs

    t_fwd = schedule(fwd, options.mode)
    t_bwd = schedule(bwd, options.mode)

    lps = layers_per_stage(model, plan.pp)
    head = head_time(model, plan, cluster, precision, efficiency)
    per_mb_fwd = lps * t_fwd.makespan + head
    per_mb_bwd = lps * t_bwd.makespan + 2 * head
    microbatches = options.microbatches or default_microbatches(plan, model)
    sync = dp_sync_seconds(plan, model, cluster, precision, link)
    iteration = pipeline_iteration_time(per_mb_fwd, per_mb_bwd, plan.pp, plan.vpp, microbatches, sync)

    gemm_attention = microbatches * lps * (t_fwd.gemm_attention + t_bwd.gemm_attention)
    exposed = microbatches * lps * (t_fwd.exposed_comm + t_bwd.exposed_comm) + sync
    breakdown = {
        "gemm_attention": gemm_attention,
        "exposed_comm": exposed,
        "other": iteration - gemm_attention - exposed,
    }
    memory = peak_memory(plan, model, precision, remat, job.dp_compress, microbatches)
    utilization = mfu(iteration, model, cluster, plan.total_gpus, precision)
    speedup = fusion_speedup(pairs, cluster) if pairs else 1.0

    logger.info("模拟 %s (%s, fuse=%s, remat=%s): 迭代 %.4f s, MFU %.3f",
                plan.name, options.mode, options.fuse, options.remat, iteration, utilization)
    return SimulationResult(
        plan=plan,
        options=options,
        forward=t_fwd,
        backward=t_bwd,
        layers_per_stage=lps,
        per_mb_fwd=per_mb_fwd,
        per_mb_bwd=per_mb_bwd,
        microbatches=microbatches,
        dp_sync=sync,
        iteration_time=iteration,
        mfu=utilization,
        breakdown=breakdown,
        memory=memory,
        fusions=tuple(pairs),
        fusion_speedup=speedup,
    )


def measure_fusion_gain(plan: ParallelismPlan, model: ModelConfig, cluster: ClusterConfig,
                        precision: Optional[PrecisionConfig] = None, job: Optional[JobConfig] = None,
                        link: Optional[LinkModel] = None, efficiency: Optional[EfficiencyTable] = None,
                        options: Optional[SimulationOptions] = None) -> Tuple[float, SimulationResult, SimulationResult]:
    """
    融合带来的迭代时间缩减 1 − fused / base

    基线沿用同一组选项，只关闭 fuse 与 tune_sms。

    Returns:
        (gain, base, fused)
    """
    options = replace(options or SimulationOptions(), fuse=True)
    base_options = replace(options, fuse=False, tune_sms=False)
    base = simulate_plan(plan, model, cluster, precision, job, link, efficiency, base_options)
    fused = simulate_plan(plan, model, cluster, precision, job, link, efficiency, options)
    gain = 1.0 - fused.iteration_time / base.iteration_time
    logger.info("融合收益 %s: %.4f s → %.4f s (%.2f%%)",
                plan.name, base.iteration_time, fused.iteration_time, gain * 100)
    return gain, base, fused
