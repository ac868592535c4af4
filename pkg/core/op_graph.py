"""
算子图模块

构建单层 MoE 的前向 / 反向算子 DAG（注意力 TP/SP/CP，FFN EP(a2a | ag_rs)/TP），
并为每个节点给出解析耗时。

耗时约定：
- GEMM / GroupedGEMM / 注意力核心：flops / (峰值 × 利用率)，FP8 计算格式下 GEMM 峰值翻倍
- 访存类算子（norm、swiglu、router、scatter、gather、weighted_sum）：bytes_moved / (显存带宽 × 利用率)
- 集合通信：commcost.collective_time
- 反向：GEMM 拆为 dgrad 与 wgrad，各与前向等量；其余算子一个反向节点，代价为前向 2 倍
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Tuple

from .commcost import Collective, CommVolume, LinkModel, Tier, collective_time, tier_for_group
from .errors import DomainError, SchedulingError
from .job_types import (
    AttnStrategy,
    ClusterConfig,
    EfficiencyTable,
    EpPattern,
    FfnStrategy,
    ModelConfig,
    NumberFormat,
    ParallelismPlan,
    PrecisionConfig,
)
from .memmodel import ACTIVATION_BYTES, RematPolicy

logger = logging.getLogger(__name__)


class OpKind(Enum):
    """算子类别"""
    GEMM = "gemm"
    GROUPED_GEMM = "grouped_gemm"
    ATTENTION_CORE = "attention_core"
    NORM = "norm"
    SWIGLU = "swiglu"
    ROUTER = "router"
    SCATTER = "scatter"
    GATHER = "gather"
    WEIGHTED_SUM = "weighted_sum"
    COLLECTIVE = "collective"
    REMAT = "remat"
    FUSED = "fused"


COMPUTE_KINDS = (OpKind.GEMM, OpKind.GROUPED_GEMM, OpKind.ATTENTION_CORE)
MEMORY_KINDS = (OpKind.NORM, OpKind.SWIGLU, OpKind.ROUTER, OpKind.SCATTER,
                OpKind.GATHER, OpKind.WEIGHTED_SUM)


class StreamClass(Enum):
    """执行资源"""
    COMPUTE = "compute"
    COMM_INTRA = "comm_intra"
    COMM_INTER = "comm_inter"


MIRROR = {
    Collective.ALL_GATHER: Collective.REDUCE_SCATTER,
    Collective.REDUCE_SCATTER: Collective.ALL_GATHER,
    Collective.ALL_TO_ALL: Collective.ALL_TO_ALL,
}


@dataclass(frozen=True)
class OpNode:
    """算子节点"""
    id: int
    name: str
    kind: OpKind
    flops: Fraction = Fraction(0)
    bytes_moved: Fraction = Fraction(0)
    deps: Tuple[int, ...] = ()
    stream_class: StreamClass = StreamClass.COMPUTE
    comm: Optional[CommVolume] = None
    participants: int = 1
    inner: Optional[OpKind] = None      # remat 节点重做的算子类别
    duration: Optional[float] = None    # 秒，cost_graph 之后填充
    compute_time: float = 0.0           # 融合节点中计算部分的耗时（含 scatter / gather）
    gemm_time: float = 0.0              # 融合节点中 GEMM 的耗时
    comm_time: float = 0.0              # 融合节点中通信部分的耗时

    @property
    def is_collective(self) -> bool:
        return self.comm is not None

    @property
    def effective_kind(self) -> OpKind:
        return self.inner if self.kind == OpKind.REMAT else self.kind


@dataclass
class OpGraph:
    """算子 DAG"""
    phase: str
    plan: ParallelismPlan
    nodes: Dict[int, OpNode] = field(default_factory=dict)

    def add(self, name: str, kind: OpKind, deps: Iterable[Optional[int]] = (),
            **attrs) -> int:
        """添加节点，deps 中的 None 会被忽略（被省略的通信节点）"""
        if any(node.name == name for node in self.nodes.values()):
            raise SchedulingError(f"节点名重复: {name}")
        node_id = max(self.nodes, default=-1) + 1
        clean = tuple(sorted({d for d in deps if d is not None}))
        self.nodes[node_id] = OpNode(node_id, name, kind, deps=clean, **attrs)
        return node_id

    def by_name(self, name: str) -> OpNode:
        for node in self.nodes.values():
            if node.name == name:
                return node
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(node.name == name for node in self.nodes.values())

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return [(d, node.id) for node in self.nodes.values() for d in node.deps]

    def successors(self) -> Dict[int, List[int]]:
        succ: Dict[int, List[int]] = {i: [] for i in self.nodes}
        for src, dst in self.edges:
            succ[src].append(dst)
        return succ

    def collectives(self) -> List[OpNode]:
        return [n for n in self.nodes.values() if n.is_collective]

    def count(self, kind: OpKind) -> int:
        return sum(1 for n in self.nodes.values() if n.kind == kind)

    def topological_order(self) -> List[int]:
        """Kahn 拓扑序，同时就绪时编号小者优先；有环则报错"""
        indegree = {i: 0 for i in self.nodes}
        for src, dst in self.edges:
            if src not in self.nodes:
                raise SchedulingError(f"节点 {dst} 依赖不存在的节点 {src}")
            indegree[dst] += 1
        succ = self.successors()
        ready = sorted(i for i, d in indegree.items() if d == 0)
        order = []
        while ready:
            current = ready.pop(0)
            order.append(current)
            for nxt in succ[current]:
                indegree[nxt] -= 1
                if indegree[nxt] == 0:
                    ready.append(nxt)
            ready.sort()
        if len(order) != len(self.nodes):
            raise SchedulingError("算子图存在环")
        return order

    def copy(self) -> "OpGraph":
        return OpGraph(self.phase, self.plan, dict(self.nodes))


class _LayerBuilder:
    """按并行方案逐个添加前向节点"""

    def __init__(self, plan: ParallelismPlan, model: ModelConfig, precision: PrecisionConfig,
                 gpus_per_node: int):
        self.plan = plan
        self.model = model
        self.n = plan.n
        self.tokens = model.micro_batch * model.seq_len
        self.local = Fraction(self.tokens, self.n)
        self.comm_bytes = precision.activation_comm_bytes
        self.tier = tier_for_group(self.n, gpus_per_node)
        self.graph = OpGraph("forward", plan)

    def memory(self, name: str, kind: OpKind, elements, deps) -> int:
        return self.graph.add(name, kind, deps, bytes_moved=Fraction(elements) * ACTIVATION_BYTES)

    def compute(self, name: str, kind: OpKind, flops, deps) -> int:
        return self.graph.add(name, kind, deps, flops=Fraction(flops))

    def collective(self, name: str, collective: Collective, buffer, deps,
                   estimate: bool = False) -> Optional[int]:
        """n = 1 时不产生通信，返回 None 让调用方直接连接前驱"""
        if self.n == 1:
            return None
        volume = CommVolume.of(buffer, self.comm_bytes, self.tier, collective, estimate)
        stream = StreamClass.COMM_INTRA if self.tier == Tier.INTRA else StreamClass.COMM_INTER
        return self.graph.add(name, OpKind.COLLECTIVE, deps, comm=volume,
                              participants=self.n, stream_class=stream)

    @staticmethod
    def chain(node: Optional[int], fallback: Iterable[Optional[int]]) -> Tuple[Optional[int], ...]:
        return (node,) if node is not None else tuple(fallback)

    def attention(self) -> Tuple[int, ...]:
        m, h, s, b = self.model.m, self.model.h, self.model.seq_len, self.model.micro_batch
        n, local, tokens = self.n, self.local, self.tokens
        qkv_width = h + Fraction(2 * h, m)
        core_flops = Fraction(4 * b * s * s * h, n)
        strategy = self.plan.attn_strategy

        norm = self.memory("attn_norm", OpKind.NORM, 2 * local * h, ())
        if strategy == AttnStrategy.SP:
            qkv = self.compute("qkv_proj", OpKind.GEMM, 2 * local * h * qkv_width, (norm,))
            a2a = self.collective("qkv_a2a", Collective.ALL_TO_ALL, 2 * local * qkv_width, (qkv,))
            core = self.compute("attention_core", OpKind.ATTENTION_CORE, core_flops, self.chain(a2a, (qkv,)))
            back = self.collective("attn_out_a2a", Collective.ALL_TO_ALL, 2 * local * h, (core,))
            out = self.compute("out_proj", OpKind.GEMM, 2 * local * h * h, self.chain(back, (core,)))
            return (out,)
        if strategy == AttnStrategy.TP:
            ag = self.collective("attn_ag", Collective.ALL_GATHER, tokens * h, (norm,))
            qkv = self.compute("qkv_proj", OpKind.GEMM, 2 * tokens * h * qkv_width / n, self.chain(ag, (norm,)))
            core = self.compute("attention_core", OpKind.ATTENTION_CORE, core_flops, (qkv,))
            out = self.compute("out_proj", OpKind.GEMM, 2 * tokens * h * h / n, (core,))
            rs = self.collective("attn_rs", Collective.REDUCE_SCATTER, tokens * h, (out,))
            return self.chain(rs, (out,))
        if strategy == AttnStrategy.CP:
            qkv = self.compute("qkv_proj", OpKind.GEMM, 2 * local * h * qkv_width, (norm,))
            kv = self.collective("kv_ag", Collective.ALL_GATHER, Fraction(2 * tokens * h, m), (qkv,),
                                 estimate=True)
            # 连续切分下因果掩码造成的负载不均
            imbalance = Fraction(2 * n - 1, n)
            core = self.compute("attention_core", OpKind.ATTENTION_CORE, core_flops * imbalance,
                                self.chain(kv, (qkv,)))
            out = self.compute("out_proj", OpKind.GEMM, 2 * local * h * h, (core,))
            return (out,)
        raise DomainError(f"不支持的注意力策略 {strategy.value}：DP 注意力需要 n 倍激活显存")

    def ffn(self, upstream: Tuple[int, ...]) -> Tuple[int, ...]:
        h, h_ffn = self.model.h, self.model.h_ffn
        k, n, local, tokens = self.model.top_k, self.n, self.local, self.tokens
        experts = self.model.num_experts

        norm = self.memory("ffn_norm", OpKind.NORM, 2 * local * h, upstream)
        router = self.graph.add("router", OpKind.ROUTER, (norm,),
                                flops=Fraction(2) * local * h * experts,
                                bytes_moved=local * (h + experts) * ACTIVATION_BYTES)

        if self.plan.ffn_strategy == FfnStrategy.TP:
            rows, width = Fraction(k * tokens), Fraction(h_ffn, n)
        else:
            if experts % n:
                raise DomainError(f"EP 要求专家数 {experts} 能被 n={n} 整除")
            rows, width = k * local, Fraction(h_ffn)

        a2a = self.plan.ffn_strategy == FfnStrategy.EP and self.plan.ep_pattern == EpPattern.A2A
        if a2a:
            scatter = self.memory("scatter", OpKind.SCATTER, 2 * rows * h, (norm, router))
            dispatch = self.collective("dispatch_a2a", Collective.ALL_TO_ALL, k * local * h, (scatter,))
            fc1_deps = self.chain(dispatch, (scatter,))
        else:
            ag = self.collective("ffn_ag", Collective.ALL_GATHER, tokens * h, (norm,))
            scatter = self.memory("scatter", OpKind.SCATTER, 2 * rows * h, self.chain(ag, (norm,)) + (router,))
            fc1_deps = (scatter,)

        fc1 = self.compute("fc1", OpKind.GROUPED_GEMM, 2 * rows * h * 2 * width, fc1_deps)
        act = self.memory("swiglu", OpKind.SWIGLU, 3 * rows * width, (fc1,))
        weighted = self.memory("weighted_sum", OpKind.WEIGHTED_SUM, 2 * rows * width, (act,))
        fc2 = self.compute("fc2", OpKind.GROUPED_GEMM, 2 * rows * width * h, (weighted,))

        if a2a:
            combine = self.collective("combine_a2a", Collective.ALL_TO_ALL, k * local * h, (fc2,))
            gather = self.memory("gather", OpKind.GATHER, (rows + local) * h, self.chain(combine, (fc2,)))
            return (gather,)
        gather = self.memory("gather", OpKind.GATHER, (rows + tokens) * h, (fc2,))
        rs = self.collective("ffn_rs", Collective.REDUCE_SCATTER, tokens * h, (gather,))
        return self.chain(rs, (gather,))


def build_layer_graph(plan: ParallelismPlan, model: ModelConfig,
                      precision: Optional[PrecisionConfig] = None,
                      gpus_per_node: int = 8) -> OpGraph:
    """
    构建单层前向算子图

    Args:
        plan: 并行方案
        model: 模型结构
        precision: 精度配置（决定激活通信字节数）
        gpus_per_node: 决定通信层级

    Returns:
        OpGraph: 前向图

    Raises:
        DomainError: 不支持的策略组合（DP 注意力、专家数不能整除的 EP）
    """
    builder = _LayerBuilder(plan, model, precision or PrecisionConfig(), gpus_per_node)
    attn_out = builder.attention()
    builder.ffn(attn_out)
    graph = builder.graph
    logger.debug("前向图 %s: %d 个节点，%d 个通信", plan.name, len(graph.nodes), len(graph.collectives()))
    return graph


def _mirror(node: OpNode) -> Dict:
    """反向节点的属性"""
    if node.is_collective:
        comm = dataclasses.replace(node.comm, collective=MIRROR[node.comm.collective])
        return dict(comm=comm, participants=node.participants, stream_class=node.stream_class)
    if node.kind == OpKind.ATTENTION_CORE:
        return dict(flops=2 * node.flops)
    if node.kind in MEMORY_KINDS:
        return dict(bytes_moved=2 * node.bytes_moved)
    raise SchedulingError(f"无法为 {node.kind.value} 生成反向节点")


def build_backward_graph(plan: ParallelismPlan, model: ModelConfig,
                         remat: Optional[RematPolicy] = None,
                         forward: Optional[OpGraph] = None,
                         precision: Optional[PrecisionConfig] = None,
                         gpus_per_node: int = 8) -> OpGraph:
    """
    构建单层反向算子图

    反向节点依赖其前向后继的梯度产生节点；开启重计算时插入三个 remat 节点：
    remat_norm（重做 RMSNorm）、remat_ffn_in（重做 all-gather 或分发 all-to-all）、
    remat_fc2_in（由保留的 FC1 输出重做 SwiGLU 与加权求和）。它们与 Δffn_out 的梯度通信之间没有边，
    调度器可以让二者并发

    节点数 = 前向节点数 + GEMM 个数（wgrad）+ remat 节点数
    """
    remat = remat if remat is not None else RematPolicy()
    fwd = forward or build_layer_graph(plan, model, precision, gpus_per_node)
    if fwd.phase != "forward":
        raise SchedulingError("build_backward_graph 需要前向图")

    bwd = OpGraph("backward", plan)
    succ = fwd.successors()
    grad_of: Dict[int, int] = {}        # 前向节点 → 产生其输入梯度的反向节点
    wgrad_of: Dict[int, int] = {}

    remat_ids: Dict[str, int] = {}
    if remat.enabled:
        ffn_norm = fwd.by_name("ffn_norm")
        remat_ids["norm"] = bwd.add("remat_norm", OpKind.REMAT, (), inner=OpKind.NORM,
                                    bytes_moved=ffn_norm.bytes_moved)
        ffn_in_src = next((fwd.by_name(name) for name in ("ffn_ag", "dispatch_a2a") if fwd.has(name)), None)
        if ffn_in_src is not None:
            remat_ids["ffn_in"] = bwd.add("remat_ffn_in", OpKind.REMAT, (remat_ids["norm"],),
                                          inner=OpKind.COLLECTIVE, comm=ffn_in_src.comm,
                                          participants=ffn_in_src.participants,
                                          stream_class=ffn_in_src.stream_class)
        else:
            scatter = fwd.by_name("scatter")
            remat_ids["ffn_in"] = bwd.add("remat_ffn_in", OpKind.REMAT, (remat_ids["norm"],),
                                          inner=OpKind.SCATTER, bytes_moved=scatter.bytes_moved)
        swiglu, weighted = fwd.by_name("swiglu"), fwd.by_name("weighted_sum")
        remat_ids["fc2_in"] = bwd.add("remat_fc2_in", OpKind.REMAT, (), inner=OpKind.SWIGLU,
                                      bytes_moved=swiglu.bytes_moved + weighted.bytes_moved)

    for fid in reversed(fwd.topological_order()):
        node = fwd.nodes[fid]
        deps = [grad_of[s] for s in succ[fid]]
        if node.kind in (OpKind.GEMM, OpKind.GROUPED_GEMM):
            extra = []
            if remat.enabled and node.name == "fc2":
                extra.append(remat_ids["fc2_in"])
            if remat.enabled and node.name == "fc1":
                extra.append(remat_ids["ffn_in"])
            grad_of[fid] = bwd.add(f"{node.name}_dgrad", node.kind, deps, flops=node.flops)
            wgrad_of[fid] = bwd.add(f"{node.name}_wgrad", node.kind, deps + extra, flops=node.flops)
            continue
        if remat.enabled and node.name == "weighted_sum":
            deps.append(remat_ids["fc2_in"])
        grad_of[fid] = bwd.add(f"{node.name}_bwd", node.kind, deps, **_mirror(node))

    logger.debug("反向图 %s: %d 个节点（remat=%s）", plan.name, len(bwd.nodes), remat.enabled)
    return bwd


def gemm_peak(cluster: ClusterConfig, precision: Optional[PrecisionConfig]) -> float:
    """GEMM 峰值：FP8 计算格式下翻倍"""
    if precision is not None and precision.compute_format == NumberFormat.FP8_E4M3:
        return 2 * cluster.peak_flops
    return cluster.peak_flops


def op_time(node: OpNode, cluster: ClusterConfig, precision: Optional[PrecisionConfig],
            efficiency: EfficiencyTable, link: Optional[LinkModel] = None) -> float:
    """
    节点耗时（秒）

    Raises:
        ConfigValidationError: 利用率表缺少该算子类别
    """
    if node.kind == OpKind.FUSED:
        return float(node.duration or 0.0)
    if node.is_collective:
        link = link or LinkModel.from_cluster(cluster)
        return collective_time(node.comm, node.participants, link)

    kind = node.effective_kind
    eff = efficiency.lookup(kind.value)
    if kind in (OpKind.GEMM, OpKind.GROUPED_GEMM):
        return float(node.flops) / (gemm_peak(cluster, precision) * eff)
    if kind == OpKind.ATTENTION_CORE:
        return float(node.flops) / (cluster.peak_flops * eff)
    return float(node.bytes_moved) / (cluster.mem_bw * eff)


def cost_graph(g: OpGraph, cluster: ClusterConfig, precision: Optional[PrecisionConfig],
               efficiency: EfficiencyTable, link: Optional[LinkModel] = None) -> OpGraph:
    """返回每个节点都带 duration 的图副本"""
    link = link or LinkModel.from_cluster(cluster)
    costed = g.copy()
    for node_id, node in g.nodes.items():
        if node.kind == OpKind.FUSED:
            continue
        duration = op_time(node, cluster, precision, efficiency, link)
        costed.nodes[node_id] = dataclasses.replace(node, duration=duration)
    return costed
