"""
算子内重叠模块

把相邻的通信与 GEMM（可经过 scatter / gather）融合为一个 tile 级流水的节点：
- comm_gemm：all-to-all 或 all-gather 之后的 GEMM
- gemm_comm：GEMM 之后的 all-to-all 或 reduce-scatter
- comm_scatter_gemm：all-gather → scatter → GroupedGEMM
- gemm_gather_comm：GroupedGEMM → gather → reduce-scatter

耗时模型：
- all-to-all 占用 c 个 SM：计算时间放大 S/(S−c)；c 低于饱和 SM 数时通信按 sat/c 放慢
- all-gather / reduce-scatter 走拷贝引擎：计算不受影响，通信按 intra_bw/copy_engine_bw 折算
- 融合耗时 = max(计算, 通信) + 流水填充，且不超过二者串行之和
- 整数 tile 数：填充 = min(计算, 通信)/tiles，即均匀两阶段流水的精确 makespan；
  通信不短于计算时等于 计算/tiles
- TileLayout：填充 = max(t_c, max_i(u·|dep_i| − i·t_c))，t_c 为单个 tile 的计算时间，
  u 为单个 tile 的通信时间；i = 0 项为首个 tile 等待其全部来源的时间，
  其余项为后续 tile 晚于计算进度的部分；swizzle 在所有循环移位的 tile 顺序中取最小值
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .commcost import Collective
from .errors import DomainError, SchedulingError
from .job_types import AttnStrategy, ClusterConfig, FfnStrategy, JobConfig, ModelConfig
from .op_graph import OpGraph, OpKind, OpNode, StreamClass
from .routing import TileLayout

logger = logging.getLogger(__name__)


class OrderPolicy(Enum):
    NATURAL = "natural"
    SWIZZLE = "swizzle"


class FusionPattern(Enum):
    COMM_GEMM = "comm_gemm"
    GEMM_COMM = "gemm_comm"
    COMM_SCATTER_GEMM = "comm_scatter_gemm"
    GEMM_GATHER_COMM = "gemm_gather_comm"


GEMM_KINDS = (OpKind.GEMM, OpKind.GROUPED_GEMM)
REORDER_KINDS = (OpKind.SCATTER, OpKind.GATHER)

# 各模式允许的集合通信类型
PATTERN_COLLECTIVES = {
    FusionPattern.COMM_GEMM: (Collective.ALL_TO_ALL, Collective.ALL_GATHER),
    FusionPattern.GEMM_COMM: (Collective.ALL_TO_ALL, Collective.REDUCE_SCATTER),
    FusionPattern.COMM_SCATTER_GEMM: (Collective.ALL_GATHER,),
    FusionPattern.GEMM_GATHER_COMM: (Collective.REDUCE_SCATTER,),
}

COMM_FIRST = (FusionPattern.COMM_GEMM, FusionPattern.COMM_SCATTER_GEMM)


@dataclass(frozen=True)
class FusedPair:
    """一组待融合的通信与计算节点"""
    pattern: FusionPattern
    comm_node: int
    compute_node: int
    collective: Collective
    compute_time: float             # GEMM 耗时
    comm_time: float
    via: Optional[int] = None       # 中间的 scatter / gather
    reorder_time: float = 0.0
    sm_for_comm: int = 16
    tiles: Union[int, TileLayout] = 1
    order_policy: OrderPolicy = OrderPolicy.NATURAL
    sm_saturation: int = 16

    def __post_init__(self):
        if self.sm_for_comm < 1:
            raise DomainError(f"sm_for_comm 必须 ≥ 1，实际为 {self.sm_for_comm}")
        if self.num_tiles < 1:
            raise DomainError(f"tiles 必须 ≥ 1，实际为 {self.num_tiles}")
        if min(self.compute_time, self.comm_time, self.reorder_time) < 0:
            raise DomainError("耗时不能为负")
        if self.collective not in PATTERN_COLLECTIVES[self.pattern]:
            raise SchedulingError(f"{self.pattern.value} 不支持 {self.collective.value}")
        needs_via = self.pattern in (FusionPattern.COMM_SCATTER_GEMM, FusionPattern.GEMM_GATHER_COMM)
        if needs_via != (self.via is not None):
            raise SchedulingError(f"{self.pattern.value} 的中间节点设置不正确")

    @property
    def uses_sms(self) -> bool:
        """all-to-all 在 SM 上执行，其余集合通信走拷贝引擎"""
        return self.collective == Collective.ALL_TO_ALL

    @property
    def num_tiles(self) -> int:
        if isinstance(self.tiles, TileLayout):
            return self.tiles.num_tiles
        return int(self.tiles)

    @property
    def chain(self) -> Tuple[int, ...]:
        """按执行顺序排列的节点编号"""
        middle = () if self.via is None else (self.via,)
        if self.pattern in COMM_FIRST:
            return (self.comm_node,) + middle + (self.compute_node,)
        return (self.compute_node,) + middle + (self.comm_node,)

    @property
    def serial_time(self) -> float:
        return self.compute_time + self.reorder_time + self.comm_time


def scaled_times(pair: FusedPair, cluster: ClusterConfig) -> Tuple[float, float]:
    """
    融合后计算与通信各自的耗时

    Raises:
        DomainError: c ≥ S
    """
    sms, c = cluster.sm_count, pair.sm_for_comm
    if c >= sms:
        raise DomainError(f"通信 SM 数 {c} 必须小于 SM 总数 {sms}")
    compute = pair.compute_time + pair.reorder_time
    if pair.uses_sms:
        return compute * sms / (sms - c), pair.comm_time * max(1.0, pair.sm_saturation / c)
    return compute, pair.comm_time * cluster.intra_bw / cluster.copy_engine_bw


def _layout_fill(sizes: Sequence[int], tile_compute: float, tile_comm: float) -> float:
    waits = (tile_comm * size - i * tile_compute for i, size in enumerate(sizes))
    return max(tile_compute, max(waits, default=0.0))


def tile_fill(pair: FusedPair, compute_scaled: float, comm_scaled: float) -> float:
    """流水填充时间"""
    if not isinstance(pair.tiles, TileLayout):
        return min(compute_scaled, comm_scaled) / pair.num_tiles

    sizes = [len(tile.dependent_ranks) for tile in pair.tiles.tiles]
    tile_compute = compute_scaled / len(sizes)
    tile_comm = comm_scaled / len(sizes)
    if pair.order_policy == OrderPolicy.NATURAL:
        return _layout_fill(sizes, tile_compute, tile_comm)
    return min(_layout_fill(sizes[r:] + sizes[:r], tile_compute, tile_comm) for r in range(len(sizes)))


def fused_overlap_time(pair: FusedPair, cluster: ClusterConfig) -> float:
    """
    融合节点耗时（秒）

    Args:
        pair: 融合对
        cluster: 提供 SM 数、节点内带宽与拷贝引擎带宽

    Returns:
        float: max(计算, 通信) + 填充，不超过串行之和；通信为 0 时等于计算时间
    """
    compute_scaled, comm_scaled = scaled_times(pair, cluster)
    if pair.comm_time == 0:
        return pair.compute_time + pair.reorder_time
    fill = tile_fill(pair, compute_scaled, comm_scaled)
    return min(max(compute_scaled, comm_scaled) + fill, pair.serial_time)


def tune_sms(pair: FusedPair, cluster: ClusterConfig) -> Tuple[FusedPair, float]:
    """
    在 [1, S−1] 中搜索使融合耗时最小的通信 SM 数，并列时取较小者

    拷贝引擎路径与 c 无关，原样返回
    """
    if not pair.uses_sms:
        return pair, fused_overlap_time(pair, cluster)
    best, best_time = pair, math.inf
    for c in range(1, cluster.sm_count):
        candidate = dataclasses.replace(pair, sm_for_comm=c)
        elapsed = fused_overlap_time(candidate, cluster)
        if elapsed < best_time:
            best, best_time = candidate, elapsed
    logger.debug("SM 调优: 节点 %d 选择 c=%d，耗时 %.3e s", pair.compute_node, best.sm_for_comm, best_time)
    return best, best_time


def _gemm_rows(node: OpNode, g: OpGraph, model: ModelConfig) -> int:
    """GEMM 的行数（token 维）"""
    tokens = model.tokens_per_micro_batch
    n = g.plan.n
    if node.kind == OpKind.GROUPED_GEMM:
        rows = model.top_k * tokens
        return rows // n if g.plan.ffn_strategy == FfnStrategy.EP else rows
    return tokens if g.plan.attn_strategy == AttnStrategy.TP else tokens // n


def _match(g: OpGraph, comm: OpNode, succ: Dict[int, List[int]],
           taken: set) -> Optional[Tuple[FusionPattern, int, Optional[int]]]:
    """寻找与通信节点相邻的 GEMM，返回 (模式, GEMM 编号, 中间节点编号)"""
    collective = comm.comm.collective

    def free(node_id: int) -> bool:
        return node_id not in taken and g.nodes[node_id].kind != OpKind.FUSED

    # GEMM 在前：生产者的唯一后继就是本通信或中间节点
    if len(comm.deps) == 1 and free(comm.deps[0]):
        producer = g.nodes[comm.deps[0]]
        if producer.kind in GEMM_KINDS and succ[producer.id] == [comm.id] \
                and collective in PATTERN_COLLECTIVES[FusionPattern.GEMM_COMM]:
            return FusionPattern.GEMM_COMM, producer.id, None
        if producer.kind in REORDER_KINDS and succ[producer.id] == [comm.id] \
                and len(producer.deps) == 1 and free(producer.deps[0]) \
                and collective in PATTERN_COLLECTIVES[FusionPattern.GEMM_GATHER_COMM]:
            gemm = g.nodes[producer.deps[0]]
            if gemm.kind == OpKind.GROUPED_GEMM and succ[gemm.id] == [producer.id]:
                return FusionPattern.GEMM_GATHER_COMM, gemm.id, producer.id

    # 通信在前：取编号最小的 GEMM 后继
    for consumer_id in sorted(succ[comm.id]):
        if not free(consumer_id):
            continue
        consumer = g.nodes[consumer_id]
        if consumer.kind in GEMM_KINDS and collective in PATTERN_COLLECTIVES[FusionPattern.COMM_GEMM]:
            return FusionPattern.COMM_GEMM, consumer_id, None
        if consumer.kind in REORDER_KINDS and succ[comm.id] == [consumer_id] \
                and collective in PATTERN_COLLECTIVES[FusionPattern.COMM_SCATTER_GEMM]:
            gemms = [s for s in sorted(succ[consumer_id])
                     if free(s) and g.nodes[s].kind == OpKind.GROUPED_GEMM]
            if gemms:
                return FusionPattern.COMM_SCATTER_GEMM, gemms[0], consumer_id
    return None


def find_fusions(g: OpGraph, model: ModelConfig, job: Optional[JobConfig] = None,
                 layouts: Optional[Dict[str, TileLayout]] = None,
                 order_policy: OrderPolicy = OrderPolicy.NATURAL) -> List[FusedPair]:
    """
    在已计价的图上找出可融合的通信与 GEMM

    Args:
        g: 已计价的前向或反向图
        model: 模型结构（决定 GEMM 行数与 tile 数）
        job: 提供 tile_rows、sm_for_comm 与 sm_saturation
        layouts: 按 GEMM 节点名指定的 TileLayout，未指定时使用整数 tile 数
        order_policy: tile 顺序策略

    Returns:
        List[FusedPair]: 按通信节点编号排序，每个节点至多出现一次
    """
    job = job or JobConfig()
    layouts = layouts or {}
    succ = g.successors()
    taken: set = set()
    pairs = []
    for comm in sorted(g.collectives(), key=lambda node: node.id):
        if comm.kind != OpKind.COLLECTIVE or comm.id in taken:
            continue
        matched = _match(g, comm, succ, taken)
        if matched is None:
            continue
        pattern, gemm_id, via = matched
        gemm = g.nodes[gemm_id]
        tiles = layouts.get(gemm.name) or max(1, math.ceil(_gemm_rows(gemm, g, model) / job.tile_rows))
        pair = FusedPair(
            pattern=pattern,
            comm_node=comm.id,
            compute_node=gemm_id,
            collective=comm.comm.collective,
            compute_time=float(gemm.duration),
            comm_time=float(comm.duration),
            via=via,
            reorder_time=float(g.nodes[via].duration) if via is not None else 0.0,
            sm_for_comm=job.sm_for_comm,
            tiles=tiles,
            order_policy=order_policy,
            sm_saturation=job.sm_saturation,
        )
        taken.update(pair.chain)
        pairs.append(pair)
    logger.debug("%s 图找到 %d 个融合对", g.phase, len(pairs))
    return pairs


def _check_adjacent(g: OpGraph, pair: FusedPair):
    chain = pair.chain
    for node_id in chain:
        node = g.nodes.get(node_id)
        if node is None or node.kind == OpKind.FUSED:
            raise SchedulingError(f"节点 {node_id} 不存在或已被融合")
    comm, gemm = g.nodes[pair.comm_node], g.nodes[pair.compute_node]
    if comm.kind != OpKind.COLLECTIVE or comm.comm.collective != pair.collective:
        raise SchedulingError(f"{comm.name} 不是 {pair.collective.value} 通信节点")
    expected = (OpKind.GROUPED_GEMM,) if pair.via is not None else GEMM_KINDS
    if gemm.kind not in expected:
        raise SchedulingError(f"{gemm.name} 与融合模式 {pair.pattern.value} 不匹配")
    if pair.via is not None and g.nodes[pair.via].kind not in REORDER_KINDS:
        raise SchedulingError(f"{g.nodes[pair.via].name} 不是 scatter / gather")
    for upstream, downstream in zip(chain, chain[1:]):
        if upstream not in g.nodes[downstream].deps:
            raise SchedulingError(f"{g.nodes[upstream].name} 与 {g.nodes[downstream].name} 不相邻")


def apply_intra_op(g: OpGraph, fusions: Sequence[FusedPair], cluster: ClusterConfig) -> OpGraph:
    """
    用融合节点替换每个融合对

    融合节点沿用 GEMM 的编号，被吞并节点的出边改接到融合节点

    Raises:
        SchedulingError: 节点不相邻、模式不匹配、节点已被融合，或融合后出现环
    """
    fused = g.copy()
    for pair in fusions:
        _check_adjacent(fused, pair)
        chain = pair.chain
        members = set(chain)
        gemm, comm = fused.nodes[pair.compute_node], fused.nodes[pair.comm_node]
        deps = sorted({d for node_id in chain for d in fused.nodes[node_id].deps} - members)
        fused.nodes[gemm.id] = OpNode(
            id=gemm.id,
            name="+".join(fused.nodes[i].name for i in chain),
            kind=OpKind.FUSED,
            flops=gemm.flops,
            bytes_moved=sum((fused.nodes[i].bytes_moved for i in chain), Fraction(0)),
            deps=tuple(deps),
            stream_class=StreamClass.COMPUTE,
            participants=comm.participants,
            inner=gemm.kind,
            duration=fused_overlap_time(pair, cluster),
            compute_time=pair.compute_time + pair.reorder_time,
            gemm_time=pair.compute_time,
            comm_time=pair.comm_time,
        )
        consumed = members - {gemm.id}
        for node_id in consumed:
            del fused.nodes[node_id]
        for node_id, node in list(fused.nodes.items()):
            if consumed.intersection(node.deps):
                remapped = {gemm.id if d in consumed else d for d in node.deps} - {node_id}
                fused.nodes[node_id] = dataclasses.replace(node, deps=tuple(sorted(remapped)))
    fused.topological_order()
    return fused


def fusion_speedup(pairs: Sequence[FusedPair], cluster: ClusterConfig) -> float:
    """融合对串行耗时之和 / 融合耗时之和"""
    fused_total = sum(fused_overlap_time(p, cluster) for p in pairs)
    if fused_total == 0:
        return 1.0
    return sum(p.serial_time for p in pairs) / fused_total
