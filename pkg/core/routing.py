"""
路由模拟模块

模拟 token→专家路由（含容量丢弃），预计算 scatter/gather 行映射，
为 tile 级重叠按来源 rank 排序 token，并计算 GPU 组粒度的负载均衡统计。

核心功能：
1. 三种路由模式：uniform（轮询）、random（每 token 无放回均匀抽样）、skewed（Zipf 热度）
2. 按组容量丢弃：每组只保留按 token 序号排在前面的 capacity 个槽位
3. 行映射：输入行 = token·top_k + slot，输出行按 (专家, 来源 rank, token) 连续排列
4. tile 划分：同一来源 rank 的行保持连续，rank 块的先后顺序使依赖 rank 总数最少
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError

logger = logging.getLogger(__name__)

ROUTING_MODES = ("uniform", "random", "skewed")

# 子集动态规划的 rank 数上限，超过后按升序排列
MAX_DP_RANKS = 16


def expert_rank(expert_ids, num_experts: int, n: int):
    """专家连续放置：专家 j 位于 rank ⌊j·n/E⌋"""
    return (np.asarray(expert_ids) * n) // num_experts


@dataclass(frozen=True)
class RoutingAssignment:
    """路由结果，assignments 与 dropped 都是 tokens×top_k 矩阵"""
    assignments: np.ndarray     # 专家编号
    source_rank: np.ndarray     # 每个 token 的来源 rank
    dropped: np.ndarray         # 槽位是否因超出容量被丢弃
    num_experts: int
    n: int                      # rank（GPU 组）数
    capacity: int               # 每组容量（槽位）

    @property
    def tokens(self) -> int:
        return int(self.assignments.shape[0])

    @property
    def top_k(self) -> int:
        return int(self.assignments.shape[1])

    @property
    def token_dropped(self) -> np.ndarray:
        """至少有一个槽位被丢弃的 token"""
        return self.dropped.any(axis=1)

    @property
    def retained_slots(self) -> int:
        return int((~self.dropped).sum())

    def to_dict(self) -> dict:
        return {
            "num_experts": self.num_experts,
            "n": self.n,
            "capacity": self.capacity,
            "assignments": self.assignments.tolist(),
            "source_rank": self.source_rank.tolist(),
            "dropped": self.dropped.tolist(),
        }


@dataclass(frozen=True)
class ScatterMap:
    """本 rank 的行映射"""
    row_map: Dict[int, int]         # 输入行 → 输出行
    inverse_map: np.ndarray         # 输出行 → 输入行
    per_expert_counts: np.ndarray   # 本 rank 每个专家的行数 e_j
    local_experts: np.ndarray
    row_expert: np.ndarray          # 每个输出行所属专家
    row_source_rank: np.ndarray     # 每个输出行的来源 rank

    @property
    def rows(self) -> int:
        return int(self.inverse_map.shape[0])

    def scatter(self, x: np.ndarray) -> np.ndarray:
        """按映射把输入行重排到专家连续布局"""
        return np.asarray(x)[self.inverse_map]

    def gather(self, y: np.ndarray, input_rows: int) -> np.ndarray:
        """scatter 的逆操作，未保留的输入行填零"""
        y = np.asarray(y)
        out = np.zeros((input_rows,) + y.shape[1:], dtype=y.dtype)
        out[self.inverse_map] = y
        return out


@dataclass(frozen=True)
class Tile:
    expert: int
    start: int          # 布局中的起始行（含）
    end: int            # 结束行（不含）
    dependent_ranks: FrozenSet[int]


@dataclass(frozen=True)
class TileLayout:
    """tile 划分结果"""
    tiles: Tuple[Tile, ...]
    tile_rows: int
    row_order: np.ndarray       # 布局位置 → ScatterMap 输出行
    row_ranks: np.ndarray       # 布局位置上的来源 rank
    rank_order: Dict[int, Tuple[int, ...]]     # 每个专家的 rank 块顺序

    @property
    def total_dependent_ranks(self) -> int:
        return sum(len(t.dependent_ranks) for t in self.tiles)

    @property
    def num_tiles(self) -> int:
        return len(self.tiles)


@dataclass(frozen=True)
class BalanceStats:
    """组粒度负载统计"""
    per_group_load: np.ndarray
    balance_loss_value: float
    capacity: int
    drop_rate: float
    per_expert_counts: np.ndarray   # 全局每专家保留的槽位数 e_j


def _draw_experts(tokens: int, num_experts: int, top_k: int, mode: str,
                  seed: int, zipf_s: float) -> np.ndarray:
    if mode == "uniform":
        slots = np.arange(tokens * top_k, dtype=np.int64).reshape(tokens, top_k)
        return slots % num_experts

    rng = np.random.default_rng(seed)
    if mode == "random":
        return rng.random((tokens, num_experts)).argsort(axis=1)[:, :top_k].astype(np.int64)

    # Gumbel-top-k：按 Zipf 权重无放回抽样
    weights = 1.0 / np.power(np.arange(1, num_experts + 1, dtype=np.float64), zipf_s)
    keys = np.log(weights)[None, :] + rng.gumbel(size=(tokens, num_experts))
    return np.argsort(-keys, axis=1, kind="stable")[:, :top_k].astype(np.int64)


def simulate_routing(tokens: int, num_experts: int, top_k: int, mode: str = "uniform",
                     seed: int = 0, zipf_s: float = 1.2, capacity_factor: Optional[float] = 1.0,
                     n: int = 1) -> RoutingAssignment:
    """
    模拟 token 路由

    Args:
        tokens: token 数
        num_experts: 专家数
        top_k: 每个 token 选择的专家数
        mode: uniform / random / skewed
        seed: 随机种子（random、skewed 使用）
        zipf_s: skewed 模式的 Zipf 指数
        capacity_factor: 容量因子，None 表示不丢弃
        n: GPU 组数，同时决定来源 rank 与容量分组

    Returns:
        RoutingAssignment: 路由结果

    Raises:
        DomainError: 参数非法
    """
    if mode not in ROUTING_MODES:
        raise DomainError(f"未知路由模式 {mode!r}，可选 {ROUTING_MODES}")
    if tokens < 1 or num_experts < 1 or top_k < 1 or n < 1:
        raise DomainError("tokens、num_experts、top_k、n 必须 ≥ 1")
    if top_k > num_experts:
        raise DomainError(f"top_k={top_k} 超过 num_experts={num_experts}")
    if capacity_factor is not None and capacity_factor <= 0:
        raise DomainError(f"capacity_factor 必须 > 0，实际为 {capacity_factor}")
    if mode == "skewed" and zipf_s <= 0:
        raise DomainError(f"zipf_s 必须 > 0，实际为 {zipf_s}")

    assignments = _draw_experts(tokens, num_experts, top_k, mode, seed, zipf_s)
    source_rank = np.arange(tokens, dtype=np.int64) // math.ceil(tokens / n)

    if capacity_factor is None:
        capacity = tokens * top_k
        dropped = np.zeros_like(assignments, dtype=bool)
    else:
        capacity = math.ceil(capacity_factor * tokens * top_k / n)
        groups = expert_rank(assignments.reshape(-1), num_experts, n)
        # 槽位按 token 序遍历，组内序号超过容量即丢弃
        position_in_group = np.cumsum(np.eye(n, dtype=np.int64)[groups], axis=0)[
            np.arange(groups.shape[0]), groups] - 1
        dropped = (position_in_group >= capacity).reshape(tokens, top_k)

    result = RoutingAssignment(assignments, source_rank, dropped, num_experts, n, capacity)
    if dropped.any():
        logger.info("路由丢弃 %d/%d 个槽位（mode=%s, capacity=%d）",
                    int(dropped.sum()), dropped.size, mode, capacity)
    return result


def build_scatter_map(a: RoutingAssignment, n: int, my_rank: int) -> ScatterMap:
    """
    预计算本 rank 的行映射

    只保留专家位于 my_rank 且未被丢弃的 (token, slot)；
    输出行按专家连续，专家内部按 (来源 rank, token) 稳定排序

    Raises:
        DomainError: my_rank 越界
    """
    if n < 1 or not 0 <= my_rank < n:
        raise DomainError(f"my_rank={my_rank} 不在 [0, {n}) 内")

    flat_experts = a.assignments.reshape(-1)
    input_rows = np.arange(flat_experts.shape[0], dtype=np.int64)
    token_of_row = input_rows // a.top_k
    keep = (expert_rank(flat_experts, a.num_experts, n) == my_rank) & ~a.dropped.reshape(-1)

    rows = input_rows[keep]
    experts = flat_experts[keep]
    ranks = a.source_rank[token_of_row[keep]]
    order = np.lexsort((rows, ranks, experts))
    inverse_map = rows[order]

    local_experts = np.arange(a.num_experts)[expert_rank(np.arange(a.num_experts), a.num_experts, n) == my_rank]
    counts = np.array([int((experts == e).sum()) for e in local_experts], dtype=np.int64)
    row_map = {int(r): i for i, r in enumerate(inverse_map)}
    return ScatterMap(row_map, inverse_map, counts, local_experts, experts[order], ranks[order])


def _tiles_spanned(position: int, count: int, tile_rows: int) -> int:
    return (position + count - 1) // tile_rows - position // tile_rows + 1


def best_block_order(ranks: Sequence[int], counts: Sequence[int], tile_rows: int) -> Tuple[int, ...]:
    """
    rank 块的排列顺序：依赖 rank 总数最少，相同代价取字典序最小（升序最优时即为升序）

    代价：位置 p、大小 c 的块跨越的 tile 数；超过 MAX_DP_RANKS 个 rank 时直接升序
    """
    ranks = list(ranks)
    k = len(ranks)
    if k <= 1 or k > MAX_DP_RANKS:
        return tuple(ranks)

    full = (1 << k) - 1
    filled = [0] * (full + 1)
    for mask in range(1, full + 1):
        low = (mask & -mask).bit_length() - 1
        filled[mask] = filled[mask & (mask - 1)] + counts[low]

    best: List[Optional[Tuple[int, Tuple[int, ...]]]] = [None] * (full + 1)
    best[0] = (0, ())
    for mask in range(full + 1):
        if best[mask] is None:
            continue
        cost, order = best[mask]
        position = filled[mask]
        for i in range(k):
            if mask & (1 << i):
                continue
            candidate = (cost + _tiles_spanned(position, counts[i], tile_rows), order + (ranks[i],))
            nxt = mask | (1 << i)
            if best[nxt] is None or candidate < best[nxt]:
                best[nxt] = candidate
    return best[full][1]


def _layout_expert(ranks: np.ndarray, tile_rows: int, sort: bool) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """单个专家内的行顺序（相对下标）与 rank 块顺序"""
    if not sort:
        return np.arange(ranks.shape[0]), ()
    distinct, counts = np.unique(ranks, return_counts=True)
    block_order = best_block_order([int(r) for r in distinct], [int(c) for c in counts], tile_rows)
    order = np.concatenate([np.flatnonzero(ranks == r) for r in block_order]) if block_order \
        else np.arange(0)
    return order.astype(np.int64), block_order


def _slice_tiles(expert: int, start: int, ranks: np.ndarray, tile_rows: int) -> List[Tile]:
    tiles = []
    for offset in range(0, ranks.shape[0], tile_rows):
        chunk = ranks[offset:offset + tile_rows]
        tiles.append(Tile(expert, start + offset, start + offset + chunk.shape[0],
                          frozenset(int(r) for r in chunk)))
    return tiles


def sort_tokens_for_tiles(smap: ScatterMap, a: Optional[RoutingAssignment] = None,
                          tile_rows: int = 128, sort: bool = True) -> TileLayout:
    """
    按来源 rank 重排每个专家的行并切分 tile

    Args:
        smap: 本 rank 的行映射
        a: 路由结果（来源 rank 已记录在 smap 中，保留参数用于一致性检查）
        tile_rows: 每个 tile 的行数
        sort: False 时保持 ScatterMap 原有顺序（natural）

    Returns:
        TileLayout: tile 列表，依赖集合为每个 tile 内出现的来源 rank
    """
    if tile_rows < 1:
        raise DomainError(f"tile_rows 必须 ≥ 1，实际为 {tile_rows}")
    if a is not None and smap.rows and int(smap.row_source_rank.max()) >= a.n:
        raise DomainError("ScatterMap 与 RoutingAssignment 的 rank 数不一致")

    tiles: List[Tile] = []
    row_order: List[np.ndarray] = []
    rank_order: Dict[int, Tuple[int, ...]] = {}
    start = 0
    for expert, count in zip(smap.local_experts, smap.per_expert_counts):
        if count == 0:
            continue
        expert_rows = np.arange(start, start + int(count))
        order, blocks = _layout_expert(smap.row_source_rank[expert_rows], tile_rows, sort)
        placed = expert_rows[order]
        row_order.append(placed)
        rank_order[int(expert)] = blocks
        tiles.extend(_slice_tiles(int(expert), start, smap.row_source_rank[placed], tile_rows))
        start += int(count)

    rows = np.concatenate(row_order) if row_order else np.zeros(0, dtype=np.int64)
    return TileLayout(tuple(tiles), tile_rows, rows, smap.row_source_rank[rows], rank_order)


def tile_layout_from_ranks(ranks: Sequence[int], tile_rows: int, sort: bool = True) -> TileLayout:
    """单专家的 tile 划分，ranks 为按到达顺序排列的各行来源 rank"""
    if tile_rows < 1:
        raise DomainError(f"tile_rows 必须 ≥ 1，实际为 {tile_rows}")
    ranks = np.asarray(ranks, dtype=np.int64)
    order, blocks = _layout_expert(ranks, tile_rows, sort)
    placed = ranks[order]
    tiles = tuple(_slice_tiles(0, 0, placed, tile_rows))
    return TileLayout(tiles, tile_rows, order, placed, {0: blocks})


def balance_metrics(a: RoutingAssignment, n: Optional[int] = None) -> BalanceStats:
    """
    组粒度负载统计

    balance_loss = n·Σ_g (load_g/Σload)·prob_g，其中 load_g 为保留槽位数，
    prob_g 为路由分配（丢弃前）落入组 g 的比例；均匀负载时为 1
    """
    n = a.n if n is None else n
    if n < 1:
        raise DomainError(f"n 必须 ≥ 1，实际为 {n}")
    groups = expert_rank(a.assignments.reshape(-1), a.num_experts, n)
    retained = ~a.dropped.reshape(-1)

    load = np.bincount(groups[retained], minlength=n).astype(np.int64)
    prob = np.bincount(groups, minlength=n) / groups.shape[0]
    total = load.sum()
    loss = float(n * np.sum(load / total * prob)) if total > 0 else 0.0
    per_expert = np.bincount(a.assignments.reshape(-1)[retained], minlength=a.num_experts)
    drop_rate = float(a.dropped.sum()) / a.dropped.size
    return BalanceStats(load, loss, a.capacity, drop_rate, per_expert.astype(np.int64))
