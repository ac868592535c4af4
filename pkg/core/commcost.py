"""
通信代价模块

闭式通信量公式（注意力 TP/SP/CP、FFN EP/TP）、两层带宽的 alpha-beta 集合通信延迟模型，
以及分层参数同步模型。

约定：
- 体积公式返回元素个数（精确有理数 Fraction），只有换算到秒时才进入浮点
- CommVolume.bytes 表示参与集合通信的每 rank 缓冲区字节数；
  ring 集合通信每个 rank 实际收发 bytes·(p−1)/p
- A2A 分发：每个 rank 向外发送 k·b·s·h/n 个元素（token 复制到 k 个专家），
  两次 all-to-all（分发 + 合并）的线上总量恰为 2·(k/n)·b·s·h·(n−1)/n
"""

import logging
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import List, Optional, Tuple, Union

from .errors import DomainError
from .job_types import AttnStrategy, ClusterConfig, EpPattern, LinkConfig, PrecisionConfig

logger = logging.getLogger(__name__)

Number = Union[int, Fraction]


class Collective(Enum):
    """集合通信类型"""
    ALL_GATHER = "all_gather"
    REDUCE_SCATTER = "reduce_scatter"
    ALL_TO_ALL = "all_to_all"


class Tier(Enum):
    """带宽层级"""
    INTRA = "intra"     # NVLink
    INTER = "inter"     # 网卡


@dataclass(frozen=True)
class LinkModel:
    """alpha-beta 延迟模型，alpha 单位秒，beta 单位秒/字节"""
    alpha_intra: float
    beta_intra: float
    alpha_inter: float
    beta_inter: float
    a2a_penalty: float = 1.4

    def __post_init__(self):
        for key in ("alpha_intra", "beta_intra", "alpha_inter", "beta_inter"):
            if getattr(self, key) < 0:
                raise DomainError(f"LinkModel.{key} 必须 ≥ 0")
        if self.beta_inter < self.beta_intra:
            raise DomainError("LinkModel.beta_inter 不能小于 beta_intra")
        if self.a2a_penalty < 1:
            raise DomainError("LinkModel.a2a_penalty 必须 ≥ 1")

    @classmethod
    def from_cluster(cls, cluster: ClusterConfig, link: Optional[LinkConfig] = None) -> "LinkModel":
        """由集群带宽与 link 配置节推导，实际带宽 = 标称带宽 × 效率"""
        link = link or LinkConfig()
        beta_intra = 1.0 / (cluster.intra_bw * link.intra_efficiency)
        beta_inter = 1.0 / (cluster.inter_bw * link.inter_efficiency)
        return cls(
            alpha_intra=link.alpha_intra_us * 1e-6,
            beta_intra=beta_intra,
            alpha_inter=link.alpha_inter_us * 1e-6,
            beta_inter=max(beta_inter, beta_intra),
            a2a_penalty=link.a2a_penalty,
        )

    def alpha(self, tier: Tier) -> float:
        return self.alpha_intra if tier == Tier.INTRA else self.alpha_inter

    def beta(self, tier: Tier) -> float:
        return self.beta_intra if tier == Tier.INTRA else self.beta_inter


@dataclass(frozen=True)
class CommVolume:
    """一次集合通信的缓冲区大小"""
    elements: Fraction
    bytes: Fraction
    tier: Tier
    collective: Collective
    estimate: bool = False      # CP 的体积只是估计

    def __post_init__(self):
        if self.elements < 0:
            raise DomainError("CommVolume.elements 必须 ≥ 0")

    @classmethod
    def of(cls, elements: Number, bytes_per_element: int, tier: Tier,
           collective: Collective, estimate: bool = False) -> "CommVolume":
        elements = Fraction(elements)
        return cls(elements, elements * bytes_per_element, tier, collective, estimate)

    def wire_bytes(self, participants: int) -> Fraction:
        """每个 rank 实际在线上收发的字节数"""
        return self.bytes * Fraction(participants - 1, participants)


@dataclass(frozen=True)
class SyncStep:
    collective: Collective
    tier: Tier
    bytes: Fraction
    participants: int


@dataclass(frozen=True)
class SyncPlan:
    """分层参数同步计划，体积为每 rank 线上字节"""
    steps: Tuple[SyncStep, ...]
    inter_volume: Fraction
    intra_volume: Fraction
    est_time: float = 0.0


def _check_count(name: str, value: int, minimum: int = 1):
    if value < minimum:
        raise DomainError(f"{name} 必须 ≥ {minimum}，实际为 {value}")


def tier_for_group(n: int, gpus_per_node: int) -> Tier:
    """n 个 rank 的通信组落在哪一层：不超过单节点则走 NVLink"""
    return Tier.INTRA if n <= gpus_per_node else Tier.INTER


def attention_tp_volume(b: int, s: int, h: int, n: int) -> Fraction:
    """TP 注意力通信量：2·b·s·h·(n−1)/n"""
    _check_count("n", n)
    return Fraction(2 * b * s * h * (n - 1), n)


def attention_sp_volume(b: int, s: int, h: int, n: int, m: int) -> Fraction:
    """SP 注意力通信量：TP 通信量 × (2 + 2/m)/n"""
    _check_count("n", n)
    _check_count("m", m)
    return attention_tp_volume(b, s, h, n) * (2 + Fraction(2, m)) / n


def attention_cp_volume(b: int, s: int, h: int, n: int, m: int) -> Fraction:
    """CP 注意力通信量估计：all-gather K 与 V，2·b·s·(h/m)·(n−1)/n"""
    _check_count("n", n)
    _check_count("m", m)
    return Fraction(2 * b * s * h * (n - 1), n * m)


def ffn_ep_volume(b: int, s: int, h: int, n: int, k: int) -> Fraction:
    """EP FFN 通信量：2·(k/n)·b·s·h·(n−1)/n"""
    _check_count("n", n)
    _check_count("k", k)
    return Fraction(k, n) * Fraction(2 * b * s * h * (n - 1), n)


def ffn_tp_volume(b: int, s: int, h: int, n: int) -> Fraction:
    """TP FFN 通信量，与 TP 注意力相同"""
    return attention_tp_volume(b, s, h, n)


def collective_time(v: CommVolume, participants: int, link: LinkModel) -> float:
    """
    alpha-beta 集合通信时间

    AG/RS：alpha·(p−1) + bytes·beta·(p−1)/p
    A2A：(alpha + bytes·beta·(p−1)/p)·a2a_penalty

    Args:
        v: 通信缓冲区
        participants: 参与 rank 数
        link: 延迟模型

    Returns:
        float: 秒
    """
    if participants < 1:
        raise DomainError(f"participants 必须 ≥ 1，实际为 {participants}")
    if participants == 1:
        return 0.0
    alpha = link.alpha(v.tier)
    transfer = float(v.wire_bytes(participants)) * link.beta(v.tier)
    if v.collective == Collective.ALL_TO_ALL:
        return (alpha + transfer) * link.a2a_penalty
    return alpha * (participants - 1) + transfer


def ep_dispatch_volumes(pattern: EpPattern, b: int, s: int, h: int, n: int, k: int,
                        precision: PrecisionConfig, tier: Tier = Tier.INTRA) -> List[CommVolume]:
    """
    EP 前向一层的通信缓冲区列表

    a2a：分发与合并两次 all-to-all，每次 k·b·s·h/n 个元素
    ag_rs：一次 all-gather 与一次 reduce-scatter，每次 b·s·h 个元素
    """
    _check_count("n", n)
    _check_count("k", k)
    bpe = precision.activation_comm_bytes
    pattern = EpPattern(pattern)
    if pattern == EpPattern.A2A:
        buffer = Fraction(k * b * s * h, n)
        return [CommVolume.of(buffer, bpe, tier, Collective.ALL_TO_ALL) for _ in range(2)]
    buffer = Fraction(b * s * h)
    return [
        CommVolume.of(buffer, bpe, tier, Collective.ALL_GATHER),
        CommVolume.of(buffer, bpe, tier, Collective.REDUCE_SCATTER),
    ]


def ep_dispatch_time(pattern: EpPattern, b: int, s: int, h: int, n: int, k: int,
                     link: LinkModel, precision: PrecisionConfig,
                     tier: Tier = Tier.INTRA) -> float:
    """EP 前向一层的通信时间（秒）"""
    volumes = ep_dispatch_volumes(pattern, b, s, h, n, k, precision, tier)
    return sum(collective_time(v, n, link) for v in volumes)


def sync_step_time(step: SyncStep, link: LinkModel) -> float:
    """同步计划中单个步骤的耗时"""
    volume = CommVolume(Fraction(step.bytes), Fraction(step.bytes), step.tier, step.collective)
    return collective_time(volume, step.participants, link)


def hierarchical_sync_plan(p_attn: Number, n: int, d: int, link: Optional[LinkModel] = None,
                           strategy: AttnStrategy = AttnStrategy.SP) -> SyncPlan:
    """
    注意力参数的分层同步计划

    TP：节点间 RS(P/n) + AG(P/n)
    SP：节点内 RS(P) → 节点间 RS(P/n) → 节点间 AG(P/n) → 节点内 AG(P)；n=1 时退化为 TP

    Args:
        p_attn: 注意力参数字节数 P
        n: 节点内并行度
        d: 数据并行度
        link: 给出时计算 est_time
        strategy: TP 或 SP（CP 与 SP 一样复制注意力参数）

    Returns:
        SyncPlan: 体积为每 rank 线上字节
    """
    _check_count("n", n)
    _check_count("d", d)
    p = Fraction(p_attn)
    shard = p / n
    inter_steps = [
        SyncStep(Collective.REDUCE_SCATTER, Tier.INTER, shard, d),
        SyncStep(Collective.ALL_GATHER, Tier.INTER, shard, d),
    ]
    if strategy == AttnStrategy.TP or n == 1:
        steps = inter_steps
    else:
        steps = [SyncStep(Collective.REDUCE_SCATTER, Tier.INTRA, p, n)] + inter_steps + \
                [SyncStep(Collective.ALL_GATHER, Tier.INTRA, p, n)]

    inter_volume = sum((s.bytes * Fraction(s.participants - 1, s.participants)
                        for s in steps if s.tier == Tier.INTER), Fraction(0))
    intra_volume = sum((s.bytes * Fraction(s.participants - 1, s.participants)
                        for s in steps if s.tier == Tier.INTRA), Fraction(0))
    est_time = sum(sync_step_time(s, link) for s in steps) if link is not None else 0.0
    return SyncPlan(tuple(steps), inter_volume, intra_volume, est_time)


def hierarchical_ratio(n: int, d: Optional[int], intra_bw: float, inter_bw: float) -> Fraction:
    """
    SP 同步中节点间延迟与节点内延迟之比：(1/n)·(intra/inter)·n(d−1)/(d(n−1))

    d 为 None 时取 d→∞ 的极限 (1/n)·(intra/inter)·n/(n−1)
    """
    if n < 2:
        raise DomainError(f"n 必须 ≥ 2，实际为 {n}")
    if d is not None and d < 2:
        raise DomainError(f"d 必须 ≥ 2，实际为 {d}")
    if intra_bw <= 0 or inter_bw <= 0:
        raise DomainError("带宽必须 > 0")
    bw_ratio = Fraction(intra_bw) / Fraction(inter_bw)
    tail = Fraction(n, n - 1) if d is None else Fraction(n * (d - 1), d * (n - 1))
    return Fraction(1, n) * bw_ratio * tail


def dp_sync_volumes(grad_bytes_fp32: Number, compressed: bool,
                    tier: Tier = Tier.INTER) -> List[CommVolume]:
    """DP 梯度同步的缓冲区：未压缩 RS + AG（FP32），压缩 A2A + AG（BF16，字节减半）"""
    grad = Fraction(grad_bytes_fp32)
    if compressed:
        elements = grad / 2
        return [
            CommVolume(elements, elements, tier, Collective.ALL_TO_ALL),
            CommVolume(elements, elements, tier, Collective.ALL_GATHER),
        ]
    return [
        CommVolume(grad, grad, tier, Collective.REDUCE_SCATTER),
        CommVolume(grad, grad, tier, Collective.ALL_GATHER),
    ]


def dp_sync_time(grad_bytes_fp32: Number, d: int, link: LinkModel, compressed: bool,
                 tier: Tier = Tier.INTER) -> float:
    """DP 梯度同步时间（秒），d=1 时为 0"""
    _check_count("d", d)
    return sum(collective_time(v, d, link) for v in dp_sync_volumes(grad_bytes_fp32, compressed, tier))


def explain_volumes(b: int, s: int, h: int, n: int, m: int, k: int) -> List[Tuple[str, str, Fraction]]:
    """
    代入数值后的通信量公式，供 plan --explain 输出

    Returns:
        list: (名称, 公式, 元素个数)
    """
    return [
        ("attention_tp", f"2·{b}·{s}·{h}·({n}−1)/{n}", attention_tp_volume(b, s, h, n)),
        ("attention_sp", f"2·{b}·{s}·{h}·({n}−1)/{n}·(2+2/{m})/{n}", attention_sp_volume(b, s, h, n, m)),
        ("attention_cp", f"2·{b}·{s}·({h}/{m})·({n}−1)/{n} [estimate]", attention_cp_volume(b, s, h, n, m)),
        ("ffn_ep", f"2·({k}/{n})·{b}·{s}·{h}·({n}−1)/{n}", ffn_ep_volume(b, s, h, n, k)),
        ("ffn_tp", f"2·{b}·{s}·{h}·({n}−1)/{n}", ffn_tp_volume(b, s, h, n)),
    ]
