"""
作业描述类型模块

定义模型、集群、精度、作业以及并行方案的数据结构，
并提供所有公式共用的派生量计算 derive()
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, Mapping, Optional

from .errors import ConfigValidationError


class NumberFormat(Enum):
    """数值格式枚举"""
    FP32 = "FP32"
    BF16 = "BF16"
    FP8_E4M3 = "FP8-E4M3"


BYTES_PER_ELEMENT: Dict[NumberFormat, int] = {
    NumberFormat.FP32: 4,
    NumberFormat.BF16: 2,
    NumberFormat.FP8_E4M3: 1,
}

# 参数以 BF16 保存，主梯度与优化器状态为 FP32
PARAM_BYTES = 2
MAIN_GRAD_BYTES = 4
OPTIMIZER_BYTES = 12          # FP32 主参数 + 两个动量

QUANT_GRANULARITIES = ("per_tensor", "per_token", "per_channel", "grouped")
DP_COMPRESS_MODES = ("naive", "inplace", "off")


def bytes_per_element(fmt: NumberFormat) -> int:
    """返回格式的单元素字节数"""
    return BYTES_PER_ELEMENT[NumberFormat(fmt)]


def _require(condition: bool, field_path: str, message: str):
    if not condition:
        raise ConfigValidationError(field_path, message)


class AttnStrategy(Enum):
    """注意力并行策略"""
    TP = "TP"
    SP = "SP"
    CP = "CP"
    DP = "DP"       # 仅用于枚举后拒绝


class FfnStrategy(Enum):
    """FFN 并行策略"""
    TP = "TP"
    EP = "EP"


class EpPattern(Enum):
    """EP 通信模式"""
    A2A = "a2a"
    AG_RS = "ag_rs"


@dataclass(frozen=True)
class ModelConfig:
    """MoE 模型结构"""
    num_layers: int
    h: int                      # 隐藏维度
    num_heads: int
    m: int                      # query 头数 / KV 头数
    h_ffn: int                  # 单个专家的中间维度
    num_experts: int
    top_k: int
    vocab_size: int = 65536
    seq_len: int = 8192
    micro_batch: int = 1
    global_batch: int = 32
    name: str = "custom"

    def __post_init__(self):
        for key in ("num_layers", "h", "num_heads", "m", "h_ffn", "num_experts",
                    "top_k", "vocab_size", "seq_len", "micro_batch", "global_batch"):
            value = getattr(self, key)
            _require(isinstance(value, int) and not isinstance(value, bool),
                     f"model.{key}", f"必须为整数，实际为 {value!r}")
            _require(value >= 1, f"model.{key}", f"必须 ≥ 1，实际为 {value}")
        _require(self.num_heads % self.m == 0, "model.m",
                 f"num_heads={self.num_heads} 不能被 m={self.m} 整除")
        _require(self.top_k <= self.num_experts, "model.top_k",
                 f"top_k={self.top_k} 超过 num_experts={self.num_experts}")

    @property
    def tokens_per_micro_batch(self) -> int:
        """每个微批的 token 数 b·s"""
        return self.micro_batch * self.seq_len


@dataclass(frozen=True)
class ClusterConfig:
    """集群硬件描述，带宽单位为 bytes/s"""
    gpus_per_node: int
    num_nodes: int
    intra_bw: float             # NVLink 层
    inter_bw: float             # 网卡层（每 GPU）
    peak_flops: float           # 每 GPU BF16 峰值
    sm_count: int
    mem_capacity: float         # 每 GPU 显存字节
    mem_bw: float = 3.4e12      # 显存带宽
    copy_engine_bw: Optional[float] = None
    name: str = "custom"

    def __post_init__(self):
        for key in ("gpus_per_node", "num_nodes", "sm_count"):
            _require(getattr(self, key) >= 1, f"cluster.{key}", "必须 ≥ 1")
        _require(self.inter_bw > 0, "cluster.inter_bw_gbps", "必须 > 0")
        _require(self.intra_bw >= self.inter_bw, "cluster.intra_bw_gbps",
                 "节点内带宽不能低于节点间带宽")
        _require(self.peak_flops > 0, "cluster.peak_tflops", "必须 > 0")
        _require(self.mem_capacity > 0, "cluster.mem_capacity_gb", "必须 > 0")
        _require(self.mem_bw > 0, "cluster.mem_bw_tbps", "必须 > 0")
        if self.copy_engine_bw is None:
            object.__setattr__(self, "copy_engine_bw", self.intra_bw)
        _require(self.copy_engine_bw > 0, "cluster.copy_engine_bw_gbps", "必须 > 0")

    @property
    def total_gpus(self) -> int:
        return self.gpus_per_node * self.num_nodes


@dataclass(frozen=True)
class LinkConfig:
    """集合通信延迟模型参数"""
    alpha_intra_us: float = 2.0
    alpha_inter_us: float = 10.0
    intra_efficiency: float = 0.5   # NVLink 标称值为双向聚合带宽
    inter_efficiency: float = 0.8
    a2a_penalty: float = 1.4

    def __post_init__(self):
        _require(self.alpha_intra_us >= 0, "link.alpha_intra_us", "必须 ≥ 0")
        _require(self.alpha_inter_us >= 0, "link.alpha_inter_us", "必须 ≥ 0")
        for key in ("intra_efficiency", "inter_efficiency"):
            value = getattr(self, key)
            _require(0 < value <= 1, f"link.{key}", f"必须位于 (0, 1]，实际为 {value}")
        _require(self.a2a_penalty >= 1, "link.a2a_penalty", "必须 ≥ 1")


@dataclass(frozen=True)
class PrecisionConfig:
    """数值格式配置"""
    compute_format: NumberFormat = NumberFormat.BF16
    grad_sync_format: NumberFormat = NumberFormat.BF16
    tp_comm_format: NumberFormat = NumberFormat.BF16
    quant_scheme: Optional[str] = None      # FP8 通信时的量化粒度
    quant_group_size: int = 128

    def __post_init__(self):
        for key, allowed in (
            ("compute_format", (NumberFormat.BF16, NumberFormat.FP8_E4M3)),
            ("grad_sync_format", (NumberFormat.FP32, NumberFormat.BF16)),
            ("tp_comm_format", (NumberFormat.BF16, NumberFormat.FP8_E4M3)),
        ):
            raw = getattr(self, key)
            try:
                fmt = NumberFormat(raw)
            except ValueError:
                raise ConfigValidationError(f"precision.{key}", f"未知格式 {raw!r}")
            _require(fmt in allowed, f"precision.{key}",
                     f"{fmt.value} 不在允许范围 {[f.value for f in allowed]}")
            object.__setattr__(self, key, fmt)

        uses_fp8 = NumberFormat.FP8_E4M3 in (self.compute_format, self.tp_comm_format)
        if uses_fp8:
            _require(self.quant_scheme is not None, "precision.quant_scheme",
                     "使用 FP8 时必须提供量化方案")
        if self.quant_scheme is not None:
            _require(self.quant_scheme in QUANT_GRANULARITIES, "precision.quant_scheme",
                     f"未知量化粒度 {self.quant_scheme!r}")
        _require(self.quant_group_size >= 1, "precision.quant_group_size", "必须 ≥ 1")

    @property
    def activation_comm_bytes(self) -> int:
        """激活通信的单元素字节数"""
        return bytes_per_element(self.tp_comm_format)

    @property
    def grad_compressed(self) -> bool:
        """DP 梯度同步是否压缩为 BF16"""
        return self.grad_sync_format == NumberFormat.BF16


@dataclass(frozen=True)
class JobConfig:
    """作业级参数"""
    pp: int = 1
    vpp: int = 1
    zero_stage: int = 1
    capacity_factor: float = 1.0
    remat: bool = True
    dp_compress: str = "inplace"
    tile_rows: int = 128
    sm_for_comm: int = 16
    sm_saturation: int = 16
    seed: int = 0

    def __post_init__(self):
        for key in ("pp", "vpp", "tile_rows", "sm_for_comm", "sm_saturation"):
            _require(getattr(self, key) >= 1, f"job.{key}", "必须 ≥ 1")
        _require(self.zero_stage in (0, 1), "job.zero_stage", "只支持 0 或 1")
        _require(self.capacity_factor > 0, "job.capacity_factor", "必须 > 0")
        _require(self.dp_compress in DP_COMPRESS_MODES, "job.dp_compress",
                 f"必须是 {DP_COMPRESS_MODES} 之一")
        _require(self.seed >= 0, "job.seed", "必须 ≥ 0")


MEMORY_BOUND_KINDS = ("norm", "swiglu", "router", "scatter", "gather", "weighted_sum")


@dataclass(frozen=True)
class EfficiencyTable:
    """各类算子的硬件利用率，取值 (0, 1]"""
    entries: Mapping[str, float] = field(default_factory=lambda: {
        "gemm": 0.75,
        "grouped_gemm": 0.65,
        "attention_core": 0.6,
        "memory_bound": 0.8,
    })

    def __post_init__(self):
        for kind, value in self.entries.items():
            _require(0 < value <= 1, f"efficiency.{kind}", f"必须位于 (0, 1]，实际为 {value}")

    def lookup(self, kind: str) -> float:
        """查找算子类别的利用率，访存类算子回落到 memory_bound"""
        if kind in self.entries:
            return self.entries[kind]
        if kind in MEMORY_BOUND_KINDS and "memory_bound" in self.entries:
            return self.entries["memory_bound"]
        raise ConfigValidationError(f"efficiency.{kind}", "缺少该算子类别的利用率")


@dataclass(frozen=True)
class ParallelismPlan:
    """一个完整的并行方案"""
    attn_strategy: AttnStrategy
    ffn_strategy: FfnStrategy
    ep_pattern: EpPattern
    n: int              # 节点内并行度
    pp: int = 1
    vpp: int = 1
    dp: int = 1
    zero_stage: int = 1

    @property
    def name(self) -> str:
        label = f"{self.attn_strategy.value}+{self.ffn_strategy.value}"
        if self.ffn_strategy == FfnStrategy.EP:
            label += f"({self.ep_pattern.value})"
        return label

    @property
    def total_gpus(self) -> int:
        return self.n * self.pp * self.dp

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "attn_strategy": self.attn_strategy.value,
            "ffn_strategy": self.ffn_strategy.value,
            "ep_pattern": self.ep_pattern.value,
            "n": self.n,
            "pp": self.pp,
            "vpp": self.vpp,
            "dp": self.dp,
            "zero_stage": self.zero_stage,
        }


@dataclass(frozen=True)
class DerivedQuantities:
    """所有模块共用的派生量"""
    f: Fraction                     # h_ffn / h
    attn_params: Fraction           # 每层 QKV + 输出投影参数个数
    p_attn: Fraction                # 每层注意力参数字节数
    flops_per_token: int            # 前向 FLOP / token
    model_flops_per_iter: int       # 每次迭代的模型 FLOP（前向 + 反向）


def attention_params(model: ModelConfig) -> Fraction:
    """每层注意力参数个数：h·(h + 2h/m) + h·h"""
    h = Fraction(model.h)
    return h * (h + 2 * h / model.m) + h * h


def expert_params(model: ModelConfig) -> int:
    """每层全部专家参数个数（SwiGLU 三个矩阵）"""
    return model.num_experts * 3 * model.h * model.h_ffn


def forward_flops_per_token(model: ModelConfig) -> int:
    """
    每 token 前向 FLOP

    约定：每个 GEMM 记 2·M·N·K；注意力核心（QK^T 与 PV）每 token 记 4·s·h，
    不扣除因果掩码；专家部分只计激活的 top_k 条路径；输出层计 2·vocab·h
    """
    activated = attention_params(model) + model.top_k * 3 * model.h * model.h_ffn \
        + model.h * model.num_experts
    per_layer = 2 * activated + 4 * model.seq_len * model.h
    total = model.num_layers * per_layer + 2 * model.vocab_size * model.h
    return math.ceil(total)


def derive(model: ModelConfig, precision: PrecisionConfig) -> DerivedQuantities:
    """
    计算派生量

    Args:
        model: 模型结构
        precision: 精度配置

    Returns:
        DerivedQuantities: f 为精确有理数，FLOP 为前向 + 反向（3 倍前向）；
        p_attn 固定按 BF16 参数计，FP8 只改变计算与激活通信格式，不改变参数存储
    """
    attn = attention_params(model)
    fwd = forward_flops_per_token(model)
    return DerivedQuantities(
        f=Fraction(model.h_ffn, model.h),
        attn_params=attn,
        p_attn=attn * PARAM_BYTES,
        flops_per_token=fwd,
        model_flops_per_iter=3 * fwd * model.global_batch * model.seq_len,
    )
