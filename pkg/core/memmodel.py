"""
显存模型模块

按 GPU 统计参数、梯度、优化器状态、激活（完整保存 / 选择性重计算）与 DP 压缩的临时缓冲区。

激活系数以 b·s·h/n 个元素为单位；字节数按 BF16 存储换算。
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, FrozenSet, NamedTuple, Optional

from .errors import DomainError
from .job_types import (
    MAIN_GRAD_BYTES,
    OPTIMIZER_BYTES,
    PARAM_BYTES,
    AttnStrategy,
    ModelConfig,
    ParallelismPlan,
    PrecisionConfig,
    attention_params,
    expert_params,
)

logger = logging.getLogger(__name__)

ACTIVATION_BYTES = 2

Coefficient = Callable[[int, int, Fraction, Fraction], Fraction]

# 一层 MoE 前向产生的激活，系数为 (n, k, f, 1/m) 的函数，单位 b·s·h/n
LAYER_ACTIVATIONS: Dict[str, Coefficient] = {
    # 注意力
    "attn_norm_in": lambda n, k, f, inv_m: Fraction(1),
    "attn_norm_out": lambda n, k, f, inv_m: Fraction(1),
    "qkv_local": lambda n, k, f, inv_m: 1 + 2 * inv_m,
    "q_rotary": lambda n, k, f, inv_m: Fraction(1),
    "k_rotary": lambda n, k, f, inv_m: inv_m,
    "qkv_heads": lambda n, k, f, inv_m: 1 + 2 * inv_m,
    "attn_core_out": lambda n, k, f, inv_m: Fraction(1),
    "attn_out_local": lambda n, k, f, inv_m: Fraction(1),
    "out_proj_out": lambda n, k, f, inv_m: Fraction(1),
    "attn_residual_out": lambda n, k, f, inv_m: Fraction(1),
    # FFN
    "ffn_norm_in": lambda n, k, f, inv_m: Fraction(1),
    "ffn_norm_out": lambda n, k, f, inv_m: Fraction(1),
    "ffn_in": lambda n, k, f, inv_m: Fraction(n),
    "scatter_out": lambda n, k, f, inv_m: Fraction(k),
    "fc1_out": lambda n, k, f, inv_m: 2 * k * f,
    "fc2_in": lambda n, k, f, inv_m: k * f,
    "fc2_out": lambda n, k, f, inv_m: Fraction(k),
    "ffn_out": lambda n, k, f, inv_m: Fraction(n),
    "ffn_residual_out": lambda n, k, f, inv_m: Fraction(1),
}

# 计算代价高、需要保留到反向的激活
RETAINED_ACTIVATIONS = frozenset({
    "attn_norm_in", "qkv_heads", "attn_core_out", "ffn_norm_in", "fc1_out",
})


@dataclass(frozen=True)
class RematPolicy:
    """选择性重计算策略"""
    enabled: bool = True
    retained_set: FrozenSet[str] = RETAINED_ACTIVATIONS
    recompute_set: FrozenSet[str] = field(
        default_factory=lambda: frozenset(LAYER_ACTIVATIONS) - RETAINED_ACTIVATIONS)

    def __post_init__(self):
        retained = frozenset(self.retained_set)
        recompute = frozenset(self.recompute_set)
        if retained & recompute:
            raise DomainError(f"保留集与重计算集相交: {sorted(retained & recompute)}")
        missing = frozenset(LAYER_ACTIVATIONS) - (retained | recompute)
        if missing:
            raise DomainError(f"激活未被覆盖: {sorted(missing)}")
        unknown = (retained | recompute) - frozenset(LAYER_ACTIVATIONS)
        if unknown:
            raise DomainError(f"未知激活: {sorted(unknown)}")
        object.__setattr__(self, "retained_set", retained)
        object.__setattr__(self, "recompute_set", recompute)

    @classmethod
    def disabled(cls) -> "RematPolicy":
        return cls(enabled=False)


@dataclass(frozen=True)
class MemoryBreakdown:
    """每 GPU 显存构成，单位字节"""
    params: Fraction
    grads: Fraction
    optimizer: Fraction
    activations: Fraction
    transient_peak: Fraction
    total: Fraction

    def to_dict(self) -> Dict[str, float]:
        return {
            "params": float(self.params),
            "grads": float(self.grads),
            "optimizer": float(self.optimizer),
            "activations": float(self.activations),
            "transient_peak": float(self.transient_peak),
            "total": float(self.total),
        }


class ParamStateMemory(NamedTuple):
    params: Fraction
    grads: Fraction
    optimizer: Fraction


def _check(n: int, m: int):
    if n < 1:
        raise DomainError(f"n 必须 ≥ 1，实际为 {n}")
    if m < 1:
        raise DomainError(f"m 必须 ≥ 1，实际为 {m}")


def activation_coefficient(n: int, k: int, f, m: int, names=None) -> Fraction:
    """指定激活集合的系数之和（单位 b·s·h/n），names 为 None 表示全部"""
    _check(n, m)
    f = Fraction(f)
    inv_m = Fraction(1, m)
    selected = LAYER_ACTIVATIONS if names is None else names
    return sum((LAYER_ACTIVATIONS[name](n, k, f, inv_m) for name in selected), Fraction(0))


def activation_full(b: int, s: int, h: int, n: int, k: int, f, m: int) -> Fraction:
    """完整保存时每层激活元素数：(2n + 2k + 3kf + 12 + 5/m)·b·s·h/n"""
    _check(n, m)
    f = Fraction(f)
    coef = 2 * n + 2 * k + 3 * k * f + 12 + Fraction(5, m)
    return coef * b * s * h / n


def activation_remat(b: int, s: int, h: int, n: int, k: int, f, m: int) -> Fraction:
    """选择性重计算后每层激活元素数：(2kf + 4 + 2/m)·b·s·h/n"""
    _check(n, m)
    f = Fraction(f)
    coef = 2 * k * f + 4 + Fraction(2, m)
    return coef * b * s * h / n


def remat_reduction(model: ModelConfig, n: int) -> Fraction:
    """重计算带来的每层激活降低比例 1 − remat/full"""
    f = Fraction(model.h_ffn, model.h)
    b, s, h = model.micro_batch, model.seq_len, model.h
    full = activation_full(b, s, h, n, model.top_k, f, model.m)
    return 1 - activation_remat(b, s, h, n, model.top_k, f, model.m) / full


def layers_per_stage(model: ModelConfig, pp: int) -> int:
    return math.ceil(model.num_layers / pp)


def activations_in_flight(pp: int, microbatches: int) -> int:
    """1F1B 调度下每个阶段同时驻留的微批数"""
    return max(1, min(pp, microbatches))


def param_count_per_gpu(plan: ParallelismPlan, model: ModelConfig) -> Fraction:
    """每 GPU 持有的参数个数"""
    n = plan.n
    attn = attention_params(model)
    if plan.attn_strategy == AttnStrategy.TP:
        attn = attn / n
    experts = Fraction(expert_params(model), n)
    replicated = model.h * model.num_experts + 2 * model.h
    per_layer = attn + experts + replicated

    vocab_shard = Fraction(model.vocab_size * model.h, n)
    embeddings = 2 * vocab_shard if plan.pp == 1 else vocab_shard
    return layers_per_stage(model, plan.pp) * per_layer + embeddings


def param_state_memory(plan: ParallelismPlan, model: ModelConfig,
                       precision: Optional[PrecisionConfig] = None) -> ParamStateMemory:
    """
    参数、主梯度与优化器状态字节数

    Args:
        plan: 并行方案
        model: 模型结构
        precision: 精度配置（参数恒为 BF16，主梯度与优化器为 FP32）

    Returns:
        ParamStateMemory: (params, grads, optimizer)
    """
    count = param_count_per_gpu(plan, model)
    optimizer = count * OPTIMIZER_BYTES
    if plan.zero_stage == 1:
        optimizer = optimizer / plan.dp
    return ParamStateMemory(count * PARAM_BYTES, count * MAIN_GRAD_BYTES, optimizer)


def default_microbatches(plan: ParallelismPlan, model: ModelConfig) -> int:
    return max(1, model.global_batch // (model.micro_batch * plan.dp))


def peak_memory(plan: ParallelismPlan, model: ModelConfig, precision: Optional[PrecisionConfig] = None,
                remat: Optional[RematPolicy] = None, dp_compress: str = "inplace",
                microbatches: Optional[int] = None) -> MemoryBreakdown:
    """
    每 GPU 峰值显存

    Args:
        plan: 并行方案
        model: 模型结构
        precision: 精度配置
        remat: 重计算策略，None 表示默认开启
        dp_compress: naive 额外占用 grads/2 的临时缓冲；inplace 与 off 不额外占用
        microbatches: 每次迭代的微批数，默认 global_batch/(b·dp)

    Returns:
        MemoryBreakdown: 各项字节数
    """
    if dp_compress not in ("naive", "inplace", "off"):
        raise DomainError(f"未知 dp_compress: {dp_compress}")
    remat = remat if remat is not None else RematPolicy()
    state = param_state_memory(plan, model, precision)

    names = remat.retained_set if remat.enabled else None
    coef = activation_coefficient(plan.n, model.top_k, Fraction(model.h_ffn, model.h), model.m, names)
    per_layer = coef * model.micro_batch * model.seq_len * model.h / plan.n
    mbs = microbatches if microbatches is not None else default_microbatches(plan, model)
    activations = per_layer * ACTIVATION_BYTES * layers_per_stage(model, plan.pp) \
        * activations_in_flight(plan.pp, mbs)

    transient = state.grads / 2 if dp_compress == "naive" else Fraction(0)
    total = state.params + state.grads + state.optimizer + activations + transient
    logger.debug("显存估计 %s: total=%.2f GiB", plan.name, float(total) / 2 ** 30)
    return MemoryBreakdown(state.params, state.grads, state.optimizer, activations, transient, total)

