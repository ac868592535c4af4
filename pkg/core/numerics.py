"""
数值模拟模块

BF16 / FP8-E4M3 舍入的软件实现、量化方案（per-tensor / per-token / per-channel / grouped）、
归约方案误差对比，以及 SwiGLU 门控位置对数值范围影响的探测。

所有计算在 float64 上进行：先按格式的指数下限分解，再以量子为步长 np.rint（偶数舍入）。
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class FloatFormat:
    """浮点格式描述，舍入方式固定为就近偶数"""
    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int
    max_finite: float
    saturate: bool      # 溢出时饱和到 max_finite，否则变为 inf

    @property
    def min_exponent(self) -> int:
        return 1 - self.bias


FP32 = FloatFormat("FP32", 8, 23, 127, float((2 - 2.0 ** -23) * 2.0 ** 127), False)
BF16 = FloatFormat("BF16", 8, 7, 127, float((2 - 2.0 ** -7) * 2.0 ** 127), False)
E4M3 = FloatFormat("E4M3", 4, 3, 7, 448.0, True)     # 指数全 1 且尾数全 1 为 NaN

FORMATS: Dict[str, FloatFormat] = {"FP32": FP32, "BF16": BF16, "E4M3": E4M3, "FP8-E4M3": E4M3}


def get_format(name: Union[str, FloatFormat]) -> FloatFormat:
    if isinstance(name, FloatFormat):
        return name
    if name not in FORMATS:
        raise DomainError(f"未知格式 {name!r}，可选 {sorted(FORMATS)}")
    return FORMATS[name]


def round_to(fmt: Union[str, FloatFormat], x: ArrayLike) -> ArrayLike:
    """
    舍入到格式中最近的可表示值（偶数舍入）

    E4M3 溢出饱和到 448，BF16/FP32 溢出为 inf，NaN 原样返回

    Args:
        fmt: 目标格式
        x: 标量或数组

    Returns:
        与输入形状一致的 float64 结果
    """
    fmt = get_format(fmt)
    arr = np.asarray(x, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        _, exp = np.frexp(arr)
        exponent = np.maximum(exp - 1, fmt.min_exponent)
        quantum = np.ldexp(1.0, exponent - fmt.mantissa_bits)
        rounded = np.rint(arr / quantum) * quantum
        overflow = np.abs(rounded) > fmt.max_finite
        limit = fmt.max_finite if fmt.saturate else np.inf
        rounded = np.where(overflow, np.copysign(limit, arr), rounded)
        rounded = np.copysign(rounded, arr)
        rounded = np.where(np.isnan(arr), np.nan, rounded)
    if rounded.ndim == 0:
        return float(rounded)
    return rounded


@dataclass(frozen=True)
class QuantScheme:
    """量化粒度；grouped 默认在每个 token 行内按列分组，axis='token' 时沿 token 维分组"""
    granularity: str = "per_token"
    group_size: int = 128
    axis: str = "row"

    def __post_init__(self):
        if self.granularity not in ("per_tensor", "per_token", "per_channel", "grouped"):
            raise DomainError(f"未知量化粒度 {self.granularity!r}")
        if self.group_size < 1:
            raise DomainError("group_size 必须 ≥ 1")
        if self.axis not in ("row", "token"):
            raise DomainError(f"未知分组方向 {self.axis!r}")


def _block_absmax(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    tokens, hidden = x.shape
    mag = np.abs(x)
    if scheme.granularity == "per_tensor":
        return np.full((1, 1), mag.max() if mag.size else 0.0)
    if scheme.granularity == "per_token":
        return mag.max(axis=1, keepdims=True)
    if scheme.granularity == "per_channel":
        return mag.max(axis=0, keepdims=True)

    g = scheme.group_size
    if scheme.axis == "row":
        groups = math.ceil(hidden / g)
        padded = np.zeros((tokens, groups * g))
        padded[:, :hidden] = mag
        return padded.reshape(tokens, groups, g).max(axis=2)
    groups = math.ceil(tokens / g)
    padded = np.zeros((groups * g, hidden))
    padded[:tokens] = mag
    return padded.reshape(groups, g, hidden).max(axis=1)


def expand_scales(scales: np.ndarray, shape: Tuple[int, int], scheme: QuantScheme) -> np.ndarray:
    """把分块 scale 展开为逐元素 scale"""
    tokens, hidden = shape
    if scheme.granularity == "grouped":
        if scheme.axis == "row":
            return np.repeat(scales, scheme.group_size, axis=1)[:, :hidden]
        return np.repeat(scales, scheme.group_size, axis=0)[:tokens]
    return np.broadcast_to(scales, shape)


def quantize(tensor: np.ndarray, scheme: QuantScheme, fmt: Union[str, FloatFormat] = E4M3
             ) -> Tuple[np.ndarray, np.ndarray]:
    """
    按粒度量化 tokens×h 矩阵

    scale = absmax / max_finite（全零块为 1），codes = round_to(fmt, x / scale)

    Returns:
        tuple: (codes, scales)；scales 形状 per_tensor (1,1)、per_token (T,1)、
               per_channel (1,h)、grouped (T, ⌈h/g⌉) 或沿 token 维 (⌈T/g⌉, h)
    """
    fmt = get_format(fmt)
    x = np.asarray(tensor, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError(f"quantize 需要二维矩阵，实际维度 {x.ndim}")
    if not np.all(np.isfinite(x)):
        raise DomainError("quantize 输入必须有限")
    absmax = _block_absmax(x, scheme)
    scales = np.where(absmax > 0, absmax / fmt.max_finite, 1.0)
    codes = round_to(fmt, x / expand_scales(scales, x.shape, scheme))
    return np.asarray(codes), scales


def dequantize(codes: np.ndarray, scales: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    return codes * expand_scales(scales, codes.shape, scheme)


@dataclass(frozen=True)
class ReduceScheme:
    """归约方案：ring_bf16 逐步以 BF16 累加；a2a_fp32 收齐后高精度求和"""
    kind: str
    ranks: int

    def __post_init__(self):
        if self.kind not in ("ring_bf16", "a2a_fp32"):
            raise DomainError(f"未知归约方案 {self.kind!r}")
        if self.ranks < 2:
            raise DomainError("ranks 必须 ≥ 2")


def emulate_reduce(vectors: Sequence[np.ndarray], scheme: ReduceScheme,
                   output_format: Union[str, FloatFormat] = BF16) -> np.ndarray:
    """
    模拟梯度归约

    输入先各自舍入为 BF16。ring_bf16：按 rank 顺序相加，每个部分和舍入为 BF16；
    a2a_fp32：逐元素升序排序后以 binary64 累加，最后转为 output_format（随后的 all-gather 以 BF16 传输）

    Raises:
        DomainError: 向量维度不一致或数量与 ranks 不符
    """
    arrays = [np.asarray(v, dtype=np.float64) for v in vectors]
    if len(arrays) != scheme.ranks:
        raise DomainError(f"向量数 {len(arrays)} 与 ranks={scheme.ranks} 不一致")
    if any(a.shape != arrays[0].shape for a in arrays):
        raise DomainError("各 rank 的向量维度不一致")

    inputs = round_to(BF16, np.stack(arrays))
    if scheme.kind == "ring_bf16":
        acc = inputs[0]
        for row in inputs[1:]:
            acc = round_to(BF16, acc + row)
        return np.asarray(acc)

    ordered = np.sort(inputs, axis=0)
    acc = np.zeros_like(ordered[0])
    for row in ordered:
        acc = acc + row
    return np.asarray(round_to(output_format, acc))


def relative_l2_error(result: np.ndarray, reference: np.ndarray) -> float:
    norm = float(np.linalg.norm(reference))
    diff = float(np.linalg.norm(np.asarray(result) - np.asarray(reference)))
    return diff / norm if norm > 0 else diff


def reduce_error_trials(seeds: Sequence[int], ranks: int = 64, dim: int = 4096,
                        schemes: Sequence[str] = ("ring_bf16", "a2a_fp32")) -> List[Dict]:
    """
    多个种子下比较归约方案相对 FP64 求和的误差

    Returns:
        list: 每行 {scheme, format, trial, error}
    """
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        vectors = rng.standard_normal((ranks, dim))
        oracle = vectors.sum(axis=0)
        for kind in schemes:
            result = emulate_reduce(list(vectors), ReduceScheme(kind, ranks))
            rows.append({
                "scheme": kind,
                "format": "BF16",
                "trial": int(seed),
                "error": relative_l2_error(result, oracle),
            })
    return rows


def a2a_win_rate(rows: Sequence[Dict]) -> float:
    """a2a_fp32 误差不大于 ring_bf16 的试验比例"""
    by_trial: Dict[int, Dict[str, float]] = {}
    for row in rows:
        by_trial.setdefault(row["trial"], {})[row["scheme"]] = row["error"]
    pairs = [t for t in by_trial.values() if "ring_bf16" in t and "a2a_fp32" in t]
    if not pairs:
        return 0.0
    return sum(t["a2a_fp32"] <= t["ring_bf16"] for t in pairs) / len(pairs)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _dynamic_range(x: np.ndarray) -> float:
    """行 absmax 的最大值与最小非零值之比，全零为 1"""
    row_max = np.abs(x).max(axis=1) if x.size else np.zeros(0)
    nonzero = row_max[row_max > 0]
    if nonzero.size == 0:
        return 1.0
    return float(nonzero.max() / nonzero.min())


def _row_normalized_mse(x: np.ndarray, scheme: QuantScheme, fmt: FloatFormat) -> float:
    codes, scales = quantize(x, scheme, fmt)
    err = ((dequantize(codes, scales, scheme) - x) ** 2).sum(axis=1)
    energy = (x ** 2).sum(axis=1)
    mask = energy > 0
    if not mask.any():
        return 0.0
    return float(np.mean(err[mask] / energy[mask]))


@dataclass(frozen=True)
class SwigluRangeReport:
    gate_order: str
    range_ratio: float          # 输出动态范围 / 输入动态范围
    absmax_ratio: float         # 输出 absmax / 输入 absmax
    mse_per_token: float
    mse_per_tensor: float

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def swiglu_range_report(x: np.ndarray, gate_order: str = "after_fc2_out", seed: int = 0,
                        fmt: Union[str, FloatFormat] = E4M3) -> SwigluRangeReport:
    """
    统计 SwiGLU 输出（fc2_in）的数值范围

    x 的前一半列为 a、后一半为 b，y = a·silu(b)；门控权重 g ~ U(0.01, 1) 每 token 一个。
    before_fc2_in 量化 y·g，after_fc2_out 量化 y（门控移到 FC2 之后）

    Args:
        x: tokens×2H 输入
        gate_order: before_fc2_in 或 after_fc2_out
        seed: 门控权重的随机种子
        fmt: 量化格式

    Returns:
        SwigluRangeReport: 范围比与两种粒度的行归一化 MSE
    """
    if gate_order not in ("before_fc2_in", "after_fc2_out"):
        raise DomainError(f"未知 gate_order {gate_order!r}")
    fmt = get_format(fmt)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] % 2:
        raise DomainError("x 必须是列数为偶数的二维矩阵")

    half = x.shape[1] // 2
    y = x[:, :half] * silu(x[:, half:])
    if gate_order == "before_fc2_in":
        gates = np.random.default_rng(seed).uniform(0.01, 1.0, size=(x.shape[0], 1))
        y = y * gates

    in_absmax = float(np.abs(x).max()) if x.size else 0.0
    out_absmax = float(np.abs(y).max()) if y.size else 0.0
    return SwigluRangeReport(
        gate_order=gate_order,
        range_ratio=_dynamic_range(y) / _dynamic_range(x),
        absmax_ratio=out_absmax / in_absmax if in_absmax > 0 else 1.0,
        mse_per_token=_row_normalized_mse(y, QuantScheme("per_token"), fmt),
        mse_per_tensor=_row_normalized_mse(y, QuantScheme("per_tensor"), fmt),
    )


def heavy_tailed_matrix(tokens: int, hidden: int, seed: int = 0) -> np.ndarray:
    """行尺度服从 |t(1)|、元素服从 t(3) 的重尾矩阵"""
    rng = np.random.default_rng(seed)
    scales = np.abs(rng.standard_t(1, size=(tokens, 1)))
    return scales * rng.standard_t(3, size=(tokens, hidden))
