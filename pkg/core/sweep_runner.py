"""
参数扫描模块

对单个参数轴逐点求值，各点在线程池中并发执行，结果按轴下标输出
"""

import dataclasses
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import psutil

from .commcost import LinkModel, ep_dispatch_time, hierarchical_sync_plan, tier_for_group
from .errors import ConfigValidationError, UnknownAxisError
from .job_types import (
    AttnStrategy,
    ClusterConfig,
    EfficiencyTable,
    EpPattern,
    FfnStrategy,
    JobConfig,
    LinkConfig,
    ModelConfig,
    ParallelismPlan,
    PrecisionConfig,
)
from .planner import scale_up_ratio, select_ep_pattern
from .simulator import SimulationOptions, simulate_plan

logger = logging.getLogger(__name__)

SWEEP_COLUMNS: Dict[str, Tuple[str, ...]] = {
    "top_k": ("top_k", "n", "ep_a2a_time", "ep_ag_rs_time", "selected"),
    "n": ("n", "comm_time", "comp_time", "R", "R_approx", "sustains"),
    "h_ffn": ("h_ffn", "n", "comm_time", "comp_time", "R", "R_approx", "sustains"),
    "num_nodes": ("num_nodes", "total_gpus", "plan", "dp", "microbatches", "iteration_time", "mfu"),
    "attn_param_mb": ("attn_param_mb", "n", "dp", "tp_sync_time", "sp_sync_time", "sp_extra_time",
                      "inter_bytes", "sp_intra_bytes"),
}


@dataclasses.dataclass(frozen=True)
class SweepAxis:
    name: str
    values: Tuple[int, ...]

    @property
    def columns(self) -> Tuple[str, ...]:
        return SWEEP_COLUMNS[self.name]


def _parse_int(text: str, spec: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ConfigValidationError("sweep", f"无法解析扫描取值 {text!r}（{spec}）")


def parse_axis(spec: str) -> SweepAxis:
    """
    解析扫描轴

    支持 name=a:b[:step]（闭区间）与 name=v1,v2,... 两种写法；a > b 得到空轴

    Raises:
        UnknownAxisError: 轴名不受支持
        ConfigValidationError: 取值格式错误
    """
    name, sep, body = spec.partition("=")
    name = name.strip()
    if name not in SWEEP_COLUMNS:
        raise UnknownAxisError(f"未知扫描轴 {name!r}，可选: {', '.join(SWEEP_COLUMNS)}")
    if not sep or not body.strip():
        raise ConfigValidationError("sweep", f"缺少扫描取值: {spec!r}")

    if ":" in body:
        parts = [_parse_int(p, spec) for p in body.split(":")]
        if len(parts) not in (2, 3):
            raise ConfigValidationError("sweep", f"区间格式应为 a:b[:step]，实际为 {body!r}")
        step = parts[2] if len(parts) == 3 else 1
        if step < 1:
            raise ConfigValidationError("sweep", f"步长必须 ≥ 1，实际为 {step}")
        values = tuple(range(parts[0], parts[1] + 1, step))
    else:
        values = tuple(_parse_int(p, spec) for p in body.split(",") if p.strip())
    return SweepAxis(name, values)


def default_workers(points: int) -> int:
    """默认并发数：物理核数，不超过扫描点数"""
    cores = psutil.cpu_count(logical=False) or 1
    return max(1, min(points, cores))


class SweepJobInfo:
    """单个扫描点的状态"""
    def __init__(self, index: int, value: int):
        self.index = index
        self.value = value
        self.status = "pending"   # pending, processing, completed, failed
        self.row: Optional[Dict] = None
        self.error: Optional[BaseException] = None
        self.start_time = None
        self.end_time = None


class SweepRunner:
    """扫描执行器 - 在线程池中并发求值各扫描点"""

    def __init__(self, model: ModelConfig, cluster: ClusterConfig,
                 precision: Optional[PrecisionConfig] = None, job: Optional[JobConfig] = None,
                 link: Optional[LinkConfig] = None, efficiency: Optional[EfficiencyTable] = None,
                 max_workers: Optional[int] = None):
        self.model = model
        self.cluster = cluster
        self.precision = precision or PrecisionConfig()
        self.job = job or JobConfig()
        self.link_config = link or LinkConfig()
        self.efficiency = efficiency or EfficiencyTable()
        self.max_workers = max_workers
        self.jobs: List[SweepJobInfo] = []
        self._lock = threading.RLock()

    def _link(self, cluster: ClusterConfig) -> LinkModel:
        return LinkModel.from_cluster(cluster, self.link_config)

    def _top_k_row(self, k: int) -> Dict:
        model = dataclasses.replace(self.model, top_k=k)
        n = min(self.cluster.gpus_per_node, model.num_experts)
        link = self._link(self.cluster)
        tier = tier_for_group(n, self.cluster.gpus_per_node)
        times = {
            pattern: ep_dispatch_time(pattern, model.micro_batch, model.seq_len, model.h, n, k,
                                      link, self.precision, tier)
            for pattern in (EpPattern.A2A, EpPattern.AG_RS)
        }
        selected = EpPattern.A2A if times[EpPattern.A2A] <= times[EpPattern.AG_RS] else EpPattern.AG_RS
        return {"top_k": k, "n": n, "ep_a2a_time": times[EpPattern.A2A],
                "ep_ag_rs_time": times[EpPattern.AG_RS], "selected": selected.value}

    def _ratio_row(self, model: ModelConfig, n: int) -> Dict:
        report = scale_up_ratio(model, self.cluster, n, self.precision)
        return {"n": n, **report.to_dict()}

    def _num_nodes_row(self, nodes: int) -> Dict:
        cluster = dataclasses.replace(self.cluster, num_nodes=nodes)
        link = self._link(cluster)
        n = cluster.gpus_per_node
        pp = self.job.pp
        if cluster.total_gpus % (n * pp):
            raise ConfigValidationError("cluster.num_nodes",
                                        f"总 GPU 数 {cluster.total_gpus} 不能被 n·pp={n * pp} 整除")
        dp = cluster.total_gpus // (n * pp)
        pattern = select_ep_pattern(self.model, cluster, link, n, self.precision)
        plan = ParallelismPlan(AttnStrategy.SP, FfnStrategy.EP, pattern, n, pp, self.job.vpp, dp,
                               self.job.zero_stage)
        per_step = self.model.micro_batch * dp
        if self.model.global_batch % per_step:
            raise ConfigValidationError("model.global_batch",
                                        f"global_batch={self.model.global_batch} 不能被 b·dp={per_step} 整除")
        result = simulate_plan(plan, self.model, cluster, self.precision, self.job, link,
                               self.efficiency, SimulationOptions(mode="inter_op", remat=self.job.remat))
        return {"num_nodes": nodes, "total_gpus": cluster.total_gpus, "plan": plan.name, "dp": dp,
                "microbatches": result.microbatches, "iteration_time": result.iteration_time,
                "mfu": result.mfu}

    def _attn_sync_row(self, megabytes: int) -> Dict:
        """注意力参数为 megabytes MiB 时 SP 与 TP 的梯度同步对比，dp 取节点数"""
        if megabytes < 1:
            raise ConfigValidationError("sweep", f"注意力参数大小必须 ≥ 1 MiB，实际为 {megabytes}")
        link = self._link(self.cluster)
        n, dp = self.cluster.gpus_per_node, self.cluster.num_nodes
        p_attn = megabytes * 2 ** 20
        tp = hierarchical_sync_plan(p_attn, n, dp, link, AttnStrategy.TP)
        sp = hierarchical_sync_plan(p_attn, n, dp, link, AttnStrategy.SP)
        return {"attn_param_mb": megabytes, "n": n, "dp": dp, "tp_sync_time": tp.est_time,
                "sp_sync_time": sp.est_time, "sp_extra_time": sp.est_time - tp.est_time,
                "inter_bytes": float(sp.inter_volume), "sp_intra_bytes": float(sp.intra_volume)}

    def evaluate_point(self, axis: str, value: int) -> Dict:
        """求值单个扫描点，返回一行结果"""
        if axis == "top_k":
            return self._top_k_row(value)
        if axis == "n":
            return self._ratio_row(self.model, value)
        if axis == "h_ffn":
            model = dataclasses.replace(self.model, h_ffn=value)
            row = self._ratio_row(model, self.cluster.gpus_per_node)
            return {"h_ffn": value, **row}
        if axis == "num_nodes":
            return self._num_nodes_row(value)
        if axis == "attn_param_mb":
            return self._attn_sync_row(value)
        raise UnknownAxisError(f"未知扫描轴 {axis!r}")

    def _run_job(self, axis: str, job: SweepJobInfo):
        with self._lock:
            job.status = "processing"
            job.start_time = time.time()
        try:
            row = self.evaluate_point(axis, job.value)
            with self._lock:
                job.row = row
                job.status = "completed"
        except Exception as e:
            with self._lock:
                job.error = e
                job.status = "failed"
        finally:
            job.end_time = time.time()
            logger.debug("扫描点 %s=%d %s，用时 %.3f s", axis, job.value, job.status,
                         job.end_time - job.start_time)

    def run(self, axis: SweepAxis) -> List[Dict]:
        """
        执行扫描

        Returns:
            List[Dict]: 按轴下标排列的结果行；空轴返回空列表

        Raises:
            第一个失败点（按下标）的异常
        """
        self.jobs = [SweepJobInfo(i, v) for i, v in enumerate(axis.values)]
        if not self.jobs:
            logger.info("扫描轴 %s 为空", axis.name)
            return []

        workers = self.max_workers or default_workers(len(self.jobs))
        logger.info("开始扫描 %s: %d 个点，%d 个线程", axis.name, len(self.jobs), workers)
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(self._run_job, axis.name, job) for job in self.jobs]
            for future in futures:
                future.result()

        ordered = sorted(self.jobs, key=lambda job: job.index)
        for job in ordered:
            if job.error is not None:
                raise job.error
        return [job.row for job in ordered]


def run_sweep(spec: str, model: ModelConfig, cluster: ClusterConfig,
              precision: Optional[PrecisionConfig] = None, job: Optional[JobConfig] = None,
              link: Optional[LinkConfig] = None, efficiency: Optional[EfficiencyTable] = None,
              max_workers: Optional[int] = None) -> Tuple[SweepAxis, List[Dict]]:
    """解析扫描轴并执行，返回 (轴, 结果行)"""
    axis = parse_axis(spec)
    runner = SweepRunner(model, cluster, precision, job, link, efficiency, max_workers)
    return axis, runner.run(axis)