#!/usr/bin/env python3
"""
MoE 训练并行方案规划器主入口

子命令：plan、simulate、memory、sweep、numerics
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

# 添加项目根目录到Python路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config.config_manager import ConfigManager, LoadedConfig, config_digest
from core.commcost import LinkModel, explain_volumes
from core.errors import ConfigValidationError, ErrorClassifier
from core.job_types import AttnStrategy, EpPattern, FfnStrategy, ParallelismPlan
from core.memmodel import RematPolicy, peak_memory, remat_reduction
from core.numerics import a2a_win_rate, reduce_error_trials
from core.overlap import OrderPolicy
from core.planner import enumerate_plans, evaluate_plans, select_ep_pattern
from core.reports import OUTPUT_FORMATS, ReportEnvelope, render, render_mapping
from core.simulator import SimulationOptions, measure_fusion_gain, simulate_plan
from core.sweep_runner import run_sweep
from core.trace_export import timeline_trace, write_trace

SEED_ENV = "MOEPLAN_SEED"
GIB = float(2 ** 30)

logger = logging.getLogger("moeplan")


def setup_logging(level: str = "WARNING", log_file: Optional[str] = None):
    """设置日志系统：日志写 stderr，报告写 stdout"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


class CommandContext:
    """单次命令共享的配置与输出参数"""

    def __init__(self, loaded: LoadedConfig, digest: str, fmt: Optional[str]):
        self.loaded = loaded
        self.digest = digest
        self.fmt = fmt
        self.link = LinkModel.from_cluster(loaded.cluster, loaded.link)

    def output_format(self, default: str) -> str:
        return self.fmt or default

    def emit(self, command: str, results, columns: Sequence[str], rows: Sequence[Dict],
             default_format: str = "table", title: Optional[str] = None, extra: str = ""):
        fmt = self.output_format(default_format)
        text = render(ReportEnvelope(command, self.digest, results), fmt, columns, rows, title)
        sys.stdout.write(text)
        if extra and fmt == "table":
            sys.stdout.write("\n" + extra)


def resolve_seed(cli_seed: Optional[int]) -> Optional[int]:
    """种子优先级：--seed > MOEPLAN_SEED > 配置文件"""
    if cli_seed is not None:
        return cli_seed
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigValidationError(SEED_ENV, f"必须为整数，实际为 {raw!r}")


def load_context(args) -> CommandContext:
    """按 flags > file > presets > defaults 组装配置"""
    overrides = list(args.set or [])
    seed = resolve_seed(args.seed)
    if seed is not None:
        overrides.append(f"job.seed={seed}")
    manager = ConfigManager(args.config)
    config = manager.load_config(args.model, args.gpu, overrides)
    loaded = manager.build(config)
    digest = config_digest(config)
    logger.debug("配置摘要 %s", digest)
    return CommandContext(loaded, digest, args.format)


def parse_plan_name(text: str) -> Tuple[AttnStrategy, FfnStrategy]:
    """解析 ATTN+FFN 形式的方案名，例如 SP+EP"""
    parts = text.upper().replace(" ", "").split("+")
    if len(parts) != 2:
        raise ConfigValidationError("plan", f"方案名应为 ATTN+FFN，实际为 {text!r}")
    try:
        return AttnStrategy(parts[0]), FfnStrategy(parts[1].split("(")[0])
    except ValueError:
        raise ConfigValidationError("plan", f"未知方案 {text!r}")


def select_plan(ctx: CommandContext, name: str, n: Optional[int], ep_pattern: str) -> ParallelismPlan:
    """
    按名称选取一个满足整除约束的方案

    Raises:
        ConfigValidationError: 方案在该 n 下被拒绝
    """
    model, cluster, precision, job = ctx.loaded.model, ctx.loaded.cluster, ctx.loaded.precision, ctx.loaded.job
    attn, ffn = parse_plan_name(name)
    n = n or cluster.gpus_per_node
    if ffn == FfnStrategy.TP:
        pattern = EpPattern.AG_RS
    elif ep_pattern == "auto":
        pattern = select_ep_pattern(model, cluster, ctx.link, n, precision)
    else:
        pattern = EpPattern(ep_pattern)

    enumeration = enumerate_plans(model, cluster, job, n)
    for plan in enumeration.plans:
        if (plan.attn_strategy, plan.ffn_strategy, plan.ep_pattern) == (attn, ffn, pattern):
            return plan
    reasons = [r.reason for r in enumeration.rejected
               if r.name in ("*", f"{attn.value}+{ffn.value}") or r.name.startswith(f"{attn.value}+{ffn.value}(")]
    raise ConfigValidationError("plan", f"{name} 在 n={n} 下不可用: {reasons[0] if reasons else '未知原因'}")


def cmd_plan(args, ctx: CommandContext) -> int:
    model, cluster = ctx.loaded.model, ctx.loaded.cluster
    ranked, rejected = evaluate_plans(model, cluster, ctx.loaded.precision, ctx.loaded.job,
                                      ctx.link, ctx.loaded.efficiency, args.n)
    rows = []
    for rank, score in enumerate(ranked, 1):
        rows.append({
            "rank": rank,
            "plan": score.plan.name,
            "n": score.plan.n,
            "dp": score.plan.dp,
            "feasible": score.feasible,
            "est_iter_time": score.est_iter_time,
            "mfu": score.mfu,
            "mem_gib": score.mem_per_gpu / GIB,
            "critical_comm": score.critical_path_comm,
            "overlappable_comm": score.overlappable_comm,
            "reason": score.reason,
        })
    results = {
        "ranked": [score.to_dict() for score in ranked],
        "rejected": [r.to_dict() for r in rejected],
    }

    extra = ""
    if args.explain:
        n = args.n or cluster.gpus_per_node
        volumes = explain_volumes(model.micro_batch, model.seq_len, model.h, n, model.m, model.top_k)
        explain_rows = [{"name": name, "formula": formula, "elements": float(value)}
                        for name, formula, value in volumes]
        results["explain"] = explain_rows
        extra = render(ReportEnvelope("plan", ctx.digest, None), "table",
                       ("name", "formula", "elements"), explain_rows, title=f"通信量 (n={n})")

    columns = ("rank", "plan", "n", "dp", "feasible", "est_iter_time", "mfu", "mem_gib",
               "critical_comm", "overlappable_comm", "reason")
    ctx.emit("plan", results, columns, rows, extra=extra)
    return 0


def cmd_simulate(args, ctx: CommandContext) -> int:
    loaded = ctx.loaded
    plan = select_plan(ctx, args.plan, args.n, args.ep_pattern)
    remat = loaded.job.remat if args.remat is None else args.remat == "on"
    options = SimulationOptions(
        mode=args.mode.replace("-", "_"),
        fuse=args.fuse == "all",
        remat=remat,
        tune_sms=args.tune_sms,
        order_policy=OrderPolicy(args.order),
        routed_tiles=args.routed_tiles,
        microbatches=args.microbatches,
    )
    gain = None
    if options.fuse:
        gain, _, result = measure_fusion_gain(plan, loaded.model, loaded.cluster, loaded.precision,
                                              loaded.job, ctx.link, loaded.efficiency, options)
    else:
        result = simulate_plan(plan, loaded.model, loaded.cluster, loaded.precision, loaded.job,
                               ctx.link, loaded.efficiency, options)
    if args.trace:
        write_trace(args.trace, timeline_trace({"forward": result.forward, "backward": result.backward}))

    summary = result.to_dict()
    rows = [{
        "plan": plan.name,
        "mode": options.mode,
        "fuse": options.fuse,
        "remat": options.remat,
        "iteration_time": result.iteration_time,
        "exposed_comm": result.breakdown["exposed_comm"],
        "gemm_attention": result.breakdown["gemm_attention"],
        "other": result.breakdown["other"],
        "mfu": result.mfu,
        "mem_gib": float(result.memory.total) / GIB,
    }]
    if gain is not None:
        summary["fusion_gain"] = gain
        rows[0]["fusion_gain"] = gain
    ctx.emit("simulate", summary, tuple(rows[0]), rows)
    return 0


def _memory_row(setting: str, breakdown) -> Dict:
    row = {"setting": setting}
    row.update({k: v / GIB for k, v in breakdown.to_dict().items()})
    return row


def cmd_memory(args, ctx: CommandContext) -> int:
    loaded = ctx.loaded
    plan = select_plan(ctx, args.plan, args.n, args.ep_pattern)
    with_remat = peak_memory(plan, loaded.model, loaded.precision, RematPolicy(), loaded.job.dp_compress)
    without = peak_memory(plan, loaded.model, loaded.precision, RematPolicy.disabled(), loaded.job.dp_compress)
    reduction = float(remat_reduction(loaded.model, plan.n))
    results = {
        "plan": plan.to_dict(),
        "remat_on": with_remat.to_dict(),
        "remat_off": without.to_dict(),
        "activation_reduction": reduction,
        "reduction_percent": 100 * reduction,
        "capacity": loaded.cluster.mem_capacity,
    }
    rows = [_memory_row("remat_on", with_remat), _memory_row("remat_off", without)]
    columns = ("setting", "params", "grads", "optimizer", "activations", "transient_peak", "total")
    ctx.emit("memory", results, columns, rows, title=f"{plan.name} n={plan.n} (GiB)",
             extra=render_mapping({"reduction_percent": 100 * reduction}))
    return 0


def cmd_sweep(args, ctx: CommandContext) -> int:
    loaded = ctx.loaded
    axis, rows = run_sweep(args.axis, loaded.model, loaded.cluster, loaded.precision, loaded.job,
                           loaded.link, loaded.efficiency, args.workers)
    results = {"axis": axis.name, "values": list(axis.values), "columns": list(axis.columns), "rows": rows}
    ctx.emit("sweep", results, axis.columns, rows, default_format="csv")
    return 0


def cmd_numerics(args, ctx: CommandContext) -> int:
    base = ctx.loaded.job.seed
    seeds = range(base, base + args.seeds)
    schemes = tuple(s.strip() for s in args.schemes.split(",") if s.strip())
    rows = reduce_error_trials(seeds, ranks=args.ranks, dim=args.dim, schemes=schemes)
    win_rate = a2a_win_rate(rows)
    summary = {"scheme": "summary", "format": "a2a_fp32_win_rate", "trial": None, "error": win_rate}
    results = {"trials": rows, "a2a_fp32_win_rate": win_rate,
               "ranks": args.ranks, "dim": args.dim, "seeds": list(seeds)}
    ctx.emit("numerics", results, ("scheme", "format", "trial", "error"), rows + [summary],
             default_format="csv")
    return 0


def _add_plan_selection(parser: argparse.ArgumentParser):
    parser.add_argument("--plan", default="SP+EP", help="方案名 ATTN+FFN，例如 SP+EP、TP+TP")
    parser.add_argument("--n", type=int, default=None, help="节点内并行度，默认每节点 GPU 数")
    parser.add_argument("--ep-pattern", choices=("auto", "a2a", "ag_rs"), default="auto")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML 配置文件路径")
    common.add_argument("--model", default=None, help="模型预设名")
    common.add_argument("--gpu", default=None, help="GPU 预设名")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="覆盖配置项，可重复")
    common.add_argument("--format", choices=OUTPUT_FORMATS, default=None)
    common.add_argument("--seed", type=int, default=None, help=f"随机种子，默认读取 {SEED_ENV}")
    common.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    common.add_argument("--log-file", default=None)

    parser = argparse.ArgumentParser(prog="moeplan", description="MoE 训练并行方案规划与模拟")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="枚举并排序并行方案")
    p.add_argument("--n", type=int, default=None, help="只评估指定的节点内并行度")
    p.add_argument("--explain", action="store_true", help="输出代入数值的通信量公式")
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser("simulate", parents=[common], help="模拟一次训练迭代")
    _add_plan_selection(p)
    p.add_argument("--mode", choices=("serial", "inter-op"), default="inter-op")
    p.add_argument("--fuse", choices=("none", "all"), default="none")
    p.add_argument("--remat", choices=("on", "off"), default=None)
    p.add_argument("--tune-sms", action="store_true", help="为每个融合对搜索通信 SM 数")
    p.add_argument("--order", choices=tuple(o.value for o in OrderPolicy), default="natural")
    p.add_argument("--routed-tiles", action="store_true", help="GroupedGEMM 的 tile 依赖来自路由模拟")
    p.add_argument("--microbatches", type=int, default=None)
    p.add_argument("--trace", default=None, metavar="PATH", help="写出 trace-event JSON")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("memory", parents=[common], help="每 GPU 显存构成")
    _add_plan_selection(p)
    p.set_defaults(handler=cmd_memory)

    p = sub.add_parser("sweep", parents=[common], help="参数扫描")
    p.add_argument("axis", help="扫描轴，例如 top_k=1:8、n=2,4,8 或 attn_param_mb=384:1536:384")
    p.add_argument("--workers", type=int, default=None, help="并发线程数，默认物理核数")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("numerics", parents=[common], help="梯度归约数值误差试验")
    p.add_argument("--seeds", type=int, default=100, help="试验次数")
    p.add_argument("--ranks", type=int, default=64)
    p.add_argument("--dim", type=int, default=4096)
    p.add_argument("--schemes", default="ring_bf16,a2a_fp32")
    p.set_defaults(handler=cmd_numerics)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数，返回进程退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    logger.info("执行子命令 %s", args.command)

    classifier = ErrorClassifier()
    try:
        ctx = load_context(args)
        return args.handler(args, ctx)
    except Exception as e:
        code = classifier.exit_code(e)
        if code == 1:
            logger.exception("内部错误")
        else:
            logger.debug("用户错误: %s", e)
        print(f"错误 [{classifier.classify_error(e).value}]: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
