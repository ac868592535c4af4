"""
MoE 训练规划核心模块

该模块包含通信代价模型、显存模型、路由模拟、算子图调度、计算通信融合、
流水线调度、方案规划、参数扫描与数值模拟。
"""

from .commcost import LinkModel
from .errors import ErrorClassifier, MoePlanError
from .planner import evaluate_plans, scale_up_ratio, select_ep_pattern
from .scheduler import Timeline, schedule
from .simulator import SimulationOptions, SimulationResult, simulate_plan
from .sweep_runner import SweepRunner

__all__ = ['LinkModel', 'ErrorClassifier', 'MoePlanError', 'evaluate_plans', 'scale_up_ratio',
           'select_ep_pattern', 'Timeline', 'schedule', 'SimulationOptions', 'SimulationResult',
           'simulate_plan', 'SweepRunner']
