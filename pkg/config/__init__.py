"""
配置管理模块

该模块负责作业配置的加载、合并、校验与预设。
"""

from .config_manager import ConfigManager, LoadedConfig, config_digest, load_config
from .presets import GPU_PRESETS, MODEL_PRESETS

__all__ = ['ConfigManager', 'LoadedConfig', 'config_digest', 'load_config',
           'GPU_PRESETS', 'MODEL_PRESETS']
