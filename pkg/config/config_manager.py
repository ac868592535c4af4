"""
配置管理器模块

负责作业配置文件（YAML）的加载、合并、校验、保存与摘要计算
"""

import copy
import hashlib
import json
import logging
import os
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Tuple

import yaml

from core.errors import ConfigParseError, ConfigValidationError
from core.job_types import (
    ClusterConfig,
    EfficiencyTable,
    JobConfig,
    LinkConfig,
    ModelConfig,
    PrecisionConfig,
)
from .presets import GPU_PRESETS, MODEL_PRESETS, preset_key

logger = logging.getLogger(__name__)

GB = 1e9
GIB = float(2 ** 30)
TERA = 1e12

# 值允许为 null 的键
NULLABLE_KEYS = {
    ("cluster", "copy_engine_bw_gbps"),
    ("precision", "quant_scheme"),
}


class LoadedConfig(NamedTuple):
    """load_config 的返回值，可按位置解包"""
    model: ModelConfig
    cluster: ClusterConfig
    precision: PrecisionConfig
    job: JobConfig
    link: LinkConfig
    efficiency: EfficiencyTable


class ConfigManager:
    """配置管理器，负责处理作业配置的加载和保存"""

    def __init__(self, config_file: Optional[str] = None):
        """
        初始化配置管理器

        Args:
            config_file (str): 配置文件路径，None 表示只使用默认值与预设
        """
        self.config_file = config_file
        self.default_config = {
            'model': {
                'name': 'Mixtral-8x7B',
                'num_layers': 32,
                'h': 4096,
                'num_heads': 32,
                'm': 4,
                'h_ffn': 14336,
                'num_experts': 8,
                'top_k': 2,
                'vocab_size': 65536,
                'seq_len': 8192,
                'micro_batch': 1,
                'global_batch': 32,
            },
            'cluster': {
                'name': 'H800',
                'gpus_per_node': 8,
                'num_nodes': 4,
                'intra_bw_gbps': 400.0,
                'inter_bw_gbps': 50.0,
                'peak_tflops': 989.0,
                'sm_count': 132,
                'mem_capacity_gb': 80.0,
                'mem_bw_tbps': 3.4,
                'copy_engine_bw_gbps': None,
            },
            'link': {
                'alpha_intra_us': 2.0,
                'alpha_inter_us': 10.0,
                'intra_efficiency': 0.5,
                'inter_efficiency': 0.8,
                'a2a_penalty': 1.4,
            },
            'job': {
                'pp': 1,
                'vpp': 1,
                'zero_stage': 1,
                'capacity_factor': 1.0,
                'remat': True,
                'dp_compress': 'inplace',
                'tile_rows': 128,
                'sm_for_comm': 16,
                'sm_saturation': 16,
                'seed': 0,
            },
            'precision': {
                'compute_format': 'BF16',
                'grad_sync_format': 'BF16',
                'tp_comm_format': 'BF16',
                'quant_scheme': None,
                'quant_group_size': 128,
            },
            'efficiency': {
                'gemm': 0.75,
                'grouped_gemm': 0.65,
                'attention_core': 0.6,
                'memory_bound': 0.8,
            },
        }

    def get_default_config(self) -> Dict[str, Dict[str, Any]]:
        """
        获取默认配置

        Returns:
            dict: 默认配置字典的深拷贝
        """
        return copy.deepcopy(self.default_config)

    def read_file(self, path: str) -> Dict[str, Dict[str, Any]]:
        """
        读取并解析 YAML 配置文件

        Raises:
            ConfigParseError: 文件不存在、为空或不是映射
        """
        if not os.path.exists(path):
            raise ConfigParseError(f"配置文件不存在: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                content = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigParseError(f"无法解析配置文件 {path}: {e}") from e

        if content is None:
            raise ConfigParseError(f"配置文件为空: {path}")
        if not isinstance(content, dict):
            raise ConfigParseError(f"配置文件顶层必须是映射: {path}")
        for section, values in content.items():
            if values is not None and not isinstance(values, dict):
                raise ConfigParseError(f"配置节 {section} 必须是映射")
        return content

    def merge(self, base: Dict[str, Dict[str, Any]], overlay: Dict[str, Any],
              source: str = "file") -> Dict[str, Dict[str, Any]]:
        """
        将 overlay 合并到 base，未知节或未知键直接报错

        Args:
            base: 已填充的配置（会被复制）
            overlay: 待叠加的嵌套字典
            source: 来源描述，用于日志

        Returns:
            dict: 合并后的新配置
        """
        merged = copy.deepcopy(base)
        for section, values in overlay.items():
            if section not in self.default_config:
                raise ConfigValidationError(section, "未知配置节")
            for key, value in (values or {}).items():
                if key not in self.default_config[section]:
                    raise ConfigValidationError(f"{section}.{key}", "未知配置项")
                merged[section][key] = value
        logger.debug("合并配置来源: %s", source)
        return merged

    def apply_presets(self, config: Dict[str, Dict[str, Any]], model: Optional[str] = None,
                      gpu: Optional[str] = None) -> Dict[str, Dict[str, Any]]:
        """
        叠加模型与 GPU 预设

        Raises:
            ConfigValidationError: 预设名不存在
        """
        overlay: Dict[str, Dict[str, Any]] = {}
        if model:
            key = preset_key(model)
            if key not in MODEL_PRESETS:
                raise ConfigValidationError("model", f"未知模型预设 {model!r}，可选 {sorted(MODEL_PRESETS)}")
            overlay['model'] = dict(MODEL_PRESETS[key])
        if gpu:
            key = preset_key(gpu)
            if key not in GPU_PRESETS:
                raise ConfigValidationError("cluster", f"未知 GPU 预设 {gpu!r}，可选 {sorted(GPU_PRESETS)}")
            overlay['cluster'] = dict(GPU_PRESETS[key])
        return self.merge(config, overlay, source="preset")

    def apply_overrides(self, config: Dict[str, Dict[str, Any]],
                        overrides: Iterable[str]) -> Dict[str, Dict[str, Any]]:
        """
        应用命令行 --set section.key=value 覆盖项，值按 YAML 标量解析

        Raises:
            ConfigParseError: 覆盖项格式错误
        """
        overlay: Dict[str, Dict[str, Any]] = {}
        for item in overrides:
            if '=' not in item:
                raise ConfigParseError(f"覆盖项格式应为 section.key=value: {item}")
            path, raw = item.split('=', 1)
            if '.' not in path:
                raise ConfigParseError(f"覆盖项缺少配置节: {item}")
            section, key = path.strip().split('.', 1)
            try:
                value = yaml.safe_load(raw) if raw.strip() else None
            except yaml.YAMLError as e:
                raise ConfigParseError(f"无法解析覆盖值 {item}: {e}") from e
            overlay.setdefault(section, {})[key] = value
        return self.merge(config, overlay, source="flags")

    def load_config(self, model_preset: Optional[str] = None, gpu_preset: Optional[str] = None,
                    overrides: Iterable[str] = ()) -> Dict[str, Dict[str, Any]]:
        """
        按优先级 flags > file > presets > defaults 组装配置字典

        Returns:
            dict: 合并后的配置字典（尚未构造数据类）
        """
        config = self.apply_presets(self.get_default_config(), model_preset, gpu_preset)
        if self.config_file:
            config = self.merge(config, self.read_file(self.config_file), source=self.config_file)
        return self.apply_overrides(config, overrides)

    def _check_types(self, config: Dict[str, Dict[str, Any]]) -> List[str]:
        errors = []
        for section, defaults in self.default_config.items():
            for key, default in defaults.items():
                value = config.get(section, {}).get(key)
                path = f"{section}.{key}"
                if value is None:
                    if (section, key) not in NULLABLE_KEYS:
                        errors.append(f"{path}: 不能为空")
                    continue
                if isinstance(default, bool):
                    ok = isinstance(value, bool)
                elif isinstance(default, int):
                    ok = isinstance(value, int) and not isinstance(value, bool)
                elif isinstance(default, float) or (section, key) == ("cluster", "copy_engine_bw_gbps"):
                    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
                else:
                    ok = isinstance(value, str)
                if not ok:
                    errors.append(f"{path}: 类型错误，实际为 {value!r}")
        return errors

    def validate_config(self, config: Dict[str, Dict[str, Any]]) -> Tuple[bool, List[str]]:
        """
        验证配置的有效性

        Args:
            config (dict): 要验证的配置字典

        Returns:
            tuple: (是否有效, 错误信息列表)，错误信息以字段路径开头
        """
        errors = self._check_types(config)
        if errors:
            return False, errors

        builders = (
            ('model', lambda: self._build_model(config)),
            ('cluster', lambda: self._build_cluster(config)),
            ('link', lambda: LinkConfig(**config['link'])),
            ('precision', lambda: PrecisionConfig(**config['precision'])),
            ('job', lambda: JobConfig(**config['job'])),
            ('efficiency', lambda: EfficiencyTable(dict(config['efficiency']))),
        )
        for _, build in builders:
            try:
                build()
            except ConfigValidationError as e:
                errors.append(str(e))
        return len(errors) == 0, errors

    def _build_model(self, config) -> ModelConfig:
        return ModelConfig(**config['model'])

    def _build_cluster(self, config) -> ClusterConfig:
        c = config['cluster']
        copy_bw = c.get('copy_engine_bw_gbps')
        return ClusterConfig(
            gpus_per_node=c['gpus_per_node'],
            num_nodes=c['num_nodes'],
            intra_bw=c['intra_bw_gbps'] * GB,
            inter_bw=c['inter_bw_gbps'] * GB,
            peak_flops=c['peak_tflops'] * TERA,
            sm_count=c['sm_count'],
            mem_capacity=c['mem_capacity_gb'] * GIB,
            mem_bw=c['mem_bw_tbps'] * TERA,
            copy_engine_bw=None if copy_bw is None else copy_bw * GB,
            name=c['name'],
        )

    def build(self, config: Dict[str, Dict[str, Any]]) -> LoadedConfig:
        """
        校验并构造全部数据类

        Raises:
            ConfigValidationError: 第一个校验错误，带字段路径；其余错误写入日志
        """
        ok, errors = self.validate_config(config)
        if not ok:
            for error in errors[1:]:
                logger.warning("配置校验失败: %s", error)
            path, message = errors[0].split(': ', 1)
            raise ConfigValidationError(path, message)
        return LoadedConfig(
            model=self._build_model(config),
            cluster=self._build_cluster(config),
            precision=PrecisionConfig(**config['precision']),
            job=JobConfig(**config['job']),
            link=LinkConfig(**config['link']),
            efficiency=EfficiencyTable(dict(config['efficiency'])),
        )

    def save_config(self, config: Dict[str, Dict[str, Any]], path: Optional[str] = None):
        """
        保存配置到 YAML 文件

        Args:
            config (dict): 要保存的配置字典
            path (str): 目标路径，默认为当前配置文件
        """
        target = path or self.config_file
        if not target:
            raise ConfigParseError("未指定保存路径")
        config_dir = os.path.dirname(os.path.abspath(target)) or '.'
        os.makedirs(config_dir, exist_ok=True)
        with open(target, 'w', encoding='utf-8') as f:
            yaml.safe_dump(config, f, allow_unicode=True, sort_keys=False)
        logger.info("配置已保存: %s", target)


def config_digest(config: Dict[str, Any]) -> str:
    """配置摘要：规范化 JSON（键排序）的 SHA-256"""
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'), ensure_ascii=False)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def load_config(path: Optional[str], model_preset: Optional[str] = None,
                gpu_preset: Optional[str] = None, overrides: Iterable[str] = ()) -> LoadedConfig:
    """
    读取配置文件并返回完整的配置数据类

    Args:
        path: YAML 配置文件路径，None 表示只使用默认值
        model_preset / gpu_preset: 预设名称
        overrides: section.key=value 形式的覆盖项

    Raises:
        ConfigParseError: 文件缺失、为空或格式错误
        ConfigValidationError: 违反不变量或存在未知键
    """
    manager = ConfigManager(path)
    return manager.build(manager.load_config(model_preset, gpu_preset, overrides))
