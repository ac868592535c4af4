"""
预设配置

评测用的六个 MoE 模型结构与三种 GPU 规格。
GPU 的 SM 数量与网卡带宽为公开资料补充值。
"""

# 所有模型共享序列长度 8192 与词表 65536
MODEL_PRESETS = {
    "internal-352b": {
        "name": "Internal-352B", "num_layers": 60, "h": 4096, "num_heads": 32, "m": 4,
        "h_ffn": 14336, "num_experts": 32, "top_k": 3,
    },
    "mixtral-8x7b": {
        "name": "Mixtral-8x7B", "num_layers": 32, "h": 4096, "num_heads": 32, "m": 4,
        "h_ffn": 14336, "num_experts": 8, "top_k": 2,
    },
    "mixtral-8x22b": {
        "name": "Mixtral-8x22B", "num_layers": 56, "h": 6144, "num_heads": 48, "m": 6,
        "h_ffn": 16384, "num_experts": 8, "top_k": 2,
    },
    "hunyuan-large": {
        "name": "Hunyuan-Large", "num_layers": 64, "h": 6400, "num_heads": 80, "m": 10,
        "h_ffn": 18304, "num_experts": 16, "top_k": 1,
    },
    "phi-3.5-moe": {
        "name": "Phi-3.5-MoE", "num_layers": 32, "h": 4096, "num_heads": 32, "m": 4,
        "h_ffn": 6400, "num_experts": 16, "top_k": 2,
    },
    "deepseekmoe": {
        "name": "DeepSeekMoE", "num_layers": 28, "h": 2048, "num_heads": 16, "m": 1,
        "h_ffn": 1408, "num_experts": 64, "top_k": 6,
    },
}

for _preset in MODEL_PRESETS.values():
    _preset.setdefault("seq_len", 8192)
    _preset.setdefault("vocab_size", 65536)

GPU_PRESETS = {
    "h800": {
        "name": "H800", "peak_tflops": 989.0, "mem_capacity_gb": 80.0,
        "mem_bw_tbps": 3.4, "intra_bw_gbps": 400.0, "inter_bw_gbps": 50.0, "sm_count": 132,
    },
    "a100": {
        "name": "A100", "peak_tflops": 312.0, "mem_capacity_gb": 80.0,
        "mem_bw_tbps": 2.0, "intra_bw_gbps": 600.0, "inter_bw_gbps": 25.0, "sm_count": 108,
    },
    "h20": {
        "name": "H20", "peak_tflops": 148.0, "mem_capacity_gb": 96.0,
        "mem_bw_tbps": 4.0, "intra_bw_gbps": 900.0, "inter_bw_gbps": 50.0, "sm_count": 78,
    },
}


def preset_key(name: str) -> str:
    """预设名称不区分大小写"""
    return name.strip().lower()
