import os

import pytest
import yaml

from config.config_manager import ConfigManager, config_digest, load_config
from config.presets import GPU_PRESETS, MODEL_PRESETS
from core.errors import ConfigParseError, ConfigValidationError, DomainError
from core.job_types import ModelConfig, NumberFormat, PrecisionConfig, derive

TEMPLATE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config", "template.yaml")


class TestLoadConfig:
    def test_defaults_build(self):
        loaded = load_config(None)
        assert loaded.model.name == "Mixtral-8x7B"
        assert loaded.cluster.total_gpus == 32
        assert loaded.cluster.intra_bw == pytest.approx(400e9)
        assert loaded.cluster.copy_engine_bw == loaded.cluster.intra_bw
        assert loaded.precision.compute_format == NumberFormat.BF16

    def test_presets_apply(self):
        loaded = load_config(None, "DeepSeekMoE", "a100")
        assert loaded.model.num_experts == 64
        assert loaded.model.seq_len == 8192
        assert loaded.model.vocab_size == 65536
        assert loaded.cluster.sm_count == 108

    def test_unknown_preset(self):
        with pytest.raises(ConfigValidationError) as info:
            load_config(None, "gpt-5")
        assert info.value.field_path == "model"

    def test_precedence_flags_over_file_over_presets(self, tmp_path):
        path = tmp_path / "job.yaml"
        path.write_text(yaml.safe_dump({"model": {"top_k": 1, "num_layers": 4}}), encoding="utf-8")
        loaded = load_config(str(path), "mixtral-8x7b", "h800", ["model.top_k=3"])
        assert loaded.model.top_k == 3
        assert loaded.model.num_layers == 4
        assert loaded.model.h == 4096

    def test_missing_file(self, tmp_path):
        missing = tmp_path / "nope.yaml"
        with pytest.raises(ConfigParseError) as info:
            load_config(str(missing))
        assert str(missing) in str(info.value)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ConfigParseError):
            load_config(str(path))

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model: [1, 2\n", encoding="utf-8")
        with pytest.raises(ConfigParseError):
            load_config(str(path))

    def test_unknown_key(self):
        with pytest.raises(ConfigValidationError) as info:
            load_config(None, overrides=["model.experts=8"])
        assert info.value.field_path == "model.experts"

    def test_override_without_section(self):
        with pytest.raises(ConfigParseError):
            load_config(None, overrides=["top_k=2"])

    def test_top_k_above_experts(self):
        with pytest.raises(ConfigValidationError) as info:
            load_config(None, overrides=["model.top_k=9"])
        assert info.value.field_path == "model.top_k"

    def test_type_error_names_path(self):
        with pytest.raises(ConfigValidationError) as info:
            load_config(None, overrides=["job.pp=two"])
        assert info.value.field_path == "job.pp"

    def test_fp8_requires_quant_scheme(self):
        with pytest.raises(ConfigValidationError) as info:
            load_config(None, overrides=["precision.tp_comm_format=FP8-E4M3"])
        assert info.value.field_path == "precision.quant_scheme"


class TestConfigManager:
    def test_validate_collects_errors(self):
        manager = ConfigManager()
        config = manager.get_default_config()
        config["model"]["m"] = 5
        config["link"]["intra_efficiency"] = 1.5
        ok, errors = manager.validate_config(config)
        assert not ok
        assert any(e.startswith("model.m") for e in errors)
        assert any(e.startswith("link.intra_efficiency") for e in errors)

    def test_build_validates_every_section(self, caplog):
        manager = ConfigManager()
        config = manager.load_config(overrides=["model.m=5", "link.intra_efficiency=1.5"])
        with caplog.at_level("WARNING", logger="config.config_manager"):
            with pytest.raises(ConfigValidationError) as info:
                manager.build(config)
        assert info.value.field_path == "model.m"
        assert "link.intra_efficiency" in caplog.text

    def test_save_round_trip(self, tmp_path):
        manager = ConfigManager()
        config = manager.load_config("hunyuan-large", "h20")
        path = tmp_path / "out" / "saved.yaml"
        manager.save_config(config, str(path))
        reloaded = ConfigManager(str(path)).load_config()
        assert reloaded == config
        assert config_digest(reloaded) == config_digest(config)

    def test_digest_ignores_key_order(self):
        a = {"model": {"h": 1, "m": 2}, "job": {"pp": 1}}
        b = {"job": {"pp": 1}, "model": {"m": 2, "h": 1}}
        assert config_digest(a) == config_digest(b)
        assert len(config_digest(a)) == 64

    def test_digest_changes_with_value(self):
        manager = ConfigManager()
        base = manager.load_config()
        changed = manager.load_config(overrides=["job.seed=7"])
        assert config_digest(base) != config_digest(changed)

    def test_template_loads(self):
        loaded = load_config(TEMPLATE)
        assert loaded.model.num_layers >= 1


class TestPresets:
    def test_six_models(self):
        assert len(MODEL_PRESETS) == 6
        assert set(GPU_PRESETS) == {"h800", "a100", "h20"}

    @pytest.mark.parametrize("key", sorted(MODEL_PRESETS))
    def test_model_presets_valid(self, key):
        model = ModelConfig(**MODEL_PRESETS[key])
        assert model.num_heads % model.m == 0


class TestDerive:
    def test_f_is_exact(self, mixtral):
        d = derive(mixtral.model, PrecisionConfig())
        assert d.f.numerator * mixtral.model.h == d.f.denominator * mixtral.model.h_ffn

    def test_attention_bytes_stay_bf16_under_fp8(self, mixtral):
        fp8 = PrecisionConfig(compute_format=NumberFormat.FP8_E4M3, tp_comm_format=NumberFormat.FP8_E4M3,
                              quant_scheme="grouped")
        bf16 = derive(mixtral.model, PrecisionConfig())
        assert derive(mixtral.model, fp8).p_attn == bf16.p_attn == 2 * bf16.attn_params

    def test_domain_error_is_value_error(self):
        assert issubclass(DomainError, ValueError)
