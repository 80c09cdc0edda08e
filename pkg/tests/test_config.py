from pathlib import Path

import pytest

from modules.config import RunConfig, require
from modules.enums import RatioAgg, Stage
from modules.errors import Err, InvalidValue, MissingValue, Ok, UnknownKey, describe
from modules.exceptions import ConfigError


def unwrap(result):
    assert isinstance(result, Ok), result
    return result.value


class TestLayering:
    def test_defaults_are_valid(self):
        config = unwrap(RunConfig.layered({}, environ={}))
        assert config.stage is Stage.CE
        assert config.group_size == 5
        assert config.clip_eps == pytest.approx(0.2)
        assert config.update_steps == 20
        assert config.grpo_lr == pytest.approx(1e-5)
        assert config.ce_lr == pytest.approx(4e-5)

    def test_environment_then_file_then_cli(self, tmp_path):
        file = tmp_path / "run.env"
        file.write_text("# tiny run\nd_model = 16\nn_heads=2\nseed=3\n", encoding="utf-8")
        environ = {"CAPTRL_SEED": "1", "CAPTRL_D_MODEL": "8", "CAPTRL_BATCH_SIZE": "4", "OTHER": "x"}
        config = unwrap(RunConfig.layered({"seed": "9"}, file, environ))
        assert config.batch_size == 4
        assert config.d_model == 16
        assert config.seed == 9

    def test_enums_and_paths_parse(self):
        config = unwrap(RunConfig.layered({"ratio_agg": "sequence", "out_dir": "runs/x", "plot": "yes"}, environ={}))
        assert config.ratio_agg is RatioAgg.SEQUENCE
        assert config.out_dir == Path("runs/x")
        assert config.plot is True

    def test_unknown_key_in_file(self, tmp_path):
        file = tmp_path / "run.env"
        file.write_text("groupsize=3\n", encoding="utf-8")
        result = RunConfig.layered({}, file, {})
        assert result == Err(UnknownKey("groupsize", str(file)))

    def test_missing_config_file(self, tmp_path):
        result = RunConfig.layered({}, tmp_path / "absent.env", {})
        assert isinstance(result, Err)
        assert result.error.field == "config"

    def test_unparseable_value(self):
        result = RunConfig.layered({"batch_size": "lots"}, environ={})
        assert isinstance(result, Err)
        assert isinstance(result.error, InvalidValue)
        assert result.error.field == "batch_size"

    @pytest.mark.parametrize(
        ("key", "value"),
        [("clip_eps", "1.5"), ("group_size", "1"), ("n_heads", "7"), ("warmup_frac", "1"), ("split", "dev")],
    )
    def test_out_of_range_values(self, key, value):
        result = RunConfig.layered({key: value}, environ={})
        assert isinstance(result, Err)
        assert isinstance(result.error, InvalidValue)


class TestStageRequirements:
    @pytest.mark.parametrize("stage", ["scst", "grpo", "eval"])
    def test_rl_and_eval_need_a_checkpoint(self, stage):
        result = RunConfig.layered({"stage": stage}, environ={})
        assert result == Err(MissingValue("checkpoint_in", Stage(stage)))

    def test_score_needs_both_files(self):
        result = RunConfig.layered({"stage": "score", "references": "refs.json"}, environ={})
        assert result == Err(MissingValue("candidates", Stage.SCORE))

    def test_require_raises_config_error(self):
        with pytest.raises(ConfigError, match="checkpoint_in") as info:
            require(RunConfig.layered({"stage": "grpo"}, environ={}))
        assert info.value.exit_code == 2


class TestDerived:
    def test_component_configs(self):
        config = unwrap(RunConfig.layered({"d_model": "16", "n_heads": "4", "group_size": "3", "beam_size": "2"}, environ={}))
        decoder = config.decoder(vocab_size=30, feat_dim=14)
        assert (decoder.d_model, decoder.n_heads, decoder.feat_dim) == (16, 4, 14)
        assert config.grpo().group_size == 3
        assert config.decode().beam_size == 2
        assert config.decode(beam_size=1).beam_size == 1
        assert config.scst().epochs == 20

    def test_stage_schedules_come_from_run_config(self):
        raw = {"scst_epochs": "3", "scst_lr": "2e-5", "grpo_epochs": "4", "grpo_lr": "3e-5"}
        config = unwrap(RunConfig.layered(raw, environ={}))
        assert (config.scst().epochs, config.scst().lr) == (3, pytest.approx(2e-5))
        assert (config.grpo().epochs, config.grpo().lr) == (4, pytest.approx(3e-5))

    def test_digest_tracks_values(self):
        a = unwrap(RunConfig.layered({}, environ={}))
        b = unwrap(RunConfig.layered({"seed": "1"}, environ={}))
        assert a.digest() == unwrap(RunConfig.layered({}, environ={})).digest()
        assert a.digest() != b.digest()
        assert a.to_json()["out_dir"] == "runs/latest"

    def test_describe_is_one_line(self):
        assert describe(MissingValue("checkpoint_in", "grpo")) == "'checkpoint_in' is required for stage 'grpo'"
        assert "\n" not in describe(InvalidValue("batch_size", "x", "invalid literal"))

    def test_require_unwraps_ok_and_raises_on_err(self):
        config = unwrap(RunConfig.layered({}, environ={}))
        assert require(Ok(config)) is config
        with pytest.raises(ConfigError, match="unknown config key 'x'"):
            require(Err(UnknownKey("x", "command line")))
