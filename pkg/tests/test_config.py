from pathlib import Path

import pytest

from conceptdlm.config import RunConfig, load_config, parse_override, save_config
from conceptdlm.errors import ConfigError

CONFIG_DIR = Path(__file__).parent / "configs"


class TestLoadConfig:
    def test_defaults(self):
        config = load_config()
        assert config == RunConfig()
        assert config.align.alpha == 3.0
        assert config.align.lam == 100.0
        assert config.eval.block_len == 32
        assert config.model.d_ff == 4 * config.model.d_model

    def test_toml_equals_json(self):
        from_json = load_config(CONFIG_DIR / "tiny.json")
        from_toml = load_config(CONFIG_DIR / "tiny.toml")
        assert from_json == from_toml
        assert from_json.align.alpha == 2.0
        assert from_json.compare.seeds == [1]

    def test_unsupported_suffix(self, temp_dir):
        path = temp_dir / "config.yaml"
        path.write_text("model: {}")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, temp_dir):
        with pytest.raises(FileNotFoundError):
            load_config(temp_dir / "absent.json")

    @pytest.mark.parametrize(
        "name, text",
        [("broken.json", "{not json"), ("broken.toml", "[align\nalpha = "), ("list.json", "[1, 2]")],
        ids=["json", "toml", "not-a-table"],
    )
    def test_unparseable_file(self, temp_dir, name, text):
        path = temp_dir / name
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"optimizer": {}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"align": {"beta": 1.0}})

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"align": {"convention": "sideways"}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"train": {"mode": "SHUFFLE"}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"compare": {"seeds": []}})

    def test_modes(self):
        config = RunConfig.from_dict({"data": {"modes": ["normal", "RE"]}, "train": {"mode": "DFS"}})
        assert config.data.modes == ["normal", "RE"]
        assert config.train.mode == "DFS"
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"data": {"modes": ["re"]}})

    def test_comparison_dimensions(self, temp_dir):
        path = temp_dir / "sweep.toml"
        path.write_text('[compare.dimensions]\n"align.alpha" = [1.0, 3.0]\n"align.gamma_schedule" = ["constant"]\n')
        config = load_config(path)
        assert config.compare.dimensions == {"align.alpha": [1.0, 3.0], "align.gamma_schedule": ["constant"]}
        override = load_config(overrides=['compare.dimensions={"align.lam": [0, 100]}'])
        assert override.compare.dimensions == {"align.lam": [0, 100]}
        with pytest.raises(ConfigError):
            load_config(overrides=['compare.dimensions={"align.lambda": [0]}'])


class TestOverrides:
    def test_parse(self):
        assert parse_override("align.enabled=false") == ("align", "enabled", False)
        assert parse_override("compare.seeds=[1, 2]") == ("compare", "seeds", [1, 2])
        assert parse_override("train.mode=RE") == ("train", "mode", "RE")

    @pytest.mark.parametrize("text", ["align.enabled", "enabled=false", "a.b.c=1", ".x=1"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)

    def test_applied_on_top_of_file(self):
        config = load_config(CONFIG_DIR / "tiny.json", ["align.enabled=false", "train.epochs=3"])
        assert config.align.enabled is False
        assert config.train.epochs == 3
        assert config.train.lr == 0.01


class TestSnapshot:
    def test_round_trip(self, temp_dir):
        config = load_config(CONFIG_DIR / "tiny.toml")
        save_config(config, temp_dir / "config.json")
        assert load_config(temp_dir / "config.json") == config
        assert load_config(temp_dir / "config.json").config_hash() == config.config_hash()

    def test_hash_changes(self):
        assert RunConfig().config_hash() != load_config(overrides=["train.seed=1"]).config_hash()
