import pytest
import yaml

from splitback.config import (
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    list_presets,
    parse_config,
    preset,
    serialize,
)
from splitback.errors import ConfigError


class TestPresets:
    def test_catalogue(self):
        assert list_presets() == [
            "attacked",
            "attacked-defended",
            "benign",
            "sweep-connectivity",
            "toy-bound",
        ]

    def test_unknown_name(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            preset("nope")

    def test_attacked_preset_hyperparameters(self):
        cfg = preset("attacked")
        assert cfg.attack.inference.margin == 0.4
        assert cfg.attack.poison_budget == 0.01
        assert cfg.attack.intensity == 20.0
        assert cfg.attack.inference.confidence == 0.999
        assert cfg.attack.inference.latent_dim == 32
        assert (cfg.attack.trigger.height, cfg.attack.trigger.width) == (5, 7)
        assert cfg.adversaries.ids == [0, 1, 2]
        assert cfg.dataset.num_train == 8000 and cfg.dataset.num_test == 2000

    def test_defended_differs_only_in_variance_and_name(self):
        plain = config_to_dict(preset("attacked"))
        defended = config_to_dict(preset("attacked-defended"))
        plain["train"]["defense_variance"] = 1e-10
        plain["name"] = "attacked-defended"
        assert plain == defended

    def test_all_presets_validate(self):
        for name in list_presets():
            preset(name).validate()

    def test_benign_preset_has_no_adversaries(self):
        cfg = preset("benign")
        assert cfg.adversaries.ids == [] and not cfg.attack_enabled


class TestRoundTrip:
    @pytest.mark.parametrize("name", ["benign", "attacked", "toy-bound", "sweep-connectivity"])
    def test_serialize_parse_identity(self, name, tmp_path):
        cfg = preset(name)
        path = tmp_path / "cfg.yaml"
        serialize(cfg, path)
        assert parse_config(path) == cfg

    def test_dict_round_trip(self):
        cfg = preset("attacked")
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        assert parse_config(path) == ExperimentConfig()

    def test_tuples_coerced_from_yaml_lists(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(
            yaml.safe_dump(
                {
                    "dataset": {"image_shape": [1, 10, 10]},
                    "partition": {"layout": "grid", "grid": [2, 2], "num_clients": 4},
                    "adversaries": {"ids": [0, 1], "topology": "custom", "edges": [[0, 1]]},
                    "attack": {"swap": False, "trigger": {"center": [5, 2], "height": 3, "width": 3}},
                }
            ),
            encoding="utf-8",
        )
        cfg = parse_config(path)
        assert cfg.dataset.image_shape == (1, 10, 10)
        assert cfg.partition.grid == (2, 2)
        assert cfg.adversaries.edges == [(0, 1)]
        assert cfg.attack.trigger.center == (5, 2)


class TestStrictParsing:
    def test_unknown_key_names_the_path(self):
        with pytest.raises(ConfigError, match=r"config\.dataset.*num_trian"):
            config_from_dict({"dataset": {"num_trian": 100}})

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="extra"):
            config_from_dict({"extra": 1})

    def test_section_must_be_mapping(self):
        with pytest.raises(ConfigError, match="expected a mapping"):
            config_from_dict({"train": [1, 2]})


class TestValidation:
    def test_collects_multiple_problems(self):
        cfg = ExperimentConfig()
        cfg.dataset.source = "csv"
        cfg.partition.layout = "diagonal"
        with pytest.raises(ConfigError) as excinfo:
            cfg.validate()
        message = str(excinfo.value)
        assert "csv" in message and "diagonal" in message

    def test_adversaries_must_be_clients(self):
        cfg = ExperimentConfig()
        cfg.adversaries.ids = [0, 9]
        with pytest.raises(ConfigError, match=r"\[9\] outside client range"):
            cfg.validate()

    def test_duplicate_adversaries_rejected(self):
        cfg = ExperimentConfig()
        cfg.adversaries.ids = [0, 0]
        with pytest.raises(ConfigError, match="duplicates"):
            cfg.validate()

    def test_idx_source_needs_all_paths(self):
        cfg = ExperimentConfig()
        cfg.dataset.source = "idx"
        cfg.dataset.images_path = "train-images"
        with pytest.raises(ConfigError, match="test_images_path"):
            cfg.validate()

    def test_scattered_needs_area(self):
        cfg = preset("attacked")
        cfg.attack.trigger.mode = "scattered"
        cfg.attack.trigger.total_area = None
        with pytest.raises(ConfigError, match="total_area"):
            cfg.validate()

    def test_oracle_consensus_excludes_swap(self):
        cfg = preset("attacked")
        cfg.attack.oracle_consensus = True
        with pytest.raises(ConfigError, match="swap"):
            cfg.validate()

    def test_degree_sweep_needs_step(self):
        cfg = ExperimentConfig()
        cfg.adversaries.ids = [0, 1]
        cfg.adversaries.topology = "degree-sweep"
        with pytest.raises(ConfigError, match="degree_step"):
            cfg.validate()

    def test_inference_problems_are_prefixed(self):
        cfg = preset("attacked")
        cfg.attack.inference.recon_weight = 1.5
        with pytest.raises(ConfigError, match=r"attack\.inference"):
            cfg.validate()

    def test_bad_target_class(self):
        cfg = preset("attacked")
        cfg.attack.target_class = 10
        with pytest.raises(ConfigError, match="target_class"):
            cfg.validate()
