import json

import pytest
from pydantic import ValidationError

from instance_retrieval.config import (
    ArmSpec,
    CorpusConfig,
    ExperimentSpec,
    LossSwitches,
    MlmCorruption,
    ModelConfig,
    ProposerConfig,
    derive_config,
    load_experiment_spec,
    parse_config,
)
from instance_retrieval.error import ConfigurationError
from tests import tiny_corpus


class TestConfig:
    def test_defaults_are_valid(self) -> None:
        spec = ExperimentSpec()

        assert spec.model.layers == (2, 2, 2)
        assert spec.cutoffs == [10, 50, 100]
        assert spec.pretrain.temperature == 0.07
        assert spec.corpus.distractor_count == 3
        assert spec.pretrain.loss_switches.enabled() == ["mlm", "mrp", "ctr"]

    def test_records_are_frozen(self) -> None:
        config = CorpusConfig()

        with pytest.raises(ValidationError):
            config.num_categories = 3  # type: ignore[misc]

    def test_parse_config_wraps_errors(self) -> None:
        with pytest.raises(ConfigurationError) as info:
            parse_config(ModelConfig, {"d_model": 10, "n_heads": 4})

        assert info.value.exit_code == 1
        assert info.value.extensions["errors"]

    def test_unknown_field_rejected(self) -> None:
        with pytest.raises(ConfigurationError):
            parse_config(ProposerConfig, {"mode": "oracle", "colour": "red"})

    def test_single_modality_needs_intra_layers_only(self) -> None:
        assert ModelConfig(L=6, K=0, H=0, modality="text").layers == (6, 0, 0)

        with pytest.raises(ConfigurationError):
            parse_config(ModelConfig, {"L": 2, "K": 1, "H": 0, "modality": "image"})

        with pytest.raises(ConfigurationError):
            parse_config(ModelConfig, {"L": 0, "K": 0, "H": 0})

    def test_loss_switches_need_one_loss(self) -> None:
        with pytest.raises(ValidationError):
            LossSwitches(mlm=False, mrp=False, ctr=False, itm=False)

    def test_corruption_must_sum_to_one(self) -> None:
        assert MlmCorruption(replace_with_mask=1.0, random_token=0.0, keep=0.0)

        with pytest.raises(ValidationError):
            MlmCorruption(replace_with_mask=0.5, random_token=0.1, keep=0.1)

    def test_corpus_ranges(self) -> None:
        with pytest.raises(ConfigurationError):
            parse_config(CorpusConfig, {"instances_per_multi": [3, 2]})

        with pytest.raises(ConfigurationError):
            parse_config(CorpusConfig, {"image_size": 16, "glyph_size": 8, "glyph_scale": [2.0, 3.0]})

        with pytest.raises(ConfigurationError):
            parse_config(CorpusConfig, {"num_categories": 4, "held_out_categories": [4]})

    def test_training_proposer_cannot_use_ground_truth(self) -> None:
        with pytest.raises(ConfigurationError):
            parse_config(ExperimentSpec, {"train_proposer": {"mode": "oracle"}})

    def test_text_length_holds_the_longest_caption(self) -> None:
        longest = CorpusConfig().longest_caption

        assert parse_config(ExperimentSpec, {"model": {"max_text_len": longest + 1}})
        with pytest.raises(ConfigurationError):
            parse_config(ExperimentSpec, {"model": {"max_text_len": longest}})

    def test_arm_names_unique(self) -> None:
        with pytest.raises(ConfigurationError):
            parse_config(ExperimentSpec, {"arms": [{"name": "a"}, {"name": "a"}]})

    def test_arm_holds_out_one_kind(self) -> None:
        assert ArmSpec(name="zs", held_out_brands=1).zero_shot
        assert not ArmSpec(name="plain").zero_shot

        with pytest.raises(ValidationError):
            ArmSpec(name="both", held_out_brands=1, held_out_category_fraction=0.25)

    def test_derive_config_validates(self) -> None:
        config = tiny_corpus()
        derived = derive_config(config, seed=5)

        assert derived.seed == 5
        assert config.seed == 0
        assert derived.split_sizes == config.split_sizes

        with pytest.raises(ConfigurationError):
            derive_config(config, num_categories=1)

    def test_load_experiment_spec(self, tmp_path) -> None:
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"name": "file", "model": {"L": 1, "K": 1, "H": 1}, "seeds": [1, 2]}))

        spec = load_experiment_spec(path, {"seeds": [7], "output_dir": str(tmp_path / "out")})

        assert spec.name == "file"
        assert spec.model.layers == (1, 1, 1)
        assert spec.seeds == [7]
        assert spec.output_dir == str(tmp_path / "out")

    def test_load_experiment_spec_errors(self, tmp_path) -> None:
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")

        with pytest.raises(ConfigurationError):
            load_experiment_spec(broken)

        with pytest.raises(ConfigurationError):
            load_experiment_spec(tmp_path / "missing.json")

        listing = tmp_path / "list.json"
        listing.write_text("[]")
        with pytest.raises(ConfigurationError):
            load_experiment_spec(listing)
