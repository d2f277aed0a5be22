import pytest

from denseflow.config import (
    TrainConfig,
    config_from_text,
    config_to_text,
    full_scale_train_config,
)
from denseflow.errors import DataFormatError
from denseflow.model import desk_12_4, full_45_6, full_74_10


class TestRoundTrip:
    @pytest.mark.parametrize("factory", [desk_12_4, full_45_6, full_74_10])
    def test_flow_config_reserializes_identically(self, factory):
        cfg = factory()
        text = config_to_text(cfg)
        parsed, train, state = config_from_text(text)
        assert parsed == cfg
        assert train is None and state is None
        assert config_to_text(parsed) == text

    def test_with_train_and_state(self):
        cfg = desk_12_4()
        train = TrainConfig(lr=5e-4, batch_size=16, epochs=3, seed=9)
        text = config_to_text(cfg, train, state={"step": 42, "epoch": 1})
        parsed, ptrain, state = config_from_text(text)
        assert parsed == cfg
        assert ptrain == train
        assert state == {"step": 42, "epoch": 1}
        assert config_to_text(parsed, ptrain, state) == text

    def test_full_scale_train_preset_values(self):
        cfg = full_scale_train_config()
        assert cfg.lr == 1e-3
        assert cfg.warmup_steps == 5000
        assert cfg.decay_factor == 0.95
        assert cfg.finetune_lr == 2e-5


class TestStrictParsing:
    def test_unknown_key_rejected(self):
        text = config_to_text(desk_12_4()) + "\n[model]\n"
        with pytest.raises(DataFormatError, match="duplicate section"):
            config_from_text(text)

    def test_unknown_key_in_model(self):
        text = config_to_text(desk_12_4()).replace(
            "growth_rate = 4", "growth_rate = 4\nmystery = 1"
        )
        with pytest.raises(DataFormatError, match="mystery"):
            config_from_text(text)

    def test_unknown_section_rejected(self):
        text = config_to_text(desk_12_4()) + "[extras]\nfoo = 1\n"
        with pytest.raises(DataFormatError, match="extras"):
            config_from_text(text)

    def test_missing_model_section(self):
        with pytest.raises(DataFormatError, match="model"):
            config_from_text("[train]\nlr = 0.001\n")

    def test_bad_block_numbering(self):
        text = config_to_text(desk_12_4()).replace("model.block.2", "model.block.5")
        with pytest.raises(DataFormatError, match="numbered"):
            config_from_text(text)

    def test_key_outside_section(self):
        with pytest.raises(DataFormatError, match="outside"):
            config_from_text("lr = 3\n")

    def test_malformed_line(self):
        with pytest.raises(DataFormatError, match="key = value"):
            config_from_text("[model]\nimage_shape\n")

    def test_comments_and_blanks_ignored(self):
        text = "# a comment\n\n" + config_to_text(desk_12_4())
        parsed, _, _ = config_from_text(text)
        assert parsed == desk_12_4()

    def test_image_shape_arity(self):
        text = config_to_text(desk_12_4()).replace(
            "image_shape = 3 8 8", "image_shape = 3 8"
        )
        with pytest.raises(DataFormatError, match="three integers"):
            config_from_text(text)


class TestTrainConfigValidation:
    def test_rejects_bad_lr(self):
        with pytest.raises(DataFormatError):
            TrainConfig(lr=0.0).validate()

    def test_rejects_bad_decay(self):
        with pytest.raises(DataFormatError):
            TrainConfig(decay_factor=1.5).validate()

    def test_rejects_negative_warmup(self):
        with pytest.raises(DataFormatError):
            TrainConfig(warmup_steps=-1).validate()

    def test_default_is_valid(self):
        TrainConfig().validate()
