import pytest

from soundalign.config import ExperimentConfig, load_config
from soundalign.errors import ConfigurationError

INI = """
[encoders]
d_text = 16
d_vision = 16
[training]
profile = full
batch_size = 8
ext_loss_enabled = yes
[augmentation]
transforms = gain, reverb
gain_range = 0.1, 0.3
[rule:quiet]
kind = gain
low = 0
high = inf
templates =
    a far away {subject} {rest}
[rule:echo]
kind = reverb
templates =
    {a_subject} in a cave
[compose]
templates =
    {u_a_subject} with {v_a_subject}
"""


def test_defaults():
    cfg = load_config()
    assert cfg == ExperimentConfig()
    assert (cfg.training.lr_text, cfg.training.lr_vision) == (1e-3, 1e-4)


def test_ini_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(INI)
    cfg = load_config(path)
    assert (cfg.training.lr_text, cfg.training.lr_vision) == (1e-5, 1e-7)
    assert cfg.training.batch_size == 8 and cfg.training.ext_loss_enabled
    assert cfg.model.d_text == 16 and cfg.model.d_vision == 16
    assert cfg.augmentation.transforms == ("gain", "reverb")
    assert cfg.augmentation.gain_range == (0.1, 0.3)
    assert [r.kind for r in cfg.rules] == ["gain", "reverb"]
    assert cfg.compose_templates == ("{u_a_subject} with {v_a_subject}",)


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(INI)
    cfg = load_config(path, {"training.lr_text": "0", "training.seed": "4"})
    assert cfg.training.lr_text == 0.0 and cfg.training.lr_vision == 1e-7 and cfg.training.seed == 4


@pytest.mark.parametrize("overrides, key", [
    ({"training.bogus": "1"}, "training.bogus"),
    ({"training.batch_size": "many"}, "training.batch_size"),
    ({"nosuch.key": "1"}, "nosuch"),
    ({"training.profile": "huge"}, "training.profile"),
    ({"training.patience": "0"}, "patience"),
    ({"augmentation.transforms": "gain, reverb, pitch_shift, flange"}, "flange"),
])
def test_errors_name_the_key(overrides, key):
    with pytest.raises(ConfigurationError, match=key):
        load_config(None, overrides)


def test_transform_without_rule(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[rule:g]\nkind = gain\ntemplates =\n    a distant {subject}\n")
    with pytest.raises(ConfigurationError, match="reverb"):
        load_config(path)


def test_missing_file():
    with pytest.raises(ConfigurationError, match="does not exist"):
        load_config("/nonexistent/x.ini")


def test_dict_round_trip_and_hash():
    cfg = ExperimentConfig().replace(training__seed=3, model__pooling="mean")
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.hash() == cfg.hash()
    assert cfg.hash() != ExperimentConfig().hash()
