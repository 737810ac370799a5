import pytest

from dermtriage.config import Config, config_from_dict, load_config, resolve
from dermtriage.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("")
    assert load_config(p) == Config()


def test_values_are_typed(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[train]\nwidth = 64\nlr = 1\nablation_seeds = [3, 4]\n"
                 "[thresholds]\nper_class = { mel_low = 0.8 }\n[synth]\nfractions = [0.8, 0.1, 0.1]\n")
    cfg = load_config(p)
    assert cfg.train.width == 64 and cfg.train.lr == 1.0 and isinstance(cfg.train.lr, float)
    assert cfg.train.ablation_seeds == (3, 4)
    assert cfg.thresholds.per_class == {"mel_low": 0.8}
    assert cfg.synth.fractions == (0.8, 0.1, 0.1)


@pytest.mark.parametrize("raw, msg", [
    ({"model": {}}, "unknown section"),
    ({"train": {"widht": 3}}, "unknown key"),
    ({"train": {"width": 3.5}}, "integer"),
    ({"train": {"width": True}}, "integer"),
    ({"train": {"class_weighted": 1}}, "boolean"),
    ({"mc": {"passes": "100"}}, "integer"),
    ({"thresholds": {"ppv": "high"}}, "number"),
    ({"synth": {"fractions": 0.7}}, "array"),
    ({"data": {"manifest": 3}}, "string"),
    ({"train": 5}, "table"),
])
def test_rejections(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(raw)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    p = tmp_path / "bad.toml"
    p.write_text("[train\nwidth = ")
    with pytest.raises(ConfigError):
        load_config(p)


def test_paths_resolve_against_config_dir(tmp_path):
    assert resolve(tmp_path / "c.toml", "data/m.csv") == tmp_path / "data" / "m.csv"
    assert resolve(tmp_path / "c.toml", "/abs/m.csv").as_posix() == "/abs/m.csv"
