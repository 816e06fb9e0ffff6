import dataclasses
import json

import pytest

from eseg import graph as G
from eseg.errors import ConfigError
from eseg.model import ModelConfig, build_model, desk_config, get_config, load_zoo

SIZE_TABLE = {
    "eseg-lite-s": (0.4, 0.6, 64, 1),
    "eseg-lite-m": (0.6, 1.0, 80, 2),
    "eseg-lite-l": (1.0, 1.0, 96, 3),
    "eseg-s": (1.0, 1.1, 96, 4),
    "eseg-m": (1.4, 1.8, 192, 5),
    "eseg-l": (2.0, 3.1, 288, 6),
}


def test_zoo_matches_size_table():
    zoo = load_zoo()
    assert set(zoo) == set(SIZE_TABLE)
    for name, row in SIZE_TABLE.items():
        cfg = zoo[name]
        assert (cfg.width, cfg.depth, cfg.channels, cfg.repeats) == row
        lite = name.startswith("eseg-lite")
        assert cfg.min_level == (3 if lite else 2) and cfg.max_level == 9
        assert cfg.conv_style == ("regular" if lite else "separable")


def test_unknown_model_lists_valid_names():
    with pytest.raises(ConfigError) as e:
        get_config("eseg-xl")
    assert e.value.to_dict()["valid"] == sorted(SIZE_TABLE)


def test_zoo_file_override(tmp_path):
    doc = {"schema": "eseg.zoo/1", "models": [dataclasses.asdict(dataclasses.replace(get_config("eseg-s"), name="tiny", width=0.5))]}
    path = tmp_path / "zoo.json"
    path.write_text(json.dumps(doc))
    assert load_zoo(path)["tiny"].width == 0.5


def test_config_roundtrip_and_validation():
    cfg = desk_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**cfg.to_dict(), "colour": "red"})
    with pytest.raises(ConfigError):
        ModelConfig(min_level=6)


def test_logits_at_input_resolution():
    g = build_model(get_config("eseg-s"), bind=None)
    assert G.infer_shapes(g, (1, 3, 1024, 2048))["logits"] == (1, 19, 1024, 2048)
    lite = build_model(get_config("eseg-lite-s"), bind=None)
    assert G.infer_shapes(lite, (2, 3, 512, 512))["logits"] == (2, 19, 512, 512)


def test_seeded_init_is_order_independent():
    a = build_model(desk_config(), "random", 7)
    b = build_model(desk_config(), "random", 7)
    c = build_model(desk_config(), "random", 8)
    assert all((a.params[k] == b.params[k]).all() for k in a.params)
    assert any((a.params[k] != c.params[k]).any() for k in a.params)
