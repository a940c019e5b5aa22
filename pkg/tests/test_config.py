import pytest

from sudokusens.config import ConfigError, RunConfig, config_hash, from_dict, load_config, to_jsonable


def test_defaults_load_without_a_file():
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert cfg.methods == ("basic", "sudokusens") and cfg.seeds == (0, 1, 2)


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"satcl.temperature": 0}, "satcl.temperature: must be > 0"),
        ({"satcl.temprature": 0.5}, "satcl.temprature: unknown field"),
        ({"classifier.hidden": "wide"}, "classifier.hidden: expected an integer"),
        ({"cvae.beta": -1.0}, "cvae.beta: must be >= 0"),
        ({"seeds": []}, "seeds: must be nonempty"),
        ({"coverages": [150]}, "coverages: value 150.0 outside"),
        ({"generator": 3}, "generator: expected a mapping"),
        ({"methods": ["magic"]}, "unknown methods"),
    ],
)
def test_errors_name_the_field_path(overrides, message):
    with pytest.raises(ConfigError) as info:
        load_config(None, overrides)
    assert message in str(info.value)


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("satcl:\n  epochs: 3\nseeds: [4, 5]\ncoverages: [50]\n")
    cfg = load_config(path, {"satcl.temperature": 0.1})
    assert cfg.satcl.epochs == 3 and cfg.satcl.temperature == 0.1
    assert cfg.seeds == (4, 5) and cfg.coverages == (50.0,)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(tmp_path / "list.yaml")


def test_round_trip_and_hash():
    cfg = load_config(None, {"classifier.family": "transformer_like", "coverages": [100, 75, 50]})
    again = from_dict(RunConfig, to_jsonable(cfg))
    assert again == cfg and config_hash(again) == config_hash(cfg)
    assert config_hash(cfg) != config_hash(RunConfig())
    # output location is not part of the experiment's identity
    assert config_hash(from_dict(RunConfig, to_jsonable(cfg) | {"output_dir": "/x"})) == config_hash(cfg)


def test_bools_are_not_numbers():
    with pytest.raises(ConfigError, match="satcl.epochs"):
        load_config(None, {"satcl.epochs": True})
