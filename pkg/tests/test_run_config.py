import filecmp

import pytest

from test_utils import MockFile
from spikets.data import WindowSpec
from spikets.errors import ConfigError
from spikets.run_config import (
    OUTPUT_ROOT_ENV,
    RunConfig,
    apply_overrides,
    config_hash,
    dump_yaml_string,
    load_run_config,
    parse_run_config,
    read_run_config_yaml,
    to_mapping,
    write_run_config_yaml,
)


@pytest.fixture()
def simple_run_config():
    return {
        "seed": 3,
        "output_dir": "runs/rnn",
        "window": {"lookback": 12, "horizon": 6},
        "model": {"backbone": "rnn", "ts": 8},
    }


@pytest.fixture()
def simple_run_config_file(tmp_path):
    file = tmp_path / "simple_run_config_file.yaml"
    run_file_str = """seed: 3
output_dir: runs/rnn
window:
  lookback: 12
  horizon: 6
model:
  backbone: rnn
  ts: 8
"""
    return MockFile(file, run_file_str)


@pytest.fixture()
def complex_run_config_file(tmp_path):
    file = tmp_path / "complex_run_config_file.yaml"
    run_file_str = """# Short-term forecasting on the low-complexity synthetic series

seed: 0
output_dir: runs/short

dataset:
  source: synth
  preset: low   # sigma 0.3
  length: 5000

# Horizon 24 matches the short-term setting
window:
  lookback: 20
  horizon: 24

model:
  backbone: tcn    # tcn | rnn | gru | ispikformer
  encoder: conv
  ts: 4

"""
    return MockFile(file, run_file_str)


@pytest.fixture()
def modified_run_config_file(tmp_path):
    file = tmp_path / "modified_run_config_file.yaml"
    run_file_str = """# Short-term forecasting on the low-complexity synthetic series

seed: 0
output_dir: runs/short

dataset:
  source: synth
  preset: low   # sigma 0.3
  length: 5000

# Horizon 24 matches the short-term setting
window:
  lookback: 20
  horizon: 48

model:
  backbone: gru    # tcn | rnn | gru | ispikformer
  encoder: conv
  ts: 4

"""
    return MockFile(file, run_file_str)


def test_read_run_config(simple_run_config, simple_run_config_file):
    config_from_file = read_run_config_yaml(file_name=simple_run_config_file.file)

    assert config_from_file == simple_run_config


def test_write_run_config(tmp_path, simple_run_config, simple_run_config_file):
    file = tmp_path / "config_file"
    write_run_config_yaml(simple_run_config, file)

    assert filecmp.cmp(file, simple_run_config_file.file)


def test_round_trip_run_config(tmp_path, complex_run_config_file, modified_run_config_file):
    config = read_run_config_yaml(complex_run_config_file.file)
    config["window"]["horizon"] = 48
    config["model"]["backbone"] = "gru"
    write_run_config_yaml(config, tmp_path / "config.yaml")

    assert filecmp.cmp(tmp_path / "config.yaml", modified_run_config_file.file)


def test_read_missing_run_config():
    with pytest.raises(FileNotFoundError):
        read_run_config_yaml(file_name="garbage")


def test_defaults():
    cfg = parse_run_config({})

    assert cfg == RunConfig()
    assert cfg.window == WindowSpec(20, 24)
    assert cfg.model.lif.u_thr == 1.0 and cfg.model.lif.beta == 0.99
    assert (cfg.train.batch_size, cfg.train.lr, cfg.train.patience, cfg.train.max_epochs) == (128, 1e-4, 30, 200)
    assert cfg.model.readout == "flatten"
    assert cfg.dataset.ratios == (0.6, 0.2, 0.2)


def test_parse_nested(simple_run_config):
    cfg = parse_run_config(simple_run_config)

    assert cfg.seed == 3
    assert cfg.model.backbone == "rnn" and cfg.model.ts == 8
    assert cfg.window.horizon == 6


def test_partial_sections_keep_defaults():
    cfg = parse_run_config({"window": {"horizon": 48}, "model": {"lif": {"beta": 0.9}}})

    assert cfg.window == WindowSpec(20, 48)
    assert cfg.model.lif.beta == 0.9 and cfg.model.lif.u_thr == 1.0
    assert cfg.model.backbone == "tcn"


def test_family_ratios():
    cfg = parse_run_config({"dataset": {"source": "csv", "path": "x.csv", "family": "metr-la"}})
    assert cfg.dataset.ratios == (0.7, 0.2, 0.1)

    cfg = parse_run_config({"dataset": {"split": [0.5, 0.25, 0.25], "family": "metr-la"}})
    assert cfg.dataset.ratios == (0.5, 0.25, 0.25)


def test_unknown_key_names_line(tmp_path):
    file = MockFile(tmp_path / "bad.yaml", "seed: 1\nmodel:\n  backbone: tcn\n  layers: 3\n")

    with pytest.raises(ConfigError, match=r"'model.layers' \(line 4\)"):
        load_run_config(file.full_path)


@pytest.mark.parametrize(
    "mapping",
    [
        {"train": {"batch_size": 1}},
        {"model": {"backbone": "lstm"}},
        {"model": {"lif": {"beta": 0.0}}},
        {"window": {"lookback": 0}},
        {"dataset": {"source": "csv"}},
        {"dataset": {"family": "weather"}},
        {"model": "tcn"},
    ],
)
def test_invalid_values(mapping):
    with pytest.raises(ConfigError):
        parse_run_config(mapping)


def test_overrides(tmp_path, simple_run_config_file):
    cfg, mapping = load_run_config(
        simple_run_config_file.full_path, ["model.backbone=gru", "train.lr=0.001", "dataset.split=0.7,0.2,0.1"]
    )

    assert cfg.model.backbone == "gru"
    assert cfg.model.ts == 8
    assert cfg.train.lr == 0.001
    assert cfg.dataset.split == (0.7, 0.2, 0.1)
    assert mapping["train"]["lr"] == 0.001


def test_bad_override():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["model.backbone"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["=3"])


def test_to_mapping_round_trip():
    cfg = parse_run_config({"dataset": {"split": [0.7, 0.2, 0.1]}, "model": {"backbone": "ispikformer"}})

    assert parse_run_config(to_mapping(cfg)) == cfg
    assert "backbone: ispikformer" in dump_yaml_string(to_mapping(cfg))


def test_config_hash():
    a = parse_run_config({"seed": 1})

    assert config_hash(a) == config_hash(parse_run_config({"seed": 1}))
    assert config_hash(a) != config_hash(parse_run_config({"seed": 2}))


def test_output_root(monkeypatch, tmp_path):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    cfg = parse_run_config({"output_dir": "runs/a"})
    assert cfg.output_path().as_posix() == "runs/a"

    monkeypatch.setenv(OUTPUT_ROOT_ENV, tmp_path.as_posix())
    assert cfg.output_path() == tmp_path / "runs/a"
    assert parse_run_config({"output_dir": "/abs/out"}).output_path().as_posix() == "/abs/out"


@pytest.mark.parametrize(
    "mapping",
    [
        {"output_dir": 2024},
        {"seed": "one"},
        {"model": {"ts": 4.0}},
        {"train": {"batch_size": 16.5}},
        {"train": {"batch_size": True}},
        {"dataset": {"preset": 1}},
        {"dataset": {"source": "csv", "path": 3}},
        {"dataset": {"normalize": "yes"}},
        {"dataset": {"split": ["a", 0.5, 0.5]}},
        {"model": {"lif": {"beta": "high"}}},
        {"window": {"lookback": None}},
    ],
)
def test_wrong_value_types(mapping):
    with pytest.raises(ConfigError):
        parse_run_config(mapping)


def test_wrong_type_names_line(tmp_path):
    file = MockFile(tmp_path / "bad.yaml", "seed: 1\ntrain:\n  batch_size: 16.5\n")

    with pytest.raises(ConfigError, match=r"'train.batch_size' \(line 3\) must be int"):
        load_run_config(file.full_path)


def test_ints_widen_to_floats():
    cfg = parse_run_config({"train": {"lr": 1}, "model": {"lif": {"u_thr": 2}}})

    assert cfg.train.lr == 1.0 and isinstance(cfg.train.lr, float)
    assert cfg.model.lif.u_thr == 2.0 and isinstance(cfg.model.lif.u_thr, float)


def test_overrides_follow_field_types():
    cfg, mapping = load_run_config(
        None,
        ["output_dir=2024", "dataset.source=csv", "dataset.path=a,b.csv", "dataset.split=0.5,0.25,0.25"],
    )

    assert cfg.output_dir == "2024"
    assert cfg.dataset.path == "a,b.csv"
    assert cfg.dataset.split == (0.5, 0.25, 0.25)
    assert mapping["dataset"]["path"] == "a,b.csv"

    cfg, _ = load_run_config(None, ["dataset.family=metr-la", "dataset.family=null", "train.lr=1e-3"])
    assert cfg.dataset.family is None
    assert cfg.train.lr == 1e-3


@pytest.mark.parametrize("override", ["model.ts=4.0", "train.batch_size=16.5", "train.patience=1,2"])
def test_overrides_of_wrong_type(override):
    with pytest.raises(ConfigError):
        load_run_config(None, [override])
