import numpy as np
import pytest

from spikets.nets import ModelConfig, RnnConfig, SpikformerConfig, TcnConfig
from spikets.run_config import parse_run_config


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture()
def small_model_config():
    def make(backbone="tcn", encoder="conv", ts=2, **kwargs):
        return ModelConfig(
            backbone=backbone,
            encoder=encoder,
            ts=ts,
            tcn=TcnConfig(channels=4, blocks=2),
            rnn=RnnConfig(hidden=8),
            spikformer=SpikformerConfig(dim=8, ffn_dim=16, blocks=1),
            **kwargs,
        )

    return make


@pytest.fixture()
def small_run_mapping(tmp_path):
    return {
        "seed": 0,
        "output_dir": (tmp_path / "run").as_posix(),
        "dataset": {"source": "synth", "preset": "low", "length": 200, "seed": 0},
        "window": {"lookback": 8, "horizon": 4},
        "model": {
            "backbone": "tcn",
            "encoder": "conv",
            "ts": 2,
            "tcn": {"channels": 4, "blocks": 2},
            "rnn": {"hidden": 8},
            "spikformer": {"dim": 8, "ffn_dim": 16, "blocks": 1},
        },
        "train": {"batch_size": 16, "lr": 1e-3, "patience": 1, "max_epochs": 1, "seed": 0},
    }


@pytest.fixture()
def small_run_config(small_run_mapping):
    return parse_run_config(small_run_mapping)


@pytest.fixture()
def random_spikes():
    def make(shape, seed=0, p=0.5):
        return (np.random.default_rng(seed).random(shape) < p).astype(np.float32)

    return make
