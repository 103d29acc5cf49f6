"""Model checkpoints.

A checkpoint is a numpy `.npz` archive holding:

- `__format__`: the format tag, currently "spikets-checkpoint/1";
- `__config__`: the run configuration, as a YAML document;
- `param/<name>`: one array per parameter and buffer.
"""

import io
from pathlib import Path

import numpy as np
from ruamel.yaml import YAML

from spikets.errors import CheckpointError
from spikets.layers import Module

FORMAT_TAG = "spikets-checkpoint/1"
PREFIX = "param/"


def save_checkpoint(path: Path, model: Module, config: dict) -> Path:
    """Write the model state and its run configuration to `path`."""
    path = Path(path)
    stream = io.StringIO()
    YAML().dump(config, stream)
    arrays = {f"{PREFIX}{name}": values for name, values in model.state_dict().items()}
    with open(path, "wb") as f:
        np.savez(f, __format__=np.array(FORMAT_TAG), __config__=np.array(stream.getvalue()), **arrays)
    return path


def load_checkpoint(path: Path) -> tuple:
    """Read a checkpoint.

    Returns:
        tuple: (state dict of arrays, configuration mapping).

    Raises:
        FileNotFoundError: If the file does not exist.
        CheckpointError: If the file is not a checkpoint of this format.
    """
    fname = Path(path)
    if not fname.is_file():
        raise FileNotFoundError(f"File not found: {fname.as_posix()}")
    try:
        with np.load(fname, allow_pickle=False) as archive:
            contents = {key: archive[key] for key in archive.files}
    except (OSError, ValueError) as err:
        raise CheckpointError(f"{fname.as_posix()} is not a readable checkpoint: {err}") from None

    tag = str(contents.pop("__format__", ""))
    if tag != FORMAT_TAG:
        raise CheckpointError(f"{fname.as_posix()}: unsupported checkpoint format '{tag}', expected '{FORMAT_TAG}'")
    if "__config__" not in contents:
        raise CheckpointError(f"{fname.as_posix()}: checkpoint has no configuration")
    config = YAML().load(str(contents.pop("__config__")))
    state = {key[len(PREFIX) :]: value for key, value in contents.items() if key.startswith(PREFIX)}
    return state, config


def restore(model: Module, state: dict) -> Module:
    """Load a checkpoint state into a model built from the same configuration; shapes must agree."""
    model.load_state_dict(state)
    return model
