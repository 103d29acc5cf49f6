import hashlib
from pathlib import Path


def convert_from_string(value: str, split_lists: bool = True):
    """Tries to convert a string to the most appropriate type. Leaves it unchanged if conversion does not succeed.

    Booleans and null use the YAML spelling (`true`, `false`, `null`/`none`). With `split_lists`, a comma-separated
    string is converted element-wise into a list; otherwise commas are kept as text.
    """
    text = value.strip()
    # Start by trying to convert to a bool or None
    if text.lower() == "true":
        return True
    elif text.lower() == "false":
        return False
    elif text.lower() in ("null", "none", "~"):
        return None
    if split_lists and "," in text:
        return [convert_from_string(item) for item in text.split(",") if item.strip()]
    # Next try to convert to integer or float
    for conversion in [
        lambda: int(text),
        lambda: float(text),
    ]:
        try:
            out = conversion()
        except ValueError:
            continue
        return out
    # None of the above succeeded, so just return the string
    return text


def convert_to_string(value) -> str:
    """Convert a value to a string, using the spelling understood by `convert_from_string`."""
    if isinstance(value, bool):
        return "true" if value else "false"
    elif value is None:
        return "null"
    elif isinstance(value, (list, tuple)):
        return ",".join(convert_to_string(v) for v in value)
    elif isinstance(value, float):
        return repr(value)
    else:
        return str(value)


def nano_to_sec(nanos):
    """Convert nanoseconds to seconds."""
    return nanos / (1000 * 1000 * 1000)


def pj_to_mj(picojoules):
    """Convert picojoules to millijoules."""
    return picojoules / 1e9


def file_sha256(path: Path) -> str:
    """Hex SHA-256 digest of a file's contents."""
    fname = Path(path)
    if not fname.is_file():
        raise FileNotFoundError(f"File not found: {fname.as_posix()}")
    return hashlib.sha256(fname.read_bytes()).hexdigest()


def text_sha256(text: str) -> str:
    """Hex SHA-256 digest of a string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
