"""File helpers: atomic writes and deterministic JSON/CSV."""

import csv
import io
import json
import os
import tempfile

import numpy as np

__all__ = ["atomic_write", "dumps", "write_json", "read_json", "write_csv", "JsonInputError"]


class JsonInputError(ValueError):
    """Malformed JSON with line/column information."""

    def __init__(self, path, err):
        self.path = str(path)
        self.line = err.lineno
        self.column = err.colno
        super().__init__(f"{path}: line {err.lineno} column {err.colno}: {err.msg}")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj):
    """Stable JSON text (sorted keys, two-space indent, trailing newline)."""
    return json.dumps(obj, default=_default, indent=2, sort_keys=True, allow_nan=True) + "\n"


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, dumps(obj))


def read_json(path):
    with open(path) as f:
        text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise JsonInputError(path, err) from None


def write_csv(path, header, rows):
    """CSV with floats in shortest round-trip form."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write(path, buf.getvalue())
