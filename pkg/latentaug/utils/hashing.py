import fnmatch
import hashlib
import json
from pathlib import Path

import numpy as np

TREE_HASH_EXCLUDE = ("run_record.json", "*.log")
CHUNK_BYTES = 1 << 20


def file_hash(path):

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(CHUNK_BYTES), b""):
            h.update(chunk)
    return h.hexdigest()


def bytes_hash(data):

    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def config_hash(config):
    """Hash of a JSON-serializable mapping, independent of key order."""

    return bytes_hash(json.dumps(config, sort_keys=True, default=str))


def state_hash(state):
    """Content hash over named arrays (name, dtype, shape and raw bytes)."""

    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(np.asarray(state[name]))
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def tree_hash(root, exclude=TREE_HASH_EXCLUDE):
    """Hash of every file below ``root`` keyed by relative path.

    Files matching ``exclude`` (run records, logs) are skipped so that replayed
    runs compare equal.
    """

    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if any(fnmatch.fnmatch(path.name, pattern) for pattern in exclude):
            continue
        h.update(path.relative_to(root).as_posix().encode("utf-8"))
        h.update(file_hash(path).encode("ascii"))
    return h.hexdigest()
