"""Atomic file writes and small JSON helpers.

No command may leave a partial output behind on error, so every writer in
the package goes through write-to-temp + rename-on-success.
"""

import hashlib
import json
import os
import tempfile


def atomic_write_bytes(path, payload):
    """Write `payload` to `path` atomically (temp file + rename)."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def dump_json(obj):
    # sort_keys + fixed separators keep reruns byte-identical
    return json.dumps(obj, sort_keys=True, separators=(", ", ": "))


def atomic_write_json(path, obj):
    atomic_write_bytes(path, (dump_json(obj) + "\n").encode("utf-8"))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
