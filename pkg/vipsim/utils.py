import functools
import hashlib
import json
import os

import numpy as np
from atomicwrites import AtomicWriter


def write_atomic(fname, data):
    """Write ``data`` (`bytes` or `str`) to ``fname`` atomically.

    Missing parent directories are created. A reader never observes a
    partially written file.
    """
    fname = os.path.expanduser(os.fspath(fname))
    dirname = os.path.dirname(fname)
    if dirname:
        os.makedirs(dirname, exist_ok=True)

    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    with AtomicWriter(fname, mode, overwrite=True).open() as f:
        f.write(data)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(data):
    """Canonical JSON: sorted keys, fixed separators, trailing newline.

    Two equal payloads always give identical bytes, which keeps artifact
    digests reproducible.
    """
    return json.dumps(_to_jsonable(data), sort_keys=True, indent=2) + "\n"


def save_json(fname, data):
    write_atomic(fname, dumps_json(data))


def load_json(fname):
    with open(os.path.expanduser(os.fspath(fname)), encoding="utf-8") as f:
        return json.load(f)


def sha256_bytes(blob):
    return hashlib.sha256(blob).hexdigest()


def sha256_file(fname, chunk_size=1 << 20):
    h = hashlib.sha256()
    with open(fname, "rb") as f:
        for chunk in iter(functools.partial(f.read, chunk_size), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_path(path):
    """Digest of a file, or of a directory as the digest of its sorted
    ``(relative name, file digest)`` listing."""
    path = os.fspath(path)
    if os.path.isfile(path):
        return sha256_file(path)
    h = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            rel = os.path.relpath(full, path).replace(os.sep, "/")
            h.update(f"{rel}\0{sha256_file(full)}\n".encode())
    return h.hexdigest()


def derive_seed(master_seed, *keys):
    """A 32-bit seed derived deterministically from ``master_seed`` and ``keys``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1)[0])


def make_rng(master_seed, *keys):
    """Independent `numpy.random.Generator` for the stream ``keys``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)
