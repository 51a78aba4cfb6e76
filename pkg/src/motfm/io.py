"""Binary tensor files, TOML manifests and CSV matrices.

A tensor file holds one thread::

    magic    8 bytes  b"MOTFMT01"
    K        u32 LE
    dims     K x u64 LE
    T        u64 LE
    payload  T blocks of prod(dims) float64 LE, first mode fastest

Manifests are TOML documents with a ``name``, a ``demean`` flag and one
``[[threads]]`` table per thread (``id``, ``path`` relative to the manifest,
optional ``mode_labels``).
"""

from __future__ import annotations

import struct
import sys
from math import prod
from pathlib import Path

import numpy as np
import tomli_w

from motfm.errors import AlignmentError, ConfigurationError, DataError, FormatError, RankError
from motfm.model import Collection, RankProfile, ThreadSeries, demean as demean_collection, validate

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MAGIC = b"MOTFMT01"
SUFFIX = ".motf"


def write_tensor_file(path, data) -> None:
    """Write a ``(T, *dims)`` array as a tensor file."""
    data = np.asarray(data, dtype=float)
    if data.ndim < 2:
        raise DataError("tensor file payload needs a time axis and at least one mode")
    T, dims = data.shape[0], data.shape[1:]
    header = MAGIC + struct.pack(f"<I{len(dims)}QQ", len(dims), *dims, T)
    payload = np.asarray(data.reshape(T, -1, order="F"), dtype="<f8").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_tensor_file(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc.strerror or exc}") from exc
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (K,) = struct.unpack_from("<I", raw, 8)
    head = 12 + 8 * K + 8
    if K < 1 or len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    *dims, T = struct.unpack_from(f"<{K}QQ", raw, 12)
    size = T * prod(dims) * 8
    if len(raw) - head != size:
        raise FormatError(f"{path}: payload has {len(raw) - head} bytes, header implies {size}")
    flat = np.frombuffer(raw, dtype="<f8", offset=head).astype(float)
    return flat.reshape((T, prod(dims))).reshape((T, *dims), order="F")


def load_toml(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_manifest(path) -> dict:
    doc = load_toml(path)
    threads = doc.get("threads")
    if not threads:
        raise FormatError(f"{path}: manifest lists no threads")
    ids = [t.get("id") for t in threads]
    if any(i is None or "path" not in t for i, t in zip(ids, threads)):
        raise FormatError(f"{path}: every thread needs 'id' and 'path'")
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate thread ids")
    return doc


def read_collection(path, demean=None) -> Collection:
    """Load the threads listed in a manifest; ``demean`` overrides the manifest flag."""
    path = Path(path)
    doc = read_manifest(path)
    base = path.parent
    threads = []
    for entry in doc["threads"]:
        file = base / entry["path"]
        if not file.exists():
            raise FileNotFoundError(f"thread {entry['id']!r}: file not found: {file}")
        data = read_tensor_file(file)
        labels = entry.get("mode_labels")
        threads.append(ThreadSeries(data, name=entry["id"], mode_labels=tuple(labels) if labels else None))
    lengths = {t.T for t in threads}
    if len(lengths) > 1:
        detail = ", ".join(f"{t.name}: T={t.T}" for t in threads)
        raise AlignmentError(f"threads disagree on T ({detail})")
    c = Collection(threads, name=doc.get("name", path.stem))
    validate(c)
    flag = doc.get("demean", False) if demean is None else demean
    return demean_collection(c) if flag else c


def write_collection(c: Collection, directory, overwrite=False, demean=False, name="manifest.toml") -> Path:
    """Write one tensor file per thread plus a manifest; returns the manifest path."""
    if not len(c):
        raise DataError("refusing to write an empty collection")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / name
    files = [directory / f"{t.name}{SUFFIX}" for t in c.threads]
    if len({f.name for f in files}) != len(files):
        raise DataError("thread names must be unique to be written")
    if not overwrite:
        clash = [p for p in files + [manifest] if p.exists()]
        if clash:
            raise FileExistsError(f"refusing to overwrite {clash[0]} (pass overwrite=True)")
    entries = []
    for t, f in zip(c.threads, files):
        write_tensor_file(f, t.data)
        entry = {"id": t.name, "path": f.name}
        if t.mode_labels:
            entry["mode_labels"] = list(t.mode_labels)
        entries.append(entry)
    doc = {"name": c.name, "demean": bool(demean), "threads": entries}
    manifest.write_bytes(tomli_w.dumps(doc).encode())
    return manifest


def write_matrix(path, a) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    lines = [",".join(f"{v:.17g}" for v in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    try:
        return np.array([[float(v) for v in row.split(",")] for row in rows], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_rank_profile(path, c: Collection | None = None) -> RankProfile:
    """Read ``[[threads]]`` tables with ``global`` and ``local`` rank lists.

    When ``c`` is given, entries are matched to threads by ``id`` and checked.
    """
    doc = load_toml(path)
    entries = doc.get("threads", [])
    if c is not None:
        by_id = {e.get("id"): e for e in entries}
        missing = [n for n in c.names if n not in by_id]
        if missing:
            raise RankError(f"{path}: no ranks for thread(s) {missing}")
        entries = [by_id[n] for n in c.names]
    try:
        profile = RankProfile([e["global"] for e in entries], [e.get("local", [0] * len(e["global"])) for e in entries])
    except KeyError as exc:
        raise FormatError(f"{path}: missing key {exc}") from exc
    if c is not None:
        profile.check(c)
    return profile


def write_rank_profile(path, profile: RankProfile, names) -> None:
    doc = {
        "threads": [
            {"id": n, "global": list(g), "local": list(loc)}
            for n, g, loc in zip(names, profile.global_ranks, profile.local_ranks)
        ]
    }
    Path(path).write_bytes(tomli_w.dumps(doc).encode())


def read_dgp_spec(path):
    """Build a :class:`motfm.simulation.DgpSpec` from a TOML file."""
    from motfm.simulation import DgpSpec
    from motfm.tensor import Channel

    doc = load_toml(path)
    if "channels" in doc:
        doc["channels"] = tuple(Channel.parse(s) for s in doc["channels"])
    try:
        return DgpSpec(**doc)
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
