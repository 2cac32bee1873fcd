"""Versioned, checksummed checkpoint files.

Layout::

    XMEXP-CKPT <version> sha256=<hex> manifest=<bytes>\\n
    <manifest JSON, utf-8>
    <parameters as little-endian float64, in manifest order>

The checksum covers everything after the first line.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..nn import ARCHITECTURES, param_shapes

FORMAT_VERSION = 1
MAGIC = b"XMEXP-CKPT"


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    task: str
    n_agents: int
    params: dict[str, np.ndarray]
    train_config: dict = field(default_factory=dict)
    iteration: int = 0
    seed_lineage: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, value in ckpt.params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = _dumps({
        "version": ckpt.version,
        "task": ckpt.task,
        "n_agents": ckpt.n_agents,
        "iteration": ckpt.iteration,
        "seed_lineage": ckpt.seed_lineage,
        "train_config": ckpt.train_config,
        "meta": ckpt.meta,
        "params": table,
    })
    body = manifest + b"".join(chunks)
    digest = hashlib.sha256(body).hexdigest()
    header = b"%s %d sha256=%s manifest=%d\n" % (MAGIC, ckpt.version, digest.encode(), len(manifest))
    return header + body


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    p = Path(path)
    data = encode_checkpoint(ckpt)
    tmp = p.with_name(p.name + ".tmp")
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        tmp.replace(p)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {p}: {exc.strerror}") from None
    return p


def _parse_header(line: bytes, path) -> tuple[int, str, int]:
    parts = line.decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != MAGIC.decode():
        raise CheckpointChecksumError(f"{path}: not a checkpoint or header damaged")
    try:
        version = int(parts[1])
    except ValueError:
        raise CheckpointChecksumError(f"{path}: header damaged") from None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if not parts[2].startswith("sha256=") or not parts[3].startswith("manifest="):
        raise CheckpointChecksumError(f"{path}: header damaged")
    try:
        return version, parts[2][len("sha256="):], int(parts[3][len("manifest="):])
    except ValueError:
        raise CheckpointChecksumError(f"{path}: header damaged") from None


def decode_checkpoint(data: bytes, path="<bytes>", task: str | None = None) -> Checkpoint:
    newline = data.find(b"\n")
    if newline < 0:
        raise CheckpointChecksumError(f"{path}: truncated header")
    version, digest, manifest_len = _parse_header(data[:newline], path)
    body = data[newline + 1:]
    if hashlib.sha256(body).hexdigest() != digest:
        raise CheckpointChecksumError(f"{path}: checksum mismatch (file truncated or corrupted)")
    manifest = json.loads(body[:manifest_len].decode("utf-8"))
    payload = np.frombuffer(body[manifest_len:], dtype="<f8")
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        params[entry["name"]] = payload[start:start + size].astype(np.float64).reshape(shape)
    ckpt = Checkpoint(
        task=manifest["task"],
        n_agents=manifest["n_agents"],
        params=params,
        train_config=manifest["train_config"],
        iteration=manifest["iteration"],
        seed_lineage=manifest["seed_lineage"],
        meta=manifest["meta"],
        version=version,
    )
    check_shapes(ckpt.params, task or ckpt.task, ckpt.n_agents, path)
    return ckpt


def check_shapes(params: Mapping[str, np.ndarray], task: str, n_agents: int, path="<params>") -> None:
    """Compare against the task architecture, naming the first offending parameter."""
    if task not in ARCHITECTURES:
        raise CheckpointShapeError(f"{path}: unknown task {task!r}")
    expected = param_shapes(ARCHITECTURES[task], n_agents)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointShapeError(f"{path}: parameter {name!r} missing for task {task!r}")
        got = tuple(np.shape(params[name]))
        if got != shape:
            raise CheckpointShapeError(f"{path}: parameter {name!r} has shape {got}, task {task!r} expects {shape}")
    extra = [k for k in params if k not in expected]
    if extra:
        raise CheckpointShapeError(f"{path}: parameter {extra[0]!r} is not part of task {task!r}")


def load_checkpoint(path, task: str | None = None) -> Checkpoint:
    """Read and validate a checkpoint; ``task`` overrides the architecture it is checked against."""
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {p}: {exc.strerror}") from None
    return decode_checkpoint(data, p, task)
