"""Binary checkpoint container for one or more SE-CRNN models.

Layout (all integers little-endian)::

    b"SEDD"                      magic
    u32 version                  currently 1
    u32 n, n bytes               UTF-8 config block, one key=value per line
    repeated until EOF:
        u32 n, n bytes           UTF-8 parameter name ("<role>/<param>")
        u32 rank
        rank x u64               dimensions
        prod(dims) x f32         values, row-major

The config block lists the stored roles under ``roles`` and each role's
architecture under ``<role>.<field>`` keys; any further keys are free-form run
metadata.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ArchitectureError, FormatError

MAGIC = b"SEDD"
VERSION = 1


def _encode_config(items: Mapping[str, str]) -> bytes:
    lines = []
    for k, v in items.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"config entry {k!r} cannot be stored as a key=value line")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_config(raw: bytes) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"config block is not UTF-8: {e}") from None
    items = {}
    for line in text.split("\n"):
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed config line {line!r}")
        k, v = line.split("=", 1)
        items[k] = v
    return items


def write_records(path, config: Mapping[str, str], records: Mapping[str, np.ndarray]) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = _encode_config(config)
    out += struct.pack("<I", len(cfg)) + cfg
    for name, arr in records.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_records(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse a checkpoint completely, raising :class:`FormatError` on any defect."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes, not a SEDD checkpoint")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = struct.unpack("<I", take(4, "config length"))
    config = _decode_config(take(n, "config block"))
    records = {}
    while pos < len(buf):
        (n,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"parameter name at byte {pos} is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * count, f"values of {name}"), dtype="<f4")
        if name in records:
            raise FormatError(f"duplicate parameter {name!r}")
        records[name] = values.reshape(dims).copy()
    return config, records


def check_state_fits(model, state: Mapping[str, np.ndarray]) -> None:
    """Raise :class:`ArchitectureError` naming the first parameter that does not fit."""
    expected = {k: v.shape for k, v in model.params.items()}
    expected.update({k: v.shape for k, v in model.buffers().items()})
    for name, shape in expected.items():
        if name not in state:
            raise ArchitectureError(f"parameter {name!r} missing from stored state")
        got = tuple(np.shape(state[name]))
        if got != tuple(shape):
            raise ArchitectureError(f"parameter {name!r}: stored shape {got} != model shape {tuple(shape)}")
    extra = [k for k in state if k not in expected]
    if extra:
        raise ArchitectureError(f"stored parameter {extra[0]!r} has no place in the model")


def save_checkpoint(path, models: Mapping[str, "SECRNN"], extra: Mapping[str, str] | None = None) -> None:
    """Write ``models`` (role -> model) and optional run metadata to ``path``."""
    config = {"roles": ",".join(models)}
    records = {}
    for role, model in models.items():
        if "/" in role or "," in role:
            raise ValueError(f"invalid role name {role!r}")
        for k, v in model.cfg.to_items().items():
            config[f"{role}.{k}"] = v
        for name, arr in model.state_dict().items():
            records[f"{role}/{name}"] = arr
    for k, v in (extra or {}).items():
        config[k] = v
    write_records(path, config, records)


def _split_roles(config, records):
    roles = [r for r in config.get("roles", "").split(",") if r]
    if not roles:
        raise FormatError("checkpoint lists no model roles")
    states = {r: {} for r in roles}
    for name, arr in records.items():
        role, _, pname = name.partition("/")
        if role not in states:
            raise FormatError(f"record {name!r} belongs to an undeclared role")
        states[role][pname] = arr
    return roles, states


def load_checkpoint(path, dtype=np.float32):
    """Rebuild every stored model; returns ``(models, config)``."""
    from .models import SECRNN, SECRNNConfig

    config, records = read_records(path)
    roles, states = _split_roles(config, records)
    models = {}
    for role in roles:
        prefix = f"{role}."
        items = {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}
        try:
            cfg = SECRNNConfig.from_items(items)
        except (KeyError, ValueError) as e:
            raise FormatError(f"architecture of role {role!r} unreadable: {e}") from None
        model = SECRNN(cfg, dtype=dtype)
        model.load_state_dict(states[role])
        models[role] = model
    return models, config


def load_into(model, path, role: str) -> None:
    """Load the parameters of ``role`` from ``path`` into an existing ``model``."""
    config, records = read_records(path)
    _, states = _split_roles(config, records)
    if role not in states:
        raise ArchitectureError(f"checkpoint has no role {role!r}")
    model.load_state_dict(states[role])


def parameter_hash(model) -> str:
    """SHA-256 over parameter names, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
