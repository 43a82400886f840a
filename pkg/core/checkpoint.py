"""Self-describing, checksummed checkpoint files.

Layout on disk::

    ETSCKPT\\n
    <8-byte big-endian header length><header JSON>
    <payload: torch serialization of the state dictionary>

The header carries the schema version, architecture id, payload size and the
payload's sha256. Files are written to a temporary sibling and renamed into
place, so a reader never sees a partially written checkpoint.
"""

import hashlib
import io
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from .exceptions import (
    ArchitectureMismatchError,
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
)
from .logger import logger

MAGIC = b"ETSCKPT\n"
SCHEMA_VERSION = 1
_LENGTH_BYTES = 8


def write_checkpoint(
    payload: Dict[str, Any], architecture: str, path: Union[str, Path]
) -> Path:
    """Serialize ``payload`` (tensors, state dicts, plain values) to ``path``.

    Args:
        payload: State to store
        architecture: Encoder architecture id stored in the header
        path: Destination file

    Returns:
        The written path

    Raises:
        CheckpointError: If the file cannot be written
    """
    path = Path(path)
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    body = buffer.getvalue()
    header = json.dumps(
        {
            "schema_version": SCHEMA_VERSION,
            "architecture": architecture,
            "payload_size": len(body),
            "sha256": hashlib.sha256(body).hexdigest(),
        },
        sort_keys=True,
    ).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(len(header).to_bytes(_LENGTH_BYTES, "big"))
            f.write(header)
            f.write(body)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"Cannot write checkpoint: {e}", str(path)) from e
    logger.debug(f"Checkpoint written to {path} ({len(body)} bytes)")
    return path


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    """Read and validate only the header of a checkpoint."""
    header, _ = _read(Path(path))
    return header


def _read(path: Path):
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError("Checkpoint file not found", str(path)) from None
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e}", str(path)) from e

    if not raw.startswith(MAGIC):
        raise CheckpointCorruptError("Not a checkpoint file (bad magic)", str(path))
    offset = len(MAGIC)
    if len(raw) < offset + _LENGTH_BYTES:
        raise CheckpointCorruptError("Checkpoint is truncated", str(path))
    header_len = int.from_bytes(raw[offset : offset + _LENGTH_BYTES], "big")
    offset += _LENGTH_BYTES
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"Checkpoint header unreadable: {e}", str(path)) from e
    if not isinstance(header, dict):
        raise CheckpointCorruptError("Checkpoint header is not a mapping", str(path))

    found = header.get("schema_version")
    if found != SCHEMA_VERSION:
        raise CheckpointVersionError(found, SCHEMA_VERSION, str(path))

    body = raw[offset + header_len :]
    if len(body) != header.get("payload_size"):
        raise CheckpointCorruptError(
            f"Checkpoint payload is {len(body)} bytes, header says {header.get('payload_size')}",
            str(path),
        )
    if hashlib.sha256(body).hexdigest() != header.get("sha256"):
        raise CheckpointCorruptError("Checkpoint checksum mismatch", str(path))
    return header, body


def read_checkpoint(
    path: Union[str, Path],
    expected_architecture: Optional[str] = None,
    map_location: Union[str, torch.device] = "cpu",
) -> Dict[str, Any]:
    """Load a checkpoint written by :func:`write_checkpoint`.

    Args:
        path: Checkpoint file
        expected_architecture: If given, the stored architecture id must match
        map_location: Device for loaded tensors

    Returns:
        The stored payload with an ``"architecture"`` entry added

    Raises:
        CheckpointCorruptError: Truncated file or checksum mismatch
        CheckpointVersionError: Unsupported schema version
        ArchitectureMismatchError: Stored architecture differs from the expected one
    """
    path = Path(path)
    header, body = _read(path)
    architecture = header.get("architecture", "")
    if expected_architecture is not None and architecture != expected_architecture:
        raise ArchitectureMismatchError(expected_architecture, architecture, str(path))
    try:
        payload = torch.load(io.BytesIO(body), map_location=map_location, weights_only=True)
    except (RuntimeError, ValueError, EOFError) as e:
        raise CheckpointCorruptError(f"Checkpoint payload unreadable: {e}", str(path)) from e
    if not isinstance(payload, dict):
        raise CheckpointCorruptError("Checkpoint payload is not a mapping", str(path))
    payload["architecture"] = architecture
    return payload
