"""Network and filter-bank file I/O.

A network is stored as a pair of files sharing a stem:

- ``<stem>.nfg``: UTF-8 JSON descriptor (schema version, nodes, ordered
  edges, inputs, outputs, meta and per-parameter metadata including the byte
  offset of each tensor in the blob, plus the blob's CRC-32).
- ``<stem>.nfw``: the parameter tensors as little-endian float32 values,
  concatenated in descriptor order without padding.

Filter banks use the same layout with a smaller descriptor.
"""
from __future__ import annotations

import json
import logging
import zlib
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .errors import GraphError, SerializationError
from .netgraph import LayerNode, NetworkGraph, ParamTensor, validate_graph
from .utils import PathLike

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
GRAPH_FORMAT = "steerfix-netgraph"
FILTER_BANK_FORMAT = "steerfix-filterbank"
DESCRIPTOR_SUFFIX = ".nfg"
BLOB_SUFFIX = ".nfw"
BLOB_DTYPE = np.dtype("<f4")


def _to_json(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_to_json(v) for v in value]
    if isinstance(value, list):
        return [_to_json(v) for v in value]
    if isinstance(value, dict):
        return {k: _to_json(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


def _dumps(document: Dict[str, Any]) -> str:
    return json.dumps(document, indent=2) + "\n"


def serialize(net: NetworkGraph) -> Tuple[str, bytes]:
    """
    Encode a network as a descriptor text and a weight blob.

    Parameters
    ----------
    net : NetworkGraph
        Network to encode.

    Returns
    -------
    descriptor : str
        JSON text; one line per scalar field so editing a flag touches a
        single line.
    blob : bytes
        Little-endian float32 tensors, ``4 * sum(param sizes)`` bytes.
    """
    offset = 0
    params = []
    chunks = []
    for p in net.params:
        data = p.tensor.astype(BLOB_DTYPE, copy=False).tobytes()
        params.append(
            {
                "owner": p.owner,
                "name": p.name,
                "shape": list(p.shape),
                "fixed": p.fixed,
                "spatial": p.spatial,
                "buffer": p.buffer,
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    descriptor = {
        "format": GRAPH_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "meta": _to_json(dict(net.meta)),
        "inputs": list(net.inputs),
        "outputs": list(net.outputs),
        "nodes": [
            {"id": n.id, "kind": n.kind.value, "attrs": _to_json(dict(n.attrs))} for n in net.nodes
        ],
        "edges": [[src, dst] for src, dst in net.edges],
        "params": params,
        "blob": {"nbytes": len(blob), "crc32": zlib.crc32(blob)},
    }
    return _dumps(descriptor), blob


def _check_blob(header: Dict[str, Any], blob: bytes) -> None:
    expected = header.get("blob", {})
    if expected.get("nbytes") != len(blob):
        raise SerializationError(
            f"Blob has {len(blob)} bytes, descriptor expects {expected.get('nbytes')}"
        )
    if expected.get("crc32") != zlib.crc32(blob):
        raise SerializationError("Blob checksum mismatch")


def _load_descriptor(text: str, expected_format: str) -> Dict[str, Any]:
    try:
        header = json.loads(text)
    except json.JSONDecodeError as e:
        raise SerializationError(f"Descriptor is not valid JSON: {e}") from e
    if header.get("format") != expected_format:
        raise SerializationError(
            f"Expected a '{expected_format}' descriptor, got {header.get('format')!r}"
        )
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SerializationError(f"Unsupported schema version {header.get('schema_version')!r}")
    return header


def deserialize(descriptor: str, blob: bytes, validate: bool = True) -> NetworkGraph:
    """
    Decode a network written by :func:`serialize`.

    Raises
    ------
    SerializationError
        On checksum mismatch, unknown node kinds, overlapping or out-of-range
        tensor offsets and size mismatches.
    """
    header = _load_descriptor(descriptor, GRAPH_FORMAT)
    _check_blob(header, blob)

    try:
        nodes = [LayerNode(n["id"], n["kind"], n.get("attrs", {})) for n in header["nodes"]]
    except GraphError as e:
        raise SerializationError(str(e)) from e

    params = []
    end = 0
    for entry in sorted(header["params"], key=lambda e: e["offset"]):
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if offset < end:
            raise SerializationError(
                f"Parameter {entry['owner']}.{entry['name']} overlaps the previous tensor"
            )
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if nbytes != count * BLOB_DTYPE.itemsize or offset + nbytes > len(blob):
            raise SerializationError(
                f"Parameter {entry['owner']}.{entry['name']} does not fit its byte range"
            )
        end = offset + nbytes
    for entry in header["params"]:
        offset = int(entry["offset"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        values = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=offset)
        params.append(
            ParamTensor(
                entry["owner"],
                entry["name"],
                values.reshape(entry["shape"]),
                fixed=bool(entry["fixed"]),
                spatial=bool(entry["spatial"]),
                buffer=bool(entry.get("buffer", False)),
            )
        )

    net = NetworkGraph(
        nodes=nodes,
        edges=[tuple(e) for e in header["edges"]],
        inputs=header["inputs"],
        outputs=header["outputs"],
        params=params,
        meta=header.get("meta", {}),
    )
    return validate_graph(net) if validate else net


def network_paths(path: PathLike) -> Tuple[Path, Path]:
    """``(descriptor, blob)`` paths for a stem or either file of the pair."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (DESCRIPTOR_SUFFIX, BLOB_SUFFIX) else path
    return stem.with_name(stem.name + DESCRIPTOR_SUFFIX), stem.with_name(stem.name + BLOB_SUFFIX)


def save_network(net: NetworkGraph, path: PathLike) -> Tuple[Path, Path]:
    descriptor_path, blob_path = network_paths(path)
    descriptor_path.parent.mkdir(parents=True, exist_ok=True)
    descriptor, blob = serialize(net)
    descriptor_path.write_text(descriptor, encoding="utf-8")
    blob_path.write_bytes(blob)
    logger.info(f"Wrote {descriptor_path} and {blob_path} ({len(blob)} bytes)")
    return descriptor_path, blob_path


def load_network(path: PathLike) -> NetworkGraph:
    """Load the ``.nfg``/``.nfw`` pair at ``path`` (stem or either file)."""
    descriptor_path, blob_path = network_paths(path)
    for p in (descriptor_path, blob_path):
        if not p.exists():
            raise FileNotFoundError(f"Network file not found: {p}")
    return deserialize(descriptor_path.read_text(encoding="utf-8"), blob_path.read_bytes())


def save_filter_bank(
    kernels: np.ndarray,
    path: PathLike,
    method: str,
    seed: int,
    extra: Optional[Dict[str, Any]] = None,
) -> Tuple[Path, Path]:
    """
    Write a filter bank as a descriptor/blob pair.

    Parameters
    ----------
    kernels : np.ndarray
        ``(n, h, w)`` kernels.
    path : PathLike
        Stem (or either file) of the pair.
    method : str
        Generating method, recorded in the descriptor.
    seed : int
        Generating seed, recorded in the descriptor.
    extra : dict, optional
        Additional descriptor fields.
    """
    descriptor_path, blob_path = network_paths(path)
    descriptor_path.parent.mkdir(parents=True, exist_ok=True)
    blob = np.ascontiguousarray(kernels, dtype=BLOB_DTYPE).tobytes()
    descriptor = {
        "format": FILTER_BANK_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "seed": int(seed),
        "shape": list(np.shape(kernels)),
        **_to_json(extra or {}),
        "blob": {"nbytes": len(blob), "crc32": zlib.crc32(blob)},
    }
    descriptor_path.write_text(_dumps(descriptor), encoding="utf-8")
    blob_path.write_bytes(blob)
    return descriptor_path, blob_path


def load_filter_bank(path: PathLike) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Return ``(kernels, descriptor)`` of a filter bank written by :func:`save_filter_bank`."""
    descriptor_path, blob_path = network_paths(path)
    header = _load_descriptor(descriptor_path.read_text(encoding="utf-8"), FILTER_BANK_FORMAT)
    blob = blob_path.read_bytes()
    _check_blob(header, blob)
    kernels = np.frombuffer(blob, dtype=BLOB_DTYPE).astype(np.float32).reshape(header["shape"])
    return kernels, header
