import json
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Tuple, Union
import numpy as np
from bppo.base.exceptions import CheckpointException, ConfigurationException
from bppo.base.helpers import canonical_json
from bppo.policy.params import PolicyConfig, PolicyParams

CHECKPOINT_FORMAT = "bppo-checkpoint"
CHECKPOINT_VERSION = 1
ARTIFACT_VERSION = 1


def save_checkpoint(
    path: Union[str, Path],
    params: PolicyParams,
    metadata: Union[Mapping[str, Any], None] = None
) -> None:
    """
    Write a checkpoint: one line of JSON header (format, version, policy
    config, tensor directory with shapes and byte offsets, metadata)
    followed by the raw little-endian float64 payloads in parameter order.
    """

    directory = []
    payloads = []
    offset = 0

    for name in params.names:
        raw = np.ascontiguousarray(params.tensors[name].data, dtype="<f8").tobytes()
        directory.append(dict(
            name=name,
            shape=list(params.tensors[name].shape),
            offset=offset,
            nbytes=len(raw)
        ))
        payloads.append(raw)
        offset += len(raw)

    header = dict(
        format=CHECKPOINT_FORMAT,
        version=CHECKPOINT_VERSION,
        config=params.config.to_dict(),
        tensors=directory,
        metadata=dict(metadata or {})
    )

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "wb") as handle:
        handle.write(canonical_json(header).encode() + b"\n")
        for raw in payloads:
            handle.write(raw)


def load_checkpoint(path: Union[str, Path]) -> Tuple[PolicyParams, Dict[str, Any]]:
    """Read a checkpoint written by save_checkpoint()."""

    path = Path(path)
    if not path.exists():
        raise CheckpointException(f"Checkpoint not found: {path}")

    with open(path, "rb") as handle:
        header_line = handle.readline()
        payload = handle.read()

    try:
        header = json.loads(header_line.decode())
    except Exception as e:
        raise CheckpointException(f"Could not parse checkpoint header {path} ({str(e)})")

    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointException(f"Not a checkpoint file: {path}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointException(f"Unsupported checkpoint version {header.get('version')}")

    try:
        config = PolicyConfig.from_dict(header["config"])
    except ConfigurationException as e:
        raise CheckpointException(f"Invalid policy config in {path} ({str(e)})")

    arrays = {}
    for entry in header["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise CheckpointException(f"Truncated checkpoint payload: {path}")
        arrays[entry["name"]] = np.frombuffer(
            payload[start:stop], dtype="<f8"
        ).reshape(entry["shape"]).astype(np.float64)

    try:
        params = PolicyParams.from_arrays(config, arrays)
    except ConfigurationException as e:
        raise CheckpointException(f"Checkpoint does not match its config ({str(e)})")

    return params, header.get("metadata", {})


def read_json(path: Union[str, Path]) -> dict:
    """Read a JSON config file."""

    path = Path(path)
    if not path.exists():
        raise ConfigurationException(f"Config file not found: {path}")

    try:
        with open(path, "r") as handle:
            values = json.load(handle)
    except json.JSONDecodeError as e:
        raise ConfigurationException(f"Could not parse {path} ({str(e)})")

    if not isinstance(values, dict):
        raise ConfigurationException(f"Config file must hold a JSON object: {path}")

    return values


def write_json(path: Union[str, Path], values: Any) -> None:
    """Write JSON with sorted keys, so that reruns are byte-identical."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        handle.write(canonical_json(values) + "\n")


def append_jsonl(path: Union[str, Path], record: Mapping[str, Any]) -> None:
    """Append one record to a line-delimited JSON log."""

    with open(path, "a") as handle:
        handle.write(canonical_json(dict(record)) + "\n")


def write_lines(path: Union[str, Path], lines: Iterable[str]) -> None:

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        for line in lines:
            handle.write(line + "\n")
