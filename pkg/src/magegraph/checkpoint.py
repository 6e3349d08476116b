"""Binary checkpoint container.

Layout::

    MAGEGRAPH-CKPT format_version=1\\n
    <one line of JSON: model config, metadata, tensor names and shapes>\\n
    <little-endian float64 payload, tensors in header order>

Writes go to a temporary file in the target directory and are renamed into
place, so a crash never leaves a partial checkpoint behind.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from magegraph.errors import DataError
from magegraph.model import ModelConfig, param_shapes

MAGIC = b"MAGEGRAPH-CKPT format_version=1\n"


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(config: ModelConfig, params: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    names = list(param_shapes(config))
    header = {
        "model_config": config.to_dict(),
        "metadata": metadata or {},
        "tensors": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
    }
    body = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    return MAGIC + json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + body


def loads(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC):
        raise DataError("not a magegraph checkpoint (bad magic line)")
    rest = blob[len(MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = memoryview(rest[nl + 1:])
    config = ModelConfig(**header["model_config"])
    expected = param_shapes(config)
    total = sum(int(np.prod(s["shape"])) * 8 for s in header["tensors"])
    if total != len(body):
        raise DataError(f"checkpoint payload holds {len(body)} bytes, header describes {total}")
    params, offset = {}, 0
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        if expected.get(spec["name"]) != shape:
            raise DataError(f"checkpoint tensor {spec['name']} has shape {shape}, config implies {expected.get(spec['name'])}")
        n = int(np.prod(shape)) * 8
        params[spec["name"]] = np.frombuffer(body[offset:offset + n], dtype="<f8").astype(np.float64).reshape(shape)
        offset += n
    return config, params, header["metadata"]


def save(path, config: ModelConfig, params: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    atomic_write(path, dumps(config, params, metadata))


def load(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def checkpoint_name(horizon: int, seed: int) -> str:
    return f"model_h{horizon}_s{seed}.ckpt"
