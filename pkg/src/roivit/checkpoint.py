"""Single-file tensor container: text manifest followed by a raw blob.

Layout (all header lines UTF-8, terminated by ``END``)::

    ROIVIT1
    meta <key>\\t<value>
    tensor <name> <f32|f64> <d0,d1,...> <offset> <nbytes>
    ...
    END
    <little-endian raw data>

Offsets are relative to the first byte after the ``END`` line. Round trips
are bitwise faithful. Used for model checkpoints and cached ROI maps.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

_MAGIC = b"ROIVIT1"
_DTYPE_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_CODE_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_blob(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [_MAGIC.decode()]
    for key, value in (meta or {}).items():
        if "\n" in key or "\t" in key or "\n" in str(value):
            raise FormatError(f"meta entry {key!r} contains tab/newline")
        header.append(f"meta {key}\t{value}")
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if " " in name or "\n" in name:
            raise FormatError(f"tensor name {name!r} contains whitespace")
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(f"<{arr.dtype.kind}{arr.dtype.itemsize}", copy=False).tobytes()
        dims = ",".join(str(d) for d in arr.shape) if arr.ndim else "-"
        header.append(f"tensor {name} {code} {dims} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    header.append("END\n")
    with open(path, "wb") as f:
        f.write("\n".join(header).encode("utf-8"))
        for raw in chunks:
            f.write(raw)


def load_blob(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    if not payload.startswith(_MAGIC):
        raise FormatError(f"{path}: not a roivit container")
    end_marker = payload.find(b"\nEND\n")
    if end_marker < 0:
        raise FormatError(f"{path}: manifest END marker missing")
    manifest = payload[: end_marker + 1].decode("utf-8").splitlines()[1:]
    blob = payload[end_marker + len(b"\nEND\n") :]

    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in manifest:
        if line.startswith("meta "):
            body = line[len("meta ") :]
            if "\t" not in body:
                raise FormatError(f"{path}: malformed meta line {line!r}")
            key, value = body.split("\t", 1)
            meta[key] = value
        elif line.startswith("tensor "):
            try:
                _, name, code, dims, offset_s, nbytes_s = line.split(" ")
                offset, nbytes = int(offset_s), int(nbytes_s)
                dtype = _CODE_DTYPES[code]
                shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            except (ValueError, KeyError) as e:
                raise FormatError(f"{path}: malformed tensor line {line!r}") from e
            raw = blob[offset : offset + nbytes]
            if len(raw) != nbytes:
                raise FormatError(f"{path}: blob truncated for tensor {name}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
            tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        else:
            raise FormatError(f"{path}: unrecognized manifest line {line!r}")
    return tensors, meta
