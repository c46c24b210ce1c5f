"""VPAR1 container: named float64 blocks with an ASCII header.

Layout mirrors the volume format: magic line, a block count, one declaration
line per block, a ``data`` marker, then the concatenated little-endian
float64 payloads in declaration order.

    VPAR1
    count N
    block <name> <ndim> <d0> <d1> ...
    ...
    data
    <payload>
"""

from __future__ import annotations

import os
from collections import OrderedDict

import numpy as np

MAGIC = b"VPAR1"


class ParamFormatError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def save_params(blocks: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]",
                path: str | os.PathLike) -> None:
    """Write named arrays in insertion order; names must be whitespace-free."""
    lines = [b"VPAR1\n", f"count {len(blocks)}\n".encode()]
    payloads = []
    for name, arr in blocks.items():
        if any(ch.isspace() for ch in name):
            raise ParamFormatError("block", f"name {name!r} contains whitespace")
        a = np.asarray(arr, dtype="<f8")
        dims = " ".join(str(d) for d in a.shape)
        lines.append(f"block {name} {a.ndim}{' ' + dims if dims else ''}\n".encode())
        payloads.append(np.ascontiguousarray(a).tobytes())
    lines.append(b"data\n")
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.writelines(lines)
            for p in payloads:
                f.write(p)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_params(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC + b"\n"):
        raise ParamFormatError("magic", f"file does not begin with {MAGIC.decode()}")
    marker = b"\ndata\n"
    cut = blob.find(marker)
    if cut < 0:
        raise ParamFormatError("data", "missing 'data' marker")
    header = blob[:cut].split(b"\n")
    payload = blob[cut + len(marker):]

    try:
        count = int(header[1].decode().split()[1])
    except (IndexError, ValueError):
        raise ParamFormatError("count", "malformed count line")
    decls = header[2:]
    if len(decls) != count:
        raise ParamFormatError("count", f"declared {count} blocks, found {len(decls)} declarations")

    blocks: OrderedDict[str, np.ndarray] = OrderedDict()
    offset = 0
    for line in decls:
        parts = line.decode("ascii", errors="replace").split()
        if len(parts) < 3 or parts[0] != "block":
            raise ParamFormatError("block", f"malformed declaration {line!r}")
        name = parts[1]
        try:
            ndim = int(parts[2])
            shape = tuple(int(x) for x in parts[3 : 3 + ndim])
            if len(shape) != ndim:
                raise ValueError
        except ValueError:
            raise ParamFormatError("block", f"malformed shape in {line!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if ndim else 8
        if offset + nbytes > len(payload):
            raise ParamFormatError("data", f"payload truncated at block {name!r}")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8")
        blocks[name] = arr.reshape(shape).copy() if ndim else np.float64(arr[0])
        offset += nbytes
    if offset != len(payload):
        raise ParamFormatError("data", f"{len(payload) - offset} trailing payload bytes")
    return blocks
