"""Model checkpoints.

Layout: ``b"RBCK"`` | u32 little-endian header length | UTF-8 JSON header |
float64 little-endian parameter blob. The header records the architecture,
head metadata and the name and shape of every array in blob order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .baselines import SoftmaxHead
from .errors import CheckpointError
from .model import Model
from .numeric import Network
from .rbf import RbfHead

MAGIC = b"RBCK"
FORMAT_VERSION = 1


def _arrays(model: Model):
    return list(model.named_parameters()) + list(model.head.extra_arrays())


def dumps_checkpoint(model: Model, meta: dict | None = None) -> bytes:
    arrays = _arrays(model)
    header = {
        "format": FORMAT_VERSION,
        "backbone": model.backbone.describe(),
        "head": model.head.describe(),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "parameter_count": int(sum(a.size for _, a in arrays)),
        "meta": meta or {},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<I", len(text)) + text + blob


def loads_checkpoint(buf: bytes):
    """Inverse of :func:`dumps_checkpoint`; returns ``(model, meta)``."""
    if len(buf) < 8:
        raise CheckpointError("checkpoint truncated")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise CheckpointError("checkpoint header truncated")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')}")
    blob = buf[8 + hlen :]
    count = header["parameter_count"]
    if len(blob) != 8 * count:
        raise CheckpointError(f"blob holds {len(blob) // 8} values, header declares {count}")
    values = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    pos = 0
    for name, shape in header["arrays"]:
        size = int(np.prod(shape))
        arrays[name] = values[pos : pos + size].reshape(shape).astype(np.float64)
        pos += size
    if pos != count:
        raise CheckpointError("array shapes do not add up to the declared parameter count")

    backbone = Network.from_description(header["backbone"])
    for name, arr in arrays.items():
        if name.startswith("backbone."):
            _, idx, pname = name.split(".", 2)
            backbone.params[int(idx)][pname] = arr
    head_desc = header["head"]
    if head_desc["kind"] == "rbf":
        head = RbfHead(
            arrays["head.prototypes"],
            lam=head_desc["lam"],
            p=head_desc["p"],
            projection=arrays.get("head.projection"),
            offset=arrays.get("head.offset"),
        )
    elif head_desc["kind"] == "softmax":
        head = SoftmaxHead(arrays["head.weight"], arrays["head.bias"])
    else:
        raise CheckpointError(f"unknown head kind {head_desc['kind']!r}")
    return Model(backbone, head), header.get("meta", {})


def save_checkpoint(path, model: Model, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(model, meta))


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())
