"""SASRCKPT container: magic, version, JSON header, raw little-endian float32 arrays.

Layout::

    b"SASRCKPT" | u32 version | u32 header_len | header (UTF-8 JSON) | arrays

The header's ``arrays`` manifest lists name, shape and byte offset (relative
to the start of the array section) in storage order.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SASRCKPT"
VERSION = 1


def write_checkpoint(path, kind, config, arrays, seed=0, epoch=0, extra=None):
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {"kind": kind, "config": config, "arrays": manifest, "seed": int(seed), "epoch": int(epoch)}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_checkpoint(path):
    """Returns (header, {name: float32 array})."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a SASRCKPT checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype="<f4", count=count, offset=base + entry["offset"]).reshape(shape).copy()
    return header, arrays


def load_model(path):
    """Rebuild a model object (SASRec, FMC or PopRec) from a checkpoint."""
    from .baselines import FMC, PopRec
    from .model import SASRec

    header, arrays = read_checkpoint(path)
    kinds = {"sasrec": SASRec, "fmc": FMC, "poprec": PopRec}
    if header["kind"] not in kinds:
        raise DataError(f"{path}: unknown model kind {header['kind']!r}")
    return kinds[header["kind"]].from_checkpoint(header["config"], arrays), header
