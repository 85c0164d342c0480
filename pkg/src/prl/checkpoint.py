"""Checkpoint container for named float64 arrays.

Layout::

    b"PRLCKPT1\\n"
    header length, 8-byte little-endian unsigned
    header, UTF-8 JSON: {"arrays": [{"name", "shape", "offset"}, ...],
                         "config": {...}, "seed": int, "n_items": int,
                         "adam": {"step", "lr", "beta1", "beta2", "eps"}, "meta": {...}}
    payload, little-endian IEEE-754 float64 values; offsets count bytes from payload start

Adam moments are stored as arrays named ``adam.m.<param>`` and ``adam.v.<param>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from prl.autodiff import AdamState

MAGIC = b"PRLCKPT1\n"


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray], header: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({**header, "arrays": entries}, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a PRL checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + n].decode("utf-8"))
    payload = memoryview(blob)[pos + n:]
    arrays = {}
    for e in header.pop("arrays"):
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, header


def save_checkpoint(path: str | Path, model, adam: AdamState | None = None,
                    meta: dict | None = None) -> None:
    from prl.model import config_dict

    arrays = {k: p.data for k, p in model.params.items()}
    header = {
        "config": config_dict(model.config),
        "seed": model.config.seed,
        "n_items": model.n_items,
        "meta": meta or {},
    }
    if adam is not None:
        header["adam"] = {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1,
                          "beta2": adam.beta2, "eps": adam.eps}
        for k in model.params:
            if k in adam.m:
                arrays[f"adam.m.{k}"] = adam.m[k]
                arrays[f"adam.v.{k}"] = adam.v[k]
    write_arrays(path, arrays, header)


def load_checkpoint(path: str | Path):
    """Return ``(model, adam_state_or_None, header)``."""
    from prl.model import PRLModel, TrainConfig

    arrays, header = read_arrays(path)
    config = TrainConfig(**header["config"])
    model = PRLModel(header["n_items"], config)
    model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    adam = None
    if "adam" in header:
        a = header["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                         step=a["step"])
        for k in model.params:
            if f"adam.m.{k}" in arrays:
                adam.m[k] = arrays[f"adam.m.{k}"]
                adam.v[k] = arrays[f"adam.v.{k}"]
    return model, adam, header
