"""Shared checkpoint container: a .npz holding a JSON meta record plus the
flat weight arrays.  Round trips are bit-exact; the version field is
mandatory and checked on load."""

import json

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, kind, meta, arrays):
    """Write `arrays` (name -> float64 ndarray) with a JSON meta block."""
    record = {"version": FORMAT_VERSION, "kind": kind, "meta": meta}
    payload = {"__meta__": np.frombuffer(
        json.dumps(record).encode("utf-8"), dtype=np.uint8)}
    for name, arr in arrays.items():
        payload["w__" + name] = np.asarray(arr, dtype=np.float64)
    np.savez(path, **payload)


def load_checkpoint(path, expect_kind=None):
    with np.load(path) as data:
        record = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if record.get("version") != FORMAT_VERSION:
            raise ValueError(
                f"checkpoint {path}: unsupported version {record.get('version')}")
        if expect_kind is not None and record["kind"] != expect_kind:
            raise ValueError(
                f"checkpoint {path}: kind {record['kind']!r}, "
                f"expected {expect_kind!r}")
        arrays = {k[3:]: data[k].copy() for k in data.files
                  if k.startswith("w__")}
    return record["kind"], record["meta"], arrays
