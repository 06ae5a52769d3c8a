"""Instance dataset files: one .npz holding raw arrays plus a JSON header."""

from __future__ import annotations

import json

import numpy as np

from .base import Instance

FORMAT = "antopt-dataset"
VERSION = 1

ARRAY_FIELDS = ("coords", "dist", "prizes", "penalties", "due", "proc",
                "job_w", "values", "weights", "capacities")
SCALAR_FIELDS = ("max_len", "min_prize")


class DatasetError(ValueError):
    """Malformed or unsupported dataset container."""


def save_dataset(path, instances: list[Instance]):
    records = []
    arrays = {}
    for i, inst in enumerate(instances):
        rec = {"kind": inst.kind, "n": inst.n, "seed": int(inst.seed)}
        for name in SCALAR_FIELDS:
            value = getattr(inst, name)
            if value is not None:
                rec[name] = float(value)
        records.append(rec)
        for name in ARRAY_FIELDS:
            value = getattr(inst, name)
            if value is not None:
                arrays[f"i{i}_{name}"] = value
    meta = {"format": FORMAT, "version": VERSION, "records": records}
    header = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, _meta=header, **arrays)


def load_dataset(path) -> list[Instance]:
    with np.load(path) as data:
        if "_meta" not in data:
            raise DatasetError(f"{path}: missing dataset header")
        meta = json.loads(bytes(data["_meta"]).decode())
        if meta.get("format") != FORMAT:
            raise DatasetError(f"{path}: not a dataset file")
        if meta.get("version") != VERSION:
            raise DatasetError(f"{path}: unsupported version {meta.get('version')}")
        out = []
        for i, rec in enumerate(meta["records"]):
            fields = {name: float(rec[name]) for name in SCALAR_FIELDS
                      if name in rec}
            for name in ARRAY_FIELDS:
                key = f"i{i}_{name}"
                if key in data:
                    fields[name] = data[key]
            out.append(Instance(kind=rec["kind"], n=int(rec["n"]),
                                seed=int(rec["seed"]), **fields))
    return out
