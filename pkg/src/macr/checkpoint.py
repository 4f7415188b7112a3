"""Checkpoint files.

Layout: the magic line ``MACRCKPT1``, then one line of JSON header, then the
raw little-endian float64 arrays back to back. The header records
``rows`` (user + item embedding rows), ``dim``, ``backbone``,
``layer_count``, ``epoch``, the model/head settings, and for every array
its ``name``, ``shape``, ``offset`` and ``nbytes`` relative to the start of
the payload. Keys are sorted so identical models give identical bytes.
"""

from __future__ import annotations

import json

import numpy as np

from .backbone import BackboneKind, NormalizedAdjacency
from .model import MacrModel

MAGIC = b"MACRCKPT1\n"


def save_checkpoint(model: MacrModel, path, epoch=0, extra=None):
    arrays, offset = [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "rows": model.n_users + model.n_items,
        "n_users": model.n_users,
        "n_items": model.n_items,
        "dim": model.dim,
        "backbone": model.backbone.variant,
        "layer_count": model.backbone.n_layers,
        "epoch": epoch,
        "model": model.kind,
        "head_kind": model.head_kind,
        "use_user_branch": model.use_user_branch,
        "use_item_branch": model.use_item_branch,
        "branch_input": model.branch_input,
        "arrays": arrays,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in sorted(model.params):
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def read_header(path):
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        return json.loads(fh.readline())


def load_checkpoint(path, train=None):
    """Rebuild the model; LightGCN checkpoints need the training interactions."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        header = json.loads(fh.readline())
        payload = fh.read()
    kind = BackboneKind(header["backbone"], header["layer_count"])
    adj = None
    if kind.variant == "LightGCN":
        if train is None:
            raise ValueError("LightGCN checkpoint needs the training interactions")
        adj = NormalizedAdjacency.from_dataset(train)
    model = MacrModel(header["n_users"], header["n_items"], header["dim"], kind, header["model"],
                      header["head_kind"], adj, header["use_user_branch"], header["use_item_branch"],
                      header["branch_input"])
    params = {}
    for spec in header["arrays"]:
        buf = payload[spec["offset"]:spec["offset"] + spec["nbytes"]]
        params[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(spec["shape"]).astype(float)
    if set(params) != set(model.params):
        raise ValueError(f"checkpoint arrays {sorted(params)} do not match model {sorted(model.params)}")
    model.params = params
    model.touch()
    return model, header
