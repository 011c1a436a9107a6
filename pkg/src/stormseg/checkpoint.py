"""Model checkpoints: a JSON manifest plus one float64 CGT1 file per tensor.

::

    <dir>/checkpoint.json
        {"format": "stormseg-checkpoint", "format_version": 1,
         "model_config": {...ModelConfig fields...},
         "tensors": [{"name": "stem.0.conv.weight", "kind": "param",
                      "file": "tensors/stem.0.conv.weight.cgt"}, ...],
         "meta": {...}}
    <dir>/tensors/<name>.cgt
"""
from __future__ import annotations

import json
from pathlib import Path

from .climate_data.tensorfile import atomic_write_bytes, read_tensor_file, write_tensor_file
from .model import ModelConfig, ModelParams
from .tensor import Tensor

FORMAT_NAME = "stormseg-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, meta: dict | None = None) -> None:
    root = Path(path)
    entries = []
    for kind, items in (("param", ((k, v.data) for k, v in params.params.items())),
                        ("buffer", params.buffers.items())):
        for name, arr in items:
            rel = f"tensors/{name}.cgt"
            write_tensor_file(arr.astype("float64", copy=False), root / rel)
            entries.append({"name": name, "kind": kind, "file": rel})
    doc = {"format": FORMAT_NAME, "format_version": FORMAT_VERSION,
           "model_config": cfg.to_dict(), "tensors": entries, "meta": meta or {}}
    atomic_write_bytes(root / "checkpoint.json",
                       (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    root = Path(path)
    doc_path = root / "checkpoint.json"
    if not doc_path.is_file():
        raise FileNotFoundError(f"no checkpoint.json in {root}")
    try:
        doc = json.loads(doc_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt checkpoint manifest {doc_path}: {exc}") from None
    if doc.get("format") != FORMAT_NAME or doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{doc_path} is not a version-{FORMAT_VERSION} {FORMAT_NAME}")
    cfg = ModelConfig.from_dict(doc["model_config"])
    params, buffers = {}, {}
    for e in doc["tensors"]:
        arr = read_tensor_file(root / e["file"])
        if e["kind"] == "param":
            params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
        else:
            buffers[e["name"]] = arr
    return ModelParams(params, buffers), cfg, doc.get("meta", {})
