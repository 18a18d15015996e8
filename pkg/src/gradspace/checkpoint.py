"""Single-file JSON checkpoints with base64 little-endian float64 weights."""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
from pathlib import Path

import numpy as np

from gradspace.errors import CheckpointError
from gradspace.imageio import atomic_write_text
from gradspace.models import SaeModel, VaeModel
from gradspace.training import ZcaTransform

FORMAT_VERSION = 1


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(entry: dict, field: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        raw = base64.b64decode(entry["data"], validate=True)
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        raise CheckpointError(f"{field}: cannot decode array ({exc})") from None
    if len(raw) != 8 * int(np.prod(shape)):
        raise CheckpointError(f"{field}: {len(raw)} bytes do not match shape {list(shape)}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _digest(weights: list[dict], zca: dict | None) -> str:
    h = hashlib.sha256()
    for w in weights:
        h.update(w["name"].encode())
        h.update(w["data"].encode())
    if zca is not None:
        for key in ("mean", "whitening_matrix"):
            h.update(zca[key]["data"].encode())
    return h.hexdigest()


def checkpoint_document(model, zca: ZcaTransform | None = None, metadata: dict | None = None) -> dict:
    if isinstance(model, SaeModel):
        arch = {"dims": {"d_x": model.d_x, "d_z": model.d_z},
                "activations": {"hidden": "sigmoid", "output": "linear"}}
        hyper = {"beta": float(model.beta), "lam": float(model.lam)}
    elif isinstance(model, VaeModel):
        arch = {"dims": {"d_x": model.d_x, "d_h": model.d_h, "d_z": model.d_z},
                "activations": {"hidden": "sigmoid", "heads": "linear", "output": "sigmoid"}}
        hyper = {"logvar_clamp": float(model.logvar_clamp)}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    weights = [{"name": k, **_encode(v)} for k, v in model.params.items()]
    zca_doc = None
    if zca is not None:
        zca_doc = {"epsilon": float(zca.epsilon), "mean": _encode(zca.mean),
                   "whitening_matrix": _encode(zca.whitening_matrix)}
    return {
        "format_version": FORMAT_VERSION,
        "model_family": model.family,
        "architecture": arch,
        "hyperparameters": hyper,
        "metadata": metadata or {},
        "zca": zca_doc,
        "weights": weights,
        "checksum": _digest(weights, zca_doc),
    }


def dumps_checkpoint(model, zca=None, metadata=None) -> str:
    return json.dumps(checkpoint_document(model, zca, metadata), indent=1) + "\n"


def save_checkpoint(model, path, zca: ZcaTransform | None = None, metadata: dict | None = None) -> None:
    atomic_write_text(path, dumps_checkpoint(model, zca, metadata))


def loads_checkpoint(text: str):
    """Parse a checkpoint; returns ``(model, zca_or_None, metadata)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"format_version: unsupported checkpoint version {version!r} (supported: {FORMAT_VERSION})")
    family = doc.get("model_family")
    cls = {"sae": SaeModel, "vae": VaeModel}.get(family)
    if cls is None:
        raise CheckpointError(f"model_family: unknown family {family!r}")
    weights = doc.get("weights")
    if not isinstance(weights, list):
        raise CheckpointError("weights: missing or not a list")
    zca_doc = doc.get("zca")
    if doc.get("checksum") != _digest(weights, zca_doc):
        raise CheckpointError("checksum: weight data does not match the stored checksum")

    params = {}
    for i, entry in enumerate(weights):
        name = entry.get("name")
        if name not in cls.param_names():
            raise CheckpointError(f"weights[{i}].name: unknown parameter {name!r} for {family}")
        params[name] = _decode(entry, f"weights[{i}] ({name})")
    missing = [k for k in cls.param_names() if k not in params]
    if missing:
        raise CheckpointError(f"weights: missing parameters {missing}")
    hyper = doc.get("hyperparameters") or {}
    try:
        if cls is SaeModel:
            model = SaeModel(**params, beta=hyper["beta"], lam=hyper["lam"])
        else:
            model = VaeModel(**params, logvar_clamp=hyper.get("logvar_clamp", 10.0))
    except KeyError as exc:
        raise CheckpointError(f"hyperparameters: missing {exc}") from None
    except ValueError as exc:
        raise CheckpointError(f"weights: inconsistent shapes ({exc})") from None
    dims = doc.get("architecture", {}).get("dims", {})
    for key, value in dims.items():
        if getattr(model, key, value) != value:
            raise CheckpointError(f"architecture.dims.{key}: {value} disagrees with weights")

    zca = None
    if zca_doc is not None:
        zca = ZcaTransform(_decode(zca_doc["mean"], "zca.mean"),
                           _decode(zca_doc["whitening_matrix"], "zca.whitening_matrix"),
                           float(zca_doc["epsilon"]))
        if zca.dim != model.d_x and family == "sae":
            raise CheckpointError(f"zca: dimension {zca.dim} does not match d_x={model.d_x}")
    return model, zca, doc.get("metadata") or {}


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"))
