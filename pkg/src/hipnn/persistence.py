"""Checkpoint files: versioned, checksummed JSON with base64 float64 tensors.

Layout (version 1)::

    {"format_version": 1,
     "sha256": <hex digest of the canonical payload>,
     "payload": {
        "hyper": {...}, "sigma_E": float, "units": {...},
        "tensors": [{"name", "shape", "learnable", "data"}, ...],
        "optimizer": null | {"step", "m": [...], "v": [...]},
        "history_cursor": null | {...}}}

``data`` is the little-endian IEEE-754 float64 buffer of the tensor in C
order, base64 encoded. The canonical payload encoding is JSON with sorted
keys and no whitespace; the whole file is written the same way, so loading
and re-saving a checkpoint reproduces it byte for byte.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import SpeciesTable
from .model import HyperParameters, ModelParameters
from .trainer import AdamState

FORMAT_VERSION = 1
UNITS = {"length": "bohr", "energy": "kcal/mol", "sensitivity_parameters": "inverse bohr"}


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    def __init__(self, tensor: str, message: str):
        super().__init__(f"tensor {tensor!r}: {message}")
        self.tensor = tensor


@dataclass
class Checkpoint:
    params: ModelParameters
    optimizer: AdamState | None = None
    history_cursor: dict | None = None

    @property
    def hyper(self) -> HyperParameters:
        return self.params.hyper

    @property
    def sigma_E(self) -> float:
        return self.params.sigma_E


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(name: str, data: str, shape) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise ShapeError(name, f"declared shape {list(shape)} needs {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _tensor_list(arrays: dict, learnable=None) -> list[dict]:
    out = []
    for name, arr in arrays.items():
        entry = {"name": name, "shape": list(arr.shape), "data": _encode(arr)}
        if learnable is not None:
            entry["learnable"] = name in learnable
        out.append(entry)
    return out


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def _hyper_dict(h: HyperParameters) -> dict:
    d = asdict(h)
    d["species"] = list(h.species.entries)
    return d


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    params = ckpt.params
    payload = {
        "hyper": _hyper_dict(params.hyper),
        "sigma_E": float(params.sigma_E),
        "units": UNITS,
        "tensors": _tensor_list(params.tensors, params.learnable),
        "optimizer": None if ckpt.optimizer is None else {
            "step": ckpt.optimizer.step,
            "m": _tensor_list(ckpt.optimizer.m),
            "v": _tensor_list(ckpt.optimizer.v),
        },
        "history_cursor": ckpt.history_cursor,
    }
    digest = hashlib.sha256(_canonical(payload)).hexdigest()
    return _canonical({"format_version": FORMAT_VERSION, "sha256": digest, "payload": payload}) + b"\n"


def save_checkpoint(ckpt: Checkpoint, destination: str | os.PathLike) -> None:
    data = checkpoint_bytes(ckpt)
    path = Path(destination)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"could not write checkpoint to {path}: {exc}") from exc


def _read_tensors(entries, expected: dict | None = None) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        name = e["name"]
        shape = tuple(e["shape"])
        if expected is not None:
            if name not in expected:
                raise ShapeError(name, "not a tensor of this architecture")
            if shape != expected[name]:
                raise ShapeError(name, f"shape {list(shape)} does not match architecture {list(expected[name])}")
        out[name] = _decode(name, e["data"], shape)
    return out


def load_checkpoint(source: str | os.PathLike) -> Checkpoint:
    raw = Path(source).read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
        version = doc["format_version"]
        payload = doc["payload"]
        digest = doc["sha256"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise ChecksumError(f"{source}: truncated or corrupt checkpoint ({exc})") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{source}: checkpoint format {version} unsupported (expected {FORMAT_VERSION})")

    try:
        hd = dict(payload["hyper"])
        hd["species"] = SpeciesTable(tuple(hd["species"]))
        hyper = HyperParameters(**hd)
        expected = {name: shape for name, shape, _ in hyper.tensor_specs()}
        tensors = _read_tensors(payload["tensors"], expected)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: malformed payload ({exc})") from None
    missing = set(expected) - set(tensors)
    if missing:
        raise ShapeError(sorted(missing)[0], "missing from checkpoint")
    if hashlib.sha256(_canonical(payload)).hexdigest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch")

    learnable = frozenset(e["name"] for e in payload["tensors"] if e.get("learnable"))
    ordered = {name: tensors[name] for name in expected}
    params = ModelParameters(hyper, ordered, float(payload["sigma_E"]), learnable)

    optimizer = None
    if payload.get("optimizer") is not None:
        o = payload["optimizer"]
        optimizer = AdamState(int(o["step"]), _read_tensors(o["m"]), _read_tensors(o["v"]))
    return Checkpoint(params, optimizer, payload.get("history_cursor"))
