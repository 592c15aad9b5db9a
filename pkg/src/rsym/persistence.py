"""File formats: ``.rsym`` models, ``.rsds`` datasets, JSON/CSV reports.

Model files are a JSON manifest. Each tensor payload is the base64 encoding
of its little-endian float64 values in row-major order, so a save/load round
trip is bit-exact and equal models always serialise to identical bytes.
"""

from __future__ import annotations

import base64
import binascii
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .analysis import LossCurve
from .errors import ConfigError, FormatError, IntegrityError, ValidationError
from .matching import MatchReport
from .model import SyntheticDataset, TransformerConfig, TransformerModel, from_tensors, named_tensors, tensor_shapes

MODEL_MAGIC = "RSYM1"
DATASET_MAGIC = "RSDS1"
FORMAT_VERSION = 1


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=1, allow_nan=False) + "\n").encode("utf-8")


def _read_manifest(path, magic: str) -> dict:
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        head = raw[:5].decode("ascii", errors="replace")
        if raw.startswith(b"{"):
            raise IntegrityError(f"{path}: truncated or corrupt manifest ({exc})") from exc
        raise FormatError(f"{path}: not a {magic} file (starts with {head!r})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest is not an object")
    found = doc.get("magic")
    if found != magic:
        raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version!r}")
    return doc


def encode_model(model: TransformerModel) -> bytes:
    tensors = [
        {
            "name": name,
            "shape": list(arr.shape),
            "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
        }
        for name, arr in named_tensors(model)
    ]
    return _dumps({"magic": MODEL_MAGIC, "version": FORMAT_VERSION, "config": model.config.to_dict(), "tensors": tensors})


def save_model(model: TransformerModel, path) -> None:
    atomic_write(path, encode_model(model))


def load_model(path) -> TransformerModel:
    doc = _read_manifest(path, MODEL_MAGIC)
    try:
        config = TransformerConfig.from_dict(doc["config"])
        entries = doc["tensors"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise IntegrityError(f"{path}: invalid config section ({exc})") from exc
    expected = tensor_shapes(config)
    if not isinstance(entries, list) or len(entries) != len(expected):
        raise IntegrityError(f"{path}: expected {len(expected)} tensors")
    tensors = {}
    for entry, (name, shape) in zip(entries, expected):
        try:
            got_name, got_shape, payload = entry["name"], tuple(entry["shape"]), entry["data"]
            raw = base64.b64decode(payload, validate=True)
        except (KeyError, TypeError, binascii.Error) as exc:
            raise IntegrityError(f"{path}: malformed tensor entry ({exc})") from exc
        if got_name != name:
            raise IntegrityError(f"{path}: tensor {got_name!r} found where {name!r} was expected")
        if got_shape != shape:
            raise IntegrityError(f"{path}: tensor {name} has shape {got_shape}, config implies {shape}")
        if len(raw) != 8 * math.prod(shape):
            raise IntegrityError(f"{path}: tensor {name} payload has {len(raw)} bytes, expected {8 * math.prod(shape)}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{path}: tensor {name} contains non-finite values")
        tensors[name] = arr
    return from_tensors(config, tensors)


def encode_dataset(data: SyntheticDataset) -> bytes:
    return _dumps(
        {
            "magic": DATASET_MAGIC,
            "version": FORMAT_VERSION,
            "seed": int(data.seed),
            "tokens": data.tokens.tolist(),
            "labels": data.labels.tolist(),
        }
    )


def save_dataset(data: SyntheticDataset, path) -> None:
    atomic_write(path, encode_dataset(data))


def load_dataset(path) -> SyntheticDataset:
    doc = _read_manifest(path, DATASET_MAGIC)
    try:
        tokens = np.asarray(doc["tokens"], dtype=np.int64)
        labels = np.asarray(doc["labels"], dtype=np.int64)
        seed = int(doc["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed dataset ({exc})") from exc
    if tokens.ndim != 2 or labels.ndim != 1 or tokens.shape[0] != labels.shape[0]:
        raise FormatError(f"{path}: tokens and labels have inconsistent shapes")
    return SyntheticDataset(tokens, labels, seed)


def save_report(report, path) -> None:
    """Write a :class:`MatchReport` (JSON), :class:`LossCurve` (CSV or JSON) or a plain dict (JSON)."""
    path = Path(path)
    if isinstance(report, LossCurve):
        if path.suffix == ".csv":
            atomic_write(path, report.to_csv().encode("utf-8"))
            return
        payload = {
            "alphas": report.alphas.tolist(),
            "losses": report.losses.tolist(),
            "loss_a": report.loss_a,
            "loss_b": report.loss_b,
            "barrier": report.barrier,
        }
    elif isinstance(report, MatchReport):
        payload = report.to_dict()
    elif isinstance(report, dict):
        payload = report
    else:
        raise TypeError(f"cannot serialise {type(report).__name__}")
    atomic_write(path, _dumps(payload))


def load_loss_curve(path) -> LossCurve:
    return LossCurve.from_csv(Path(path).read_text(encoding="utf-8"))
