"""Checkpoint files: a torch-serialized tensor blob plus a JSON sidecar
{format_version, kind, spec, seed, epoch, metrics, sha256, saved_at}.

Both files are written atomically. Loading verifies version and checksum
before anything is deserialized into live objects.
"""
from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
import hashlib
import io
import json
import os

import torch
import torch.nn as nn

from .classifier import ConvNet, build_model
from .config import logger
from .errors import CheckpointError, SpecError
from .models import ConvNetSpec

FORMAT_VERSION = 1

PathLike = Union[str, Path]


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def module_checksum(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, keyed by name."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def serialize(blob: Dict[str, Any]) -> bytes:
    buf = io.BytesIO()
    torch.save(blob, buf)
    return buf.getvalue()


def write_checkpoint(
    path: PathLike,
    blob: Dict[str, Any],
    *,
    kind: str,
    spec: Dict[str, Any],
    seed: int,
    epoch: int,
    metrics: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    payload = serialize(blob)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "spec": spec,
        "seed": seed,
        "epoch": epoch,
        "metrics": metrics or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
        "saved_at": datetime.now(timezone.utc).isoformat(),
    }
    _atomic_write(path, payload)
    _atomic_write(sidecar_path(path), json.dumps(sidecar, indent=2, sort_keys=True).encode("utf-8"))
    logger.info(f"Saved {kind} checkpoint epoch={epoch} to {path}")
    return path


def read_checkpoint(path: PathLike, kind: str) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Return (blob, sidecar) after validating both files; raises CheckpointError otherwise."""
    path = Path(path)
    meta_path = sidecar_path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    if not meta_path.exists():
        raise CheckpointError(f"checkpoint sidecar not found: {meta_path}")
    try:
        sidecar = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable sidecar {meta_path}: {e}") from e
    if sidecar.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"format version {sidecar.get('format_version')!r} in {path}, expected {FORMAT_VERSION}"
        )
    if sidecar.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {sidecar.get('kind')!r} checkpoint, expected {kind!r}")
    payload = path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != sidecar.get("sha256"):
        raise CheckpointError(f"checksum mismatch for {path}")
    try:
        blob = torch.load(io.BytesIO(payload), weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot deserialize {path}: {e}") from e
    return blob, sidecar


# Classifiers
def save_classifier(
    model: ConvNet,
    path: PathLike,
    seed: int,
    epoch: int = 0,
    metrics: Optional[Dict[str, Any]] = None,
) -> Path:
    blob = {"model": {k: v.detach().cpu() for k, v in model.state_dict().items()}}
    return write_checkpoint(
        path, blob, kind="classifier", spec=model.spec.model_dump(), seed=seed, epoch=epoch, metrics=metrics
    )


def load_classifier(path: PathLike) -> Tuple[ConvNet, Dict[str, Any]]:
    blob, sidecar = read_checkpoint(path, "classifier")
    try:
        spec = ConvNetSpec(**sidecar["spec"])
        model = build_model(spec, int(sidecar.get("seed", 0)))
        model.load_state_dict(blob["model"])
    except (KeyError, RuntimeError, SpecError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} does not match its spec: {e}") from e
    model.eval()
    return model, sidecar
