"""Bit-exact JSON checkpoints.

Layout: a single JSON object with

    format:  fixed tag and version
    config:  the run configuration echoed as plain JSON
    meta:    step/epoch counters and bookkeeping
    tensors: [{name, rows, cols, encoding, data}, ...]

Tensor payloads are the raw little-endian IEEE-754 float64 bytes in row-major
order, base64 encoded ("b64le8" encoding).  That round-trips every float64
bit pattern exactly, which plain decimal printing does not guarantee across
parsers.  A "decimal" encoding (list of repr'd floats) is also accepted on
load for hand-written files.

Loading validates shapes against byte counts and, when restoring into a
model, against the model's parameter shapes (ShapeMismatchError), so a
checkpoint from a different architecture fails loudly instead of silently
reinterpreting bytes.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path
from typing import Optional

import torch

from . import linalg
from .config import RunConfig, config_to_dict
from .exceptions import ParseError, ShapeMismatchError
from .layers import SubspaceFusionModel

FORMAT_TAG = "grassfuse-checkpoint"
FORMAT_VERSION = 1


def _encode_tensor(name: str, tensor: torch.Tensor) -> dict:
    mat = tensor.detach().to(linalg.DTYPE).contiguous()
    if mat.ndim == 1:
        rows, cols = 1, mat.shape[0]
    elif mat.ndim == 2:
        rows, cols = mat.shape
    else:
        # stacked parameters (e.g. per-channel maps) flatten leading dims
        rows, cols = int(torch.tensor(mat.shape[:-1]).prod()), mat.shape[-1]
    flat = mat.reshape(-1).tolist()
    raw = struct.pack(f"<{len(flat)}d", *flat)
    return {
        "name": name,
        "rows": int(rows),
        "cols": int(cols),
        "encoding": "b64le8",
        "data": base64.b64encode(raw).decode("ascii"),
    }


def _decode_tensor(entry: dict, path: str) -> tuple[str, torch.Tensor]:
    for key in ("name", "rows", "cols", "encoding", "data"):
        if key not in entry:
            raise ParseError(f"tensor entry missing {key!r}", path=path)
    name = entry["name"]
    rows, cols = int(entry["rows"]), int(entry["cols"])
    if rows < 1 or cols < 1:
        raise ParseError(f"tensor {name}: non-positive shape {rows}x{cols}", path=path)
    count = rows * cols
    if entry["encoding"] == "b64le8":
        try:
            raw = base64.b64decode(entry["data"], validate=True)
        except Exception as exc:
            raise ParseError(f"tensor {name}: bad base64 payload: {exc}", path=path) from exc
        if len(raw) != 8 * count:
            raise ShapeMismatchError(
                f"tensor {name}: {rows}x{cols} declares {8 * count} bytes, payload has {len(raw)}"
            )
        values = struct.unpack(f"<{count}d", raw)
    elif entry["encoding"] == "decimal":
        values = entry["data"]
        if not isinstance(values, list) or len(values) != count:
            raise ShapeMismatchError(
                f"tensor {name}: {rows}x{cols} needs {count} values, got "
                f"{len(values) if isinstance(values, list) else type(values).__name__}"
            )
        try:
            values = [float(v) for v in values]
        except (TypeError, ValueError) as exc:
            raise ParseError(f"tensor {name}: non-numeric value: {exc}", path=path) from exc
    else:
        raise ParseError(f"tensor {name}: unknown encoding {entry['encoding']!r}", path=path)
    return name, torch.tensor(values, dtype=linalg.DTYPE).reshape(rows, cols)


def _model_tensors(model: SubspaceFusionModel) -> dict[str, torch.Tensor]:
    tensors = dict(model.parameters())
    for i, blk in enumerate(model.blocks):
        tensors[f"blocks.{i}.running_mean"] = blk.bn.running_mean
    return tensors


def save_checkpoint(
    path: str | Path,
    model: SubspaceFusionModel,
    cfg: RunConfig,
    epoch: int = 0,
    extra_meta: Optional[dict] = None,
) -> None:
    meta = {
        "epoch": int(epoch),
        "step_count": int(model.step_count),
        "trained_steps": [int(blk.bn.trained_steps) for blk in model.blocks],
    }
    if extra_meta:
        meta.update(extra_meta)
    payload = {
        "format": {"tag": FORMAT_TAG, "version": FORMAT_VERSION},
        "config": config_to_dict(cfg),
        "meta": meta,
        "tensors": [
            _encode_tensor(name, tensor)
            for name, tensor in sorted(_model_tensors(model).items())
        ],
    }
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=1)
        handle.write("\n")


def read_checkpoint(path: str | Path) -> tuple[dict, dict, dict[str, torch.Tensor]]:
    """Raw load: (config dict, meta dict, tensors by name)."""
    path = Path(path)
    try:
        with open(path) as handle:
            payload = json.load(handle)
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint: {exc}", path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", path=str(path), line=exc.lineno) from exc
    fmt = payload.get("format", {})
    if fmt.get("tag") != FORMAT_TAG:
        raise ParseError(
            f"not a checkpoint (format tag {fmt.get('tag')!r})", path=str(path)
        )
    if int(fmt.get("version", -1)) != FORMAT_VERSION:
        raise ParseError(
            f"unsupported checkpoint version {fmt.get('version')!r}", path=str(path)
        )
    tensors = {}
    for entry in payload.get("tensors", []):
        name, tensor = _decode_tensor(entry, str(path))
        if name in tensors:
            raise ParseError(f"duplicate tensor {name!r}", path=str(path))
        tensors[name] = tensor
    return payload.get("config", {}), payload.get("meta", {}), tensors


def restore_model(
    model: SubspaceFusionModel, path: str | Path
) -> tuple[dict, dict]:
    """Copy checkpoint tensors into an initialized model, bit for bit.

    The model must already have the architecture the checkpoint was saved
    from; every parameter and buffer must be present with matching shape.
    Returns (config dict, meta dict) from the file.
    """
    cfg_dict, meta, tensors = read_checkpoint(path)
    expected = _model_tensors(model)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ShapeMismatchError(f"checkpoint missing tensors: {', '.join(missing)}")
    surplus = sorted(set(tensors) - set(expected))
    if surplus:
        raise ShapeMismatchError(f"checkpoint has unknown tensors: {', '.join(surplus)}")
    with torch.no_grad():
        for name, target in expected.items():
            source = tensors[name].reshape(-1)
            if source.numel() != target.numel():
                raise ShapeMismatchError(
                    f"tensor {name}: checkpoint holds {source.numel()} values, model "
                    f"expects {target.numel()} ({tuple(target.shape)})"
                )
            target.copy_(source.reshape(target.shape))
    model.step_count = int(meta.get("step_count", 0))
    trained = meta.get("trained_steps")
    if isinstance(trained, list) and len(trained) == len(model.blocks):
        for blk, steps in zip(model.blocks, trained):
            blk.bn.trained_steps = int(steps)
    return cfg_dict, meta
