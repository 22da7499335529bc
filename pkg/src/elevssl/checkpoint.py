"""Model archive IO: a zip file containing meta.json plus one raw
little-endian float32 blob per named tensor.

Archives are byte-deterministic: entries are stored uncompressed in sorted
order with a fixed timestamp and the metadata is serialized as canonical
JSON, so identical state produces identical files (the determinism
acceptance checks hash whole archives).
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .util import canonical_json

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


class ArchiveError(ValueError):
    """Archive failed structural or shape validation."""


def collect_state(module: nn.Module) -> dict[str, torch.Tensor]:
    """Named parameters and buffers of a module, minus integer batch-norm
    step counters (which carry no model state under fixed momentum)."""
    state = {}
    for name, p in module.named_parameters():
        state[name] = p.detach()
    for name, b in module.named_buffers():
        if name.endswith("num_batches_tracked"):
            continue
        state[name] = b.detach()
    return state


def save_archive(path: Path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    names = sorted(tensors)
    full_meta = dict(meta)
    full_meta["params"] = [
        {"name": name, "shape": list(tensors[name].shape)} for name in names
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_FIXED_DATE)
        zf.writestr(info, canonical_json(full_meta))
        for name in names:
            blob = np.ascontiguousarray(
                tensors[name].detach().cpu().numpy(), dtype="<f4"
            ).tobytes()
            info = zipfile.ZipInfo(f"params/{name}.f32", date_time=_FIXED_DATE)
            zf.writestr(info, blob)


def load_archive(path: Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"archive not found: {path}")
    with zipfile.ZipFile(path) as zf:
        entries = set(zf.namelist())
        if "meta.json" not in entries:
            raise ArchiveError(f"{path}: missing meta.json")
        meta = json.loads(zf.read("meta.json"))
        declared = meta.get("params")
        if not isinstance(declared, list):
            raise ArchiveError(f"{path}: meta.json lacks a params list")
        tensors = {}
        expected = {"meta.json"}
        for rec in declared:
            name = rec["name"]
            shape = tuple(int(v) for v in rec["shape"])
            entry = f"params/{name}.f32"
            expected.add(entry)
            if entry not in entries:
                raise ArchiveError(f"{path}: missing blob for {name!r}")
            blob = zf.read(entry)
            count = int(np.prod(shape)) if shape else 1
            if len(blob) != 4 * count:
                raise ArchiveError(
                    f"{path}: blob for {name!r} has {len(blob)} bytes, "
                    f"expected {4 * count} for shape {shape}"
                )
            arr = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
            tensors[name] = torch.from_numpy(arr)
        extras = entries - expected
        if extras:
            raise ArchiveError(f"{path}: undeclared entries {sorted(extras)}")
    return meta, tensors


def load_state_into(module: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    """Strictly load archived tensors into a module (step counters retained)."""
    sd = module.state_dict()
    missing = [
        k for k in sd if k not in tensors and not k.endswith("num_batches_tracked")
    ]
    unknown = [k for k in tensors if k not in sd]
    if missing or unknown:
        raise ArchiveError(
            f"state mismatch: missing {sorted(missing)}, unknown {sorted(unknown)}"
        )
    for name, value in tensors.items():
        if tuple(sd[name].shape) != tuple(value.shape):
            raise ArchiveError(
                f"shape mismatch for {name!r}: module {tuple(sd[name].shape)} "
                f"vs archive {tuple(value.shape)}"
            )
        sd[name] = value.to(sd[name].dtype)
    module.load_state_dict(sd)
