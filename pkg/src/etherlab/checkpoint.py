"""Checkpointing: a named-tensor archive with an explicit shape manifest.

Layout per checkpoint: ``<dir>/step_<N>/manifest.json`` + ``data.bin``. The
manifest records (name, dtype, shape, byte offset) per tensor plus the store
version and total byte count; loading is bit-exact and validates integrity.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch


class CheckpointError(RuntimeError):
    pass


_STEP_RE = re.compile(r"^step_(\d+)$")


def _to_numpy(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().contiguous().numpy()


def save_checkpoint(tensors: dict[str, torch.Tensor], step: int, directory,
                    version: int = 0) -> Path:
    directory = Path(directory)
    ckpt_dir = directory / f"step_{step:08d}"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"version": version, "step": step, "tensors": []}
    offset = 0
    with open(ckpt_dir / "data.bin", "wb") as blob:
        for name in sorted(tensors):
            arr = _to_numpy(tensors[name])
            raw = arr.tobytes()
            manifest["tensors"].append(
                {
                    "name": name,
                    "dtype": str(arr.dtype),
                    "shape": list(arr.shape),
                    "offset": offset,
                }
            )
            blob.write(raw)
            offset += len(raw)
    manifest["total_bytes"] = offset
    with open(ckpt_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return ckpt_dir


def available_steps(directory) -> list[int]:
    directory = Path(directory)
    steps = []
    if directory.is_dir():
        for child in directory.iterdir():
            m = _STEP_RE.match(child.name)
            if m and (child / "manifest.json").exists():
                steps.append(int(m.group(1)))
    return sorted(steps)


def load_checkpoint(directory, step: int | None = None) -> dict[str, torch.Tensor]:
    """Load a checkpoint; the latest step when ``step`` is omitted."""
    directory = Path(directory)
    steps = available_steps(directory)
    if not steps:
        raise CheckpointError(f"no checkpoints under {directory}")
    if step is None:
        step = steps[-1]
    elif step not in steps:
        raise CheckpointError(
            f"checkpoint step {step} not found; available steps: {steps}"
        )
    ckpt_dir = directory / f"step_{step:08d}"
    try:
        with open(ckpt_dir / "manifest.json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest in {ckpt_dir}: {exc}") from exc
    blob = (ckpt_dir / "data.bin").read_bytes()
    if manifest.get("total_bytes") != len(blob):
        raise CheckpointError(
            f"integrity failure in {ckpt_dir}: manifest says "
            f"{manifest.get('total_bytes')} bytes, file has {len(blob)}"
        )
    out: dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(
                f"integrity failure in {ckpt_dir}: tensor {entry['name']} "
                "extends past the archive"
            )
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.copy())
    return out
