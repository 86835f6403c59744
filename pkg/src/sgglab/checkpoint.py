"""Checkpoint container shared by the detector and the relation head.

A checkpoint is a NumPy ``.npz`` archive. Every parameter or buffer is
stored under ``<component>/<name>`` in its own dtype. The key
``__manifest__`` holds a UTF-8 JSON document::

    {"format": "sgg-lab/1",
     "kind": "detector" | "relhead",
     "layers": {"<component>/<name>": {"shape": [...], "dtype": "float32"}, ...},
     "meta": {...}}

``meta`` carries the constructor arguments needed to rebuild the module.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import torch

from .core import FORMAT


class MissingArtifactError(FileNotFoundError):
    """A required checkpoint or artifact is absent."""


def save_checkpoint(path: str | Path, kind: str, modules: dict[str, torch.nn.Module], meta: dict) -> None:
    arrays = {}
    layers = {}
    for comp, module in modules.items():
        for name, t in module.state_dict().items():
            key = f"{comp}/{name}"
            arrays[key] = t.detach().cpu().numpy()
            layers[key] = {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
    manifest = {"format": FORMAT, "kind": kind, "layers": layers, "meta": meta}
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, kind: str) -> tuple[dict[str, dict[str, torch.Tensor]], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        if manifest.get("format") != FORMAT or manifest.get("kind") != kind:
            raise ValueError(f"{path}: not a {kind} checkpoint ({manifest.get('kind')!r})")
        states: dict[str, dict[str, torch.Tensor]] = {}
        for key in manifest["layers"]:
            comp, name = key.split("/", 1)
            states.setdefault(comp, {})[name] = torch.from_numpy(data[key].copy())
    return states, manifest["meta"]
