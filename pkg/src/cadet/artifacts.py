"""Named-tensor checkpoint container (.npz) plus JSON metadata.

Every persisted artifact is an npz archive mapping tensor names to arrays,
with a `__meta__` entry holding a JSON-encoded metadata dict (config
constants, seeds, provenance).
"""

from __future__ import annotations

import json

import numpy as np
import torch


def save_tensors(path: str, tensors: dict, meta: dict | None = None):
    arrays = {}
    for name, t in tensors.items():
        if isinstance(t, torch.Tensor):
            t = t.detach().cpu().numpy()
        arrays[name] = np.asarray(t)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:  # keep the exact path (np.savez appends .npz)
        np.savez(fh, **arrays)


def load_tensors(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
        meta = json.loads(bytes(z["__meta__"].tobytes()).decode()) if "__meta__" in z.files else {}
    return arrays, meta


def save_module(path: str, module: torch.nn.Module, meta: dict | None = None):
    save_tensors(path, dict(module.state_dict()), meta)


def load_module(path: str, module: torch.nn.Module) -> dict:
    arrays, meta = load_tensors(path)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    module.load_state_dict(state)
    return meta
