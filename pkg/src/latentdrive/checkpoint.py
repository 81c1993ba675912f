"""Versioned parameter archives.

A checkpoint is an ``.npz`` file holding little-endian float32 arrays named
``<group>/<parameter>`` plus two metadata entries: ``__version__`` and
``__config__`` (UTF-8 JSON of the run configuration and step count).
"""

from __future__ import annotations

import json
import os
import zipfile

import numpy as np
import torch

from .errors import CheckpointError

CHECKPOINT_VERSION = 1


def _encode(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def save_checkpoint(path, groups, config, step=0):
    """Write ``groups`` (name -> ``nn.Module``) to ``path``; returns the path."""
    arrays = {
        "__version__": np.array([CHECKPOINT_VERSION], dtype="<i4"),
        "__config__": _encode({"config": config, "step": int(step)}),
    }
    for group, module in groups.items():
        for name, tensor in module.state_dict().items():
            arrays[f"{group}/{name}"] = tensor.detach().cpu().numpy().astype("<f4")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint(path):
    """Return ``(meta, arrays)`` where ``arrays`` maps group -> {name: ndarray}."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    if not zipfile.is_zipfile(path):
        raise CheckpointError(f"corrupt checkpoint {path}: not an npz archive")
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["__version__"][0])
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
            meta = json.loads(bytes(data["__config__"]).decode("utf-8"))
            arrays = {}
            for key in data.files:
                if key.startswith("__"):
                    continue
                group, name = key.split("/", 1)
                arr = data[key]
                if arr.dtype != np.dtype("<f4"):
                    raise CheckpointError(f"{key} is {arr.dtype}, expected <f4")
                arrays.setdefault(group, {})[name] = arr
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return meta, arrays


def load_into(module, arrays, group):
    """Copy one stored group into ``module``, checking names and shapes."""
    stored = arrays.get(group)
    if stored is None:
        raise CheckpointError(f"checkpoint has no parameter group {group!r}")
    own = module.state_dict()
    if set(own) != set(stored):
        missing = sorted(set(own) - set(stored))
        extra = sorted(set(stored) - set(own))
        raise CheckpointError(f"group {group!r} mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    new = {}
    for name, ref in own.items():
        arr = stored[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{group}/{name}: shape {arr.shape} != {tuple(ref.shape)}")
        new[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(ref.dtype)
    module.load_state_dict(new)
