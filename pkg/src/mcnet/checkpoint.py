"""Checkpoint archives (``ckpt_session_<t>.npz``).

Layout, format version 1 (a numpy ``.npz`` archive):

    format             "mcnet-ckpt"
    version            1
    meta               JSON: config, session, seed, n_base_classes,
                       semantic_dim, channels, image_size
    report             JSON: metrics report up to and including ``session``
    param/<name>       float32 parameter arrays (state_dict names)
    buffer/<name>      batch-norm buffers
    store/class_ids, store/prototypes, store/variances,
    store/counts, store/sessions
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError
from .proto import PrototypeStore

FORMAT = "mcnet-ckpt"
VERSION = 1


def checkpoint_path(out_dir: str | Path, session: int) -> Path:
    return Path(out_dir) / f"ckpt_session_{session}.npz"


def save_checkpoint(path: str | Path, ensemble: torch.nn.Module, store: PrototypeStore,
                    meta: dict, report: dict | None = None) -> Path:
    arrays: dict[str, np.ndarray] = {
        "format": np.array(FORMAT),
        "version": np.array(VERSION),
        "meta": np.array(json.dumps(meta, sort_keys=True)),
        "report": np.array(json.dumps(report or {}, sort_keys=True)),
    }
    params = dict(ensemble.named_parameters())
    for name, tensor in ensemble.state_dict().items():
        kind = "param" if name in params else "buffer"
        arrays[f"{kind}/{name}"] = tensor.detach().cpu().numpy()
    for key, value in store.to_arrays().items():
        arrays[f"store/{key}"] = value
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    """Return {meta, report, state_dict, store} from an archive."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != FORMAT:
            raise ConfigError(f"{path} is not an {FORMAT} archive")
        if int(z["version"]) != VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {int(z['version'])}")
        state = {}
        store = {}
        for key in z.files:
            if key.startswith(("param/", "buffer/")):
                state[key.split("/", 1)[1]] = torch.from_numpy(z[key].copy())
            elif key.startswith("store/"):
                store[key.split("/", 1)[1]] = z[key]
        return {"meta": json.loads(str(z["meta"])), "report": json.loads(str(z["report"])),
                "state_dict": state, "store": PrototypeStore.from_arrays(store)}
