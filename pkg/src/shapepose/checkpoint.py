"""Checkpoint archives.

A checkpoint is a zip file containing

* ``config.json``   -- architecture config plus its sha256 digest,
* ``metadata.json`` -- training metadata (seed, epoch, multiplier state, ...),
* ``params/<name>.npy`` -- one array per parameter in NumPy ``.npy`` format
  (header carries dtype and shape, data is row-major),
* ``index.json``    -- parameter names, dtypes and shapes in state-dict order.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .models import PUBLISHED_PARAMETER_COUNTS, ArchConfig, ModelBundle, count_parameters


class CheckpointMismatch(ValueError):
    pass


def _dumps(obj):
    return json.dumps(obj, indent=1, sort_keys=True, default=_default)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def save_checkpoint(path, model, metadata=None):
    cfg = model.cfg
    state = model.state_dict()
    index = []
    # fixed timestamps keep archives byte-identical across reruns
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(zipfile.ZipInfo("config.json", stamp), _dumps({
            "arch": cfg.to_dict(), "sha256": cfg.digest(),
            "trainable_parameters": count_parameters(model),
            "published_parameters": PUBLISHED_PARAMETER_COUNTS.get(cfg.kind)}))
        zf.writestr(zipfile.ZipInfo("metadata.json", stamp), _dumps(metadata or {}))
        for name, t in state.items():
            arr = t.detach().cpu().numpy()
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"params/{name}.npy", stamp)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())
            index.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        zf.writestr(zipfile.ZipInfo("index.json", stamp), _dumps(index))
    return Path(path)


def read_config(path):
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("config.json"))


def load_checkpoint(path, expected=None):
    """Rebuild a model from a checkpoint.

    ``expected`` (an ArchConfig or ModelBundle) makes the loader reject
    archives whose config digest differs.
    """
    with zipfile.ZipFile(path) as zf:
        conf = json.loads(zf.read("config.json"))
        meta = json.loads(zf.read("metadata.json"))
        index = json.loads(zf.read("index.json"))
        arrays = {e["name"]: np.load(io.BytesIO(zf.read(f"params/{e['name']}.npy")), allow_pickle=False) for e in index}
    cfg = ArchConfig(**conf["arch"])
    if cfg.digest() != conf["sha256"]:
        raise CheckpointMismatch("config digest does not match the stored config")
    if expected is not None:
        want = expected.cfg if isinstance(expected, ModelBundle) else expected
        if want.digest() != conf["sha256"]:
            raise CheckpointMismatch(f"checkpoint config {conf['sha256'][:12]} != model config {want.digest()[:12]}")
    model = ModelBundle(cfg)
    dtype = next(iter(arrays.values())).dtype
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model = model.to(torch.float64 if dtype == np.float64 else torch.float32)
    model.eval()
    return model, meta


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
