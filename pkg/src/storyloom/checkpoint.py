"""Parameter checkpoints as one flat little-endian blob plus a JSON manifest."""
import json
from pathlib import Path

import numpy as np
import torch

_DTYPES = {"float32": np.float32, "float64": np.float64}


def save_checkpoint(module, path, seed=None, extra=None):
    """Write ``<path>.bin`` and ``<path>.json`` for every tensor in ``module.state_dict()``.

    Returns the manifest dict.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = module.state_dict()
    dtypes = {str(t.dtype).replace("torch.", "") for t in state.values()}
    dtype = "float64" if "float64" in dtypes else "float32"
    entries, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype(_DTYPES[dtype]).ravel()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr)
        offset += int(arr.size)
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=_DTYPES[dtype])
    blob.astype(np.dtype(_DTYPES[dtype]).newbyteorder("<")).tofile(path.with_suffix(".bin"))
    manifest = {
        "format": "flat-blob-v1",
        "dtype": dtype,
        "byteorder": "little",
        "seed": seed,
        "total": offset,
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(path):
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_checkpoint(module, path, strict=True):
    """Fill ``module`` from a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    manifest = load_manifest(path)
    np_dtype = np.dtype(_DTYPES[manifest["dtype"]]).newbyteorder("<")
    blob = np.fromfile(path.with_suffix(".bin"), dtype=np_dtype)
    if blob.size != manifest["total"]:
        raise ValueError(f"blob has {blob.size} values, manifest says {manifest['total']}")
    current = module.state_dict()
    state = {}
    for entry in manifest["tensors"]:
        values = blob[entry["offset"]: entry["offset"] + entry["count"]].reshape(entry["shape"])
        ref = current.get(entry["name"])
        dtype = ref.dtype if ref is not None else torch.float32
        state[entry["name"]] = torch.from_numpy(values.astype(np.float64)).to(dtype)
    module.load_state_dict(state, strict=strict)
    return manifest
