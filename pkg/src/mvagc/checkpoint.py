"""Model checkpoints as uncompressed ``.npz`` archives.

Layout (format version 1): every array is stored little-endian float64
(``<f8``) under a key ``block{b}/{field}`` or ``block{b}/{field}/view{v}`` for
per-view fields (``q``, ``theta``), plus ``fc1/weight``, ``fc1/bias``,
``fc2/weight``, ``fc2/bias``. The key ``meta`` holds a UTF-8 JSON document
(as ``uint8``) with the format version and the per-block hyperparameters.
"""
import json
from pathlib import Path

import numpy as np

from .errors import MvagcError
from .model import LayerParams, Model

FORMAT = "mvagc-checkpoint"
VERSION = 1
PER_VIEW = ("q", "theta")
HYPER = ("dropout_rate", "alpha", "sigma", "squared_kernel", "lambda_mode", "laplacian_pool")


class CheckpointError(MvagcError):
    pass


def _le(a):
    return np.ascontiguousarray(a, dtype="<f8")


def save_model(model, path, extra=None):
    arrays = {}
    blocks_meta = []
    for b, layer in enumerate(model.blocks):
        for name, arr in layer.arrays().items():
            if name in PER_VIEW:
                for v in range(layer.n_views):
                    arrays[f"block{b}/{name}/view{v}"] = _le(arr[v])
            else:
                arrays[f"block{b}/{name}"] = _le(arr)
        blocks_meta.append(
            {"n_views": layer.n_views, **{h: getattr(layer, h) for h in HYPER}}
        )
    arrays["fc1/weight"] = _le(model.fc1_weight)
    arrays["fc1/bias"] = _le(model.fc1_bias)
    arrays["fc2/weight"] = _le(model.fc2_weight)
    arrays["fc2/bias"] = _le(model.fc2_bias)
    meta = {"format": FORMAT, "version": VERSION, "blocks": blocks_meta, "extra": extra or {}}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_model(path):
    """Returns ``(model, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z.files:
            raise CheckpointError(f"{path}: not a checkpoint (no meta record)")
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format") != FORMAT or meta.get("version") != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}"
            )
        blocks = []
        for b, bm in enumerate(meta["blocks"]):
            fields = {}
            for name in ("q", "theta", "bn_gamma", "bn_beta", "weight", "bias"):
                if name in PER_VIEW:
                    fields[name] = np.stack(
                        [z[f"block{b}/{name}/view{v}"] for v in range(bm["n_views"])]
                    ).astype(np.float64)
                else:
                    fields[name] = z[f"block{b}/{name}"].astype(np.float64)
            blocks.append(LayerParams(**fields, **{h: bm[h] for h in HYPER}))
        model = Model(
            blocks,
            z["fc1/weight"].astype(np.float64), z["fc1/bias"].astype(np.float64),
            z["fc2/weight"].astype(np.float64), z["fc2/bias"].astype(np.float64),
        )
    return model, meta.get("extra", {})
