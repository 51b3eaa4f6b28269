import json

import numpy as np
import pytest

from mvagc.checkpoint import CheckpointError, load_model, save_model
from mvagc.model import classify

from conftest import random_graph, small_model


def test_roundtrip_bitwise(tmp_path, rng):
    m = small_model(4, q=3, laplacian_pool="mean", sigma=0.7, squared_kernel=True)
    path = save_model(m, tmp_path / "m.npz", extra={"fold": 2})
    back, extra = load_model(path)
    assert extra == {"fold": 2}
    for (k, a), (k2, b) in zip(m.parameters().items(), back.parameters().items()):
        assert k == k2 and a.dtype == b.dtype and a.tobytes() == b.tobytes()
    for l1, l2 in zip(m.blocks, back.blocks):
        for h in ("dropout_rate", "alpha", "sigma", "squared_kernel", "lambda_mode", "laplacian_pool"):
            assert getattr(l1, h) == getattr(l2, h)
    g = random_graph(rng, 6, d=4)
    assert np.array_equal(classify(m, g), classify(back, g))


def test_layout_keys_and_endianness(tmp_path):
    m = small_model(3, views=(2, 1, 1))
    path = save_model(m, tmp_path / "m.npz")
    with np.load(path) as z:
        keys = set(z.files)
        assert {"block0/q/view0", "block0/q/view1", "block0/theta/view1", "block2/weight",
                "fc1/weight", "fc2/bias", "meta"} <= keys
        assert z["block0/q/view0"].dtype.str == "<f8"
        meta = json.loads(bytes(z["meta"]).decode())
    assert meta["format"] == "mvagc-checkpoint" and meta["version"] == 1
    assert [b["n_views"] for b in meta["blocks"]] == [2, 1, 1]


def test_rejects_foreign_files(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(3))
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "x.npz")
    meta = np.frombuffer(json.dumps({"format": "mvagc-checkpoint", "version": 99}).encode(), np.uint8)
    np.savez(tmp_path / "v.npz", meta=meta)
    with pytest.raises(CheckpointError, match="v99"):
        load_model(tmp_path / "v.npz")
